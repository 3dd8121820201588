#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "repair/checkpoint.hpp"
#include "repair/config.hpp"
#include "repair/corpus.hpp"
#include "repair/metrics.hpp"
#include "repair/runner.hpp"
#include "repair/verify.hpp"

namespace fs = std::filesystem;

namespace {

using repair::RunConfig;

RunConfig small_run(std::size_t n, std::uint64_t seed = 0) {
  RunConfig c;
  c.n_edits = n;
  c.seed = seed;
  c.model_seed = seed;
  c.eval_every = 5;
  c.merge.merge_cadence = 10;
  return c;
}

// Config -----------------------------------------------------------------------

TEST(Config, DefaultsValidateAndRoundTrip) {
  const RunConfig c;
  EXPECT_NO_THROW(c.validate());
  const auto j = repair::to_json(c);
  const RunConfig back = repair::config_from_full_json(j);
  EXPECT_EQ(repair::to_json(back), j);
}

TEST(Config, OverridesApplyInOrder) {
  const RunConfig c = repair::load_config(nullptr, {"train.edit_lr=0.25", "run.n_edits=7",
                                                     "train.edit_lr=0.125"});
  EXPECT_EQ(c.train.edit_lr, 0.125);
  EXPECT_EQ(c.n_edits, 7u);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(repair::load_config(nullptr, {"train.edit_rate=0.1"}), repair::ConfigError);
  const nlohmann::json file{{"bogus", 1}};
  EXPECT_THROW(repair::load_config(&file, {}), repair::ConfigError);
  EXPECT_THROW(repair::load_config(nullptr, {"noequals"}), repair::ConfigError);
}

TEST(Config, WrongTypeRejected) {
  EXPECT_ANY_THROW(repair::load_config(nullptr, {"train.edit_lr=fast"}));
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_ANY_THROW(repair::load_config(nullptr, {"shards.mask_ratio=0"}));
  EXPECT_ANY_THROW(repair::load_config(nullptr, {"merge.cadence=0"}));
  EXPECT_ANY_THROW(repair::load_config(nullptr, {"run.mode=\"poetry\""}));
}

// Corpus -----------------------------------------------------------------------

TEST(Corpus, SingleFactShape) {
  const RunConfig c = small_run(1);
  const auto corpus = repair::corpus_for(c, 0, 1);
  ASSERT_EQ(corpus.examples.size(), 1u);
  const auto& ex = corpus.examples[0];
  EXPECT_GE(ex.rephrases.size(), 1u);
  EXPECT_FALSE(ex.locality_prompt.empty());
  EXPECT_FALSE(ex.locality_reference.empty());
}

TEST(Corpus, InvariantsHold) {
  const RunConfig c = small_run(30);
  const auto corpus = repair::corpus_for(c, 3, 30);
  const auto model = repair::model_for(c);
  std::set<repair::TokenSequence> keys;
  for (const auto& ex : corpus.examples) {
    EXPECT_TRUE(keys.insert(ex.edit_prompt).second);
    for (const auto& r : ex.rephrases) EXPECT_NE(r, ex.edit_prompt);
    EXPECT_NE(ex.locality_prompt, ex.edit_prompt);
    EXPECT_EQ(repair::greedy_decode(model, ex.locality_prompt, ex.locality_reference.size(),
                                    model.value),
              ex.locality_reference);
  }
}

TEST(Corpus, DeterministicUnderSeed) {
  const RunConfig c = small_run(10);
  std::ostringstream a, b, d;
  repair::write_corpus(repair::corpus_for(c, 4, 10), a);
  repair::write_corpus(repair::corpus_for(c, 4, 10), b);
  repair::write_corpus(repair::corpus_for(c, 5, 10), d);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), d.str());
}

TEST(Corpus, JsonlRoundTrip) {
  const auto corpus = repair::corpus_for(small_run(6), 1, 6);
  std::ostringstream out;
  repair::write_corpus(corpus, out);
  std::istringstream in(out.str());
  const auto back = repair::read_corpus(in);
  std::ostringstream again;
  repair::write_corpus(back, again);
  EXPECT_EQ(out.str(), again.str());
}

TEST(Corpus, MalformedInputRejected) {
  std::istringstream empty("");
  EXPECT_ANY_THROW(repair::read_corpus(empty));
  std::istringstream wrong("{\"schema\":\"other\"}\n");
  EXPECT_ANY_THROW(repair::read_corpus(wrong));
}

// Metrics ----------------------------------------------------------------------

TEST(Metrics, OverallPerformanceIsGeometricMean) {
  EXPECT_NEAR(repair::overall_performance(1.0, 0.5, 0.25), std::cbrt(0.125), 1e-15);
  EXPECT_EQ(repair::overall_performance(0.0, 1.0, 1.0), 0.0);
}

TEST(Metrics, UniformModelPerplexityIsVocabSize) {
  for (std::size_t v : {16u, 64u, 100u}) {
    EXPECT_NEAR(repair::verify::uniform_model_ppl(v), static_cast<double>(v), 1e-9);
  }
}

TEST(Metrics, UneditedModelHasPerfectLocality) {
  const RunConfig c = small_run(5);
  const auto corpus = repair::corpus_for(c, 0, 5);
  const auto model = repair::model_for(c);
  const repair::RoutedModel rm{model, {}, model.value, 0.0};
  const auto r = repair::compute_metrics(rm, corpus.examples, 0);
  EXPECT_EQ(r.loc, 1.0);
  EXPECT_NEAR(r.op, std::cbrt(r.rel * r.gen * r.loc), 1e-12);
}

// Checkpoint -------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  repair::TensorMap t;
  t["a"] = repair::Matrix::from_rows({{1.0, -0.0}, {std::numeric_limits<double>::denorm_min(), 1e300}});
  t["b.c"] = repair::Matrix(1, 3, 0.1);
  std::stringstream ss;
  repair::write_checkpoint(ss, t);
  const auto back = repair::read_checkpoint(ss);
  ASSERT_EQ(back.size(), 2u);
  for (const auto& [name, m] : t) {
    const auto& o = back.at(name);
    ASSERT_TRUE(o.same_shape(m));
    for (std::size_t i = 0; i < m.size(); ++i) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(o.values()[i]),
                std::bit_cast<std::uint64_t>(m.values()[i]));
    }
  }
}

TEST(Checkpoint, BadMagicRejected) {
  std::stringstream ss("XXXX0000");
  EXPECT_ANY_THROW(repair::read_checkpoint(ss));
}

// Runner -----------------------------------------------------------------------

TEST(Runner, SingleEditBothMethods) {
  const RunConfig c = small_run(1);
  const auto corpus = repair::corpus_for(c, 0, 1);
  for (auto method : {repair::Method::kRepair, repair::Method::kNaiveFt}) {
    const auto m = repair::run_method(method, c, corpus);
    ASSERT_FALSE(m.records.empty());
    EXPECT_EQ(m.final_record().rel, 1.0) << repair::to_string(method);
    EXPECT_EQ(m.final_record().loc, 1.0) << repair::to_string(method);
    EXPECT_FALSE(m.aborted);
  }
}

TEST(Runner, MetricsRecordsSatisfyIdentity) {
  const RunConfig c = small_run(12);
  const auto corpus = repair::corpus_for(c, 0, 12);
  const auto m = repair::run_repair(c, corpus);
  ASSERT_FALSE(m.records.empty());
  EXPECT_EQ(m.final_record().step, 12u);
  EXPECT_EQ(m.merges.size(), 1u);
  EXPECT_EQ(m.merges[0].at_edit, 10u);
  for (const auto& r : m.records) {
    EXPECT_NEAR(r.op, std::cbrt(r.rel * r.gen * r.loc), 1e-12);
  }
  EXPECT_TRUE(repair::verify::metric_identity_check(m.records).passed);
}

TEST(Runner, DeterministicManifest) {
  const RunConfig c = small_run(8);
  const auto corpus = repair::corpus_for(c, 2, 8);
  const auto a = repair::run_repair(c, corpus);
  const auto b = repair::run_repair(c, corpus);
  EXPECT_EQ(repair::to_json(a).dump(), repair::to_json(b).dump());
  EXPECT_EQ(repair::metrics_jsonl(a), repair::metrics_jsonl(b));
}

TEST(Runner, IsolatedNonFiniteStepIsSkipped) {
  const RunConfig c = small_run(2);
  const auto corpus = repair::corpus_for(c, 0, 2);
  int calls = 0;
  repair::RunHooks hooks;
  hooks.on_gradient = [&](repair::Matrix& g, std::size_t) {
    if (calls++ == 3) g(0, 0) = std::numeric_limits<double>::quiet_NaN();
  };
  for (auto method : {repair::Method::kRepair, repair::Method::kNaiveFt}) {
    calls = 0;
    const auto m = repair::run_method(method, c, corpus, hooks);
    EXPECT_FALSE(m.aborted);
    ASSERT_EQ(m.skipped.size(), 1u);
    EXPECT_EQ(m.skipped[0].iteration, 3u);
  }
}

TEST(Runner, PersistentNonFiniteAborts) {
  const RunConfig c = small_run(2);
  const auto corpus = repair::corpus_for(c, 0, 2);
  repair::RunHooks hooks;
  hooks.on_gradient = [](repair::Matrix& g, std::size_t) {
    g(1, 1) = std::numeric_limits<double>::infinity();
  };
  for (auto method : {repair::Method::kRepair, repair::Method::kNaiveFt}) {
    const auto m = repair::run_method(method, c, corpus, hooks);
    EXPECT_TRUE(m.aborted);
    EXPECT_EQ(m.skipped.size(), repair::kMaxConsecutiveNonFinite);
    EXPECT_NE(m.abort_reason.find("non-finite"), std::string::npos);
  }
}

TEST(Runner, CheckpointReproducesFinalMetrics) {
  const RunConfig c = small_run(6);
  const auto corpus = repair::corpus_for(c, 1, 6);
  const auto m = repair::run_repair(c, corpus);
  const auto r = repair::evaluate_checkpoint(c, m.checkpoint, corpus, 6);
  EXPECT_EQ(r.rel, m.final_record().rel);
  EXPECT_EQ(r.gen, m.final_record().gen);
  EXPECT_EQ(r.loc, m.final_record().loc);
  EXPECT_EQ(r.ppl, m.final_record().ppl);
}

TEST(Runner, CorpusTooSmallRejected) {
  const RunConfig c = small_run(5);
  const auto corpus = repair::corpus_for(c, 0, 3);
  EXPECT_ANY_THROW(repair::run_repair(c, corpus));
}

// CLI --------------------------------------------------------------------------

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("repair_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) {
    const std::string cmd = std::string(REPAIR_CLI_PATH) + " " + args + " > " +
                            (dir_ / "stdout.txt").string() + " 2> " + (dir_ / "stderr.txt").string();
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

TEST_F(Cli, MalformedConfigFailsWithoutOutputs) {
  const fs::path cfg = dir_ / "bad.json";
  std::ofstream(cfg) << "{\"train\": {\"edit_lr\": ";
  const fs::path out = dir_ / "out";
  EXPECT_NE(run("edit --config " + cfg.string() + " --n 2 --out-dir " + out.string()), 0);
  EXPECT_FALSE(fs::exists(out));
  std::ofstream(cfg) << "{\"train\": {\"unknown\": 1}}";
  EXPECT_NE(run("edit --config " + cfg.string() + " --n 2 --out-dir " + out.string()), 0);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Cli, UnknownSubcommandFails) { EXPECT_NE(run("frobnicate"), 0); }

TEST_F(Cli, EditIsDeterministicAndEvalMatches) {
  const std::string a = (dir_ / "a").string();
  const std::string b = (dir_ / "b").string();
  ASSERT_EQ(run("edit --n 3 --seed 1 --set model.seed=1 --csv --out-dir " + a), 0);
  ASSERT_EQ(run("edit --n 3 --seed 1 --set model.seed=1 --csv --out-dir " + b), 0);
  for (const char* f : {"manifest.json", "metrics.jsonl", "metrics.csv", "checkpoint.bin"}) {
    EXPECT_EQ(slurp(fs::path(a) / f), slurp(fs::path(b) / f)) << f;
  }
  ASSERT_EQ(run("eval --run-dir " + a + " --out " + (dir_ / "eval.json").string()), 0);
  const auto ev = nlohmann::json::parse(slurp(dir_ / "eval.json"));
  std::istringstream lines(slurp(fs::path(a) / "metrics.jsonl"));
  std::string last, line;
  while (std::getline(lines, line)) last = line;
  const auto rec = nlohmann::json::parse(last);
  EXPECT_EQ(ev.at("rel"), rec.at("rel"));
  EXPECT_EQ(ev.at("loc"), rec.at("loc"));
  EXPECT_EQ(ev.at("ppl"), rec.at("ppl"));
}

TEST_F(Cli, GenerateThenEditFromCorpusFile) {
  const std::string corpus = (dir_ / "c.jsonl").string();
  ASSERT_EQ(run("generate --n 4 --seed 2 --out " + corpus), 0);
  const auto c = repair::load_corpus(corpus);
  EXPECT_EQ(c.examples.size(), 4u);
  EXPECT_EQ(run("edit --method naive-ft --n 4 --corpus " + corpus + " --out-dir " +
                (dir_ / "r").string()),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "r" / "metrics.jsonl"));
}

}  // namespace
