// Command-line front end: generate a corpus, run an edit stream, evaluate a
// saved run, or run the property suite.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "repair/checkpoint.hpp"
#include "repair/config.hpp"
#include "repair/corpus.hpp"
#include "repair/runner.hpp"
#include "repair/verify.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "override, e.g. train.edit_lr=0.4")->take_all();
  }

  repair::RunConfig load(const std::vector<std::string>& extra = {}) const {
    std::vector<std::string> all = overrides;
    all.insert(all.end(), extra.begin(), extra.end());
    if (path.empty()) return repair::load_config(nullptr, all);
    return repair::load_config_file(path, all);
  }
};

std::string default_out_dir() {
  const char* env = std::getenv("REPAIR_OUT_DIR");
  return env != nullptr && *env != '\0' ? env : "out";
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_generate(const ConfigArgs& cfg_args, std::size_t n, std::uint64_t seed,
                 const std::string& out) {
  const repair::RunConfig cfg = cfg_args.load();
  const repair::Corpus c = repair::corpus_for(cfg, seed, n);
  std::ostringstream os;
  repair::write_corpus(c, os);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  write_text(out, os.str());
  std::cout << "wrote " << c.examples.size() << " examples to " << out << "\n";
  return 0;
}

struct EditArgs {
  std::string method = "repair";
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  std::string corpus;
  std::string out_dir;
  bool csv = false;
  bool traces = false;
};

int cmd_edit(const ConfigArgs& cfg_args, const EditArgs& a) {
  std::vector<std::string> extra;
  if (a.n) extra.push_back("run.n_edits=" + std::to_string(*a.n));
  if (a.seed) extra.push_back("run.seed=" + std::to_string(*a.seed));
  const repair::RunConfig cfg = cfg_args.load(extra);
  const repair::Method method = repair::parse_method(a.method);
  const repair::Corpus corpus =
      a.corpus.empty() ? repair::corpus_for(cfg, cfg.seed, cfg.n_edits) : repair::load_corpus(a.corpus);

  const repair::RunManifest m = repair::run_method(method, cfg, corpus);

  const fs::path dir = a.out_dir.empty() ? default_out_dir() : a.out_dir;
  fs::create_directories(dir);
  write_text(dir / "manifest.json", repair::to_json(m).dump(2) + "\n");
  write_text(dir / "metrics.jsonl", repair::metrics_jsonl(m));
  if (a.csv) write_text(dir / "metrics.csv", repair::metrics_csv(m));
  write_text(dir / "timings.json", nlohmann::json(m.timings).dump(2) + "\n");
  repair::save_checkpoint((dir / "checkpoint.bin").string(), m.checkpoint);
  if (a.traces) {
    std::string batches, routes;
    for (const auto& t : m.batch_traces) batches += repair::to_json(t).dump() + "\n";
    for (const auto& t : m.routing_traces) routes += repair::to_json(t).dump() + "\n";
    write_text(dir / "batch_traces.jsonl", batches);
    write_text(dir / "routing_traces.jsonl", routes);
  }
  if (!m.records.empty()) {
    const auto& r = m.final_record();
    std::cout << m.method << " n=" << r.step << " rel=" << r.rel << " gen=" << r.gen
              << " loc=" << r.loc << " op=" << r.op << " ppl=" << r.ppl << "\n";
  }
  if (m.aborted) {
    std::cerr << "run aborted: " << m.abort_reason << "\n";
    return 3;
  }
  return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& corpus_path, const std::string& out) {
  const fs::path dir = run_dir;
  const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  const nlohmann::json cfg_json = manifest.at("config");
  const repair::RunConfig cfg = repair::load_config(&cfg_json, {});
  const repair::Corpus corpus = corpus_path.empty()
                                    ? repair::corpus_for(cfg, cfg.seed, cfg.n_edits)
                                    : repair::load_corpus(corpus_path);
  const auto ck = repair::load_checkpoint((dir / "checkpoint.bin").string());
  const repair::MetricsRecord r = repair::evaluate_checkpoint(cfg, ck, corpus, cfg.n_edits);
  nlohmann::json j = repair::to_json(r);
  j["schema"] = repair::kMetricsSchema;
  j["method"] = manifest.at("method");
  const std::string text = j.dump() + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

int cmd_verify(const std::string& out) {
  const auto results = repair::verify::run_property_suite();
  bool all = true;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  (" << r.detail << ")\n";
    all = all && r.passed;
    j.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
  }
  if (!out.empty()) write_text(out, j.dump(2) + "\n");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong model editing with routed side memories on a toy language model"};
  app.require_subcommand(1);

  ConfigArgs gen_cfg, edit_cfg;
  std::size_t gen_n = 30;
  std::uint64_t gen_seed = 0;
  std::string gen_out = "corpus.jsonl";
  auto* gen = app.add_subcommand("generate", "write a synthetic fact corpus");
  gen_cfg.attach(gen);
  gen->add_option("--n", gen_n, "number of facts")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--out", gen_out, "output path");

  EditArgs ea;
  auto* edit = app.add_subcommand("edit", "run an edit stream and write metrics");
  edit_cfg.attach(edit);
  edit->add_option("--method", ea.method, "repair or naive-ft")
      ->check(CLI::IsMember({"repair", "naive-ft", "naive"}));
  edit->add_option("--n", ea.n, "number of edits");
  edit->add_option("--seed", ea.seed, "run seed (also seeds a generated corpus)");
  edit->add_option("--corpus", ea.corpus, "corpus file; generated from the seed when absent")
      ->check(CLI::ExistingFile);
  edit->add_option("--out-dir", ea.out_dir, "output directory (default $REPAIR_OUT_DIR or ./out)");
  edit->add_flag("--csv", ea.csv, "also write metrics.csv");
  edit->add_flag("--traces", ea.traces, "also write batch and routing traces");

  std::string eval_dir, eval_corpus, eval_out;
  auto* eval = app.add_subcommand("eval", "recompute final metrics from a saved run");
  eval->add_option("--run-dir", eval_dir, "directory written by edit")->required();
  eval->add_option("--corpus", eval_corpus, "corpus file used by the run")
      ->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "write the metrics record here instead of stdout");

  std::string verify_out;
  auto* ver = app.add_subcommand("verify", "run the property suite");
  ver->add_option("--out", verify_out, "also write results as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(gen_cfg, gen_n, gen_seed, gen_out);
    if (*edit) return cmd_edit(edit_cfg, ea);
    if (*eval) return cmd_eval(eval_dir, eval_corpus, eval_out);
    if (*ver) return cmd_verify(verify_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
