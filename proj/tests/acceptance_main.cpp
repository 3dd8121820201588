// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "repair/runner.hpp"
#include "repair/verify.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<Outcome> outcomes;

template <typename Fn>
double timed(Fn&& fn) {
  const auto start = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void report(const Outcome& o) {
  std::printf("%s  %-34s %s  [%.2fs]\n", o.passed ? "PASS" : "FAIL", o.name.c_str(),
              o.detail.c_str(), o.seconds);
  std::fflush(stdout);
  outcomes.push_back(o);
}

void property(const std::string& label, double limit_s, repair::verify::CheckResult (*fn)()) {
  repair::verify::CheckResult r;
  const double s = timed([&] { r = fn(); });
  Outcome o{label, r.passed, r.detail, s};
  if (limit_s > 0.0 && s >= limit_s) {
    o.passed = false;
    o.detail += "; runtime over " + repair::verify::fmt(limit_s) + "s";
  }
  report(o);
}

struct ArmRun {
  repair::Method method;
  std::size_t n;
  std::uint64_t seed;
  repair::RunManifest manifest;
};

repair::RunConfig config_for(std::size_t n, std::uint64_t seed) {
  repair::RunConfig c;
  c.n_edits = n;
  c.seed = seed;
  c.model_seed = seed;
  return c;
}

std::string hist_line(const repair::Histogram& h) {
  std::ostringstream os;
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    os << "[" << repair::verify::fmt(h.edges[i]) << "," << repair::verify::fmt(h.edges[i + 1]) << "):" << h.counts[i]
       << (i + 1 < h.counts.size() ? " " : "");
  }
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int shell(const std::string& args, const fs::path& stdout_path) {
  const std::string cmd = std::string(REPAIR_CLI_PATH) + " " + args + " > " +
                          stdout_path.string() + " 2>/dev/null";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

using repair::verify::fmt;

int main() {
  using namespace repair::verify;
  property("1 masked-update norm bound", 5.0, [] { return masked_norm_bound(); });
  property("2 rho^2 overlap scaling", 30.0, [] { return overlap_scaling(); });
  property("3 finite-time re-trigger bound", 1.0, [] { return finite_time_bound_check(); });
  property("4 sphere RGD KD convergence", 10.0, [] { return sphere_rgd_check(); });
  property("5 zero-variance minimizer", 0.0, [] { return zero_variance_check(); });
  property("6 gradient correctness", 0.0, [] { return gradient_check(); });
  property("7 TIES merge oracle", 0.0, [] { return ties_oracle_check(); });

  // Desk-scale runs shared by criteria 8, 9 and 10.
  std::vector<ArmRun> runs;
  const double run_seconds = timed([&] {
    for (std::size_t n : {30u, 120u}) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const repair::RunConfig cfg = config_for(n, seed);
        const repair::Corpus corpus = repair::corpus_for(cfg, seed, n);
        for (auto m : {repair::Method::kRepair, repair::Method::kNaiveFt}) {
          runs.push_back({m, n, seed, repair::run_method(m, cfg, corpus)});
          const auto& r = runs.back().manifest.final_record();
          std::printf("  run %-8s N=%-3zu seed=%llu  rel=%.3f gen=%.3f loc=%.3f op=%.3f ppl=%.3f\n",
                      repair::to_string(m).c_str(), n, static_cast<unsigned long long>(seed),
                      r.rel, r.gen, r.loc, r.op, r.ppl);
          std::fflush(stdout);
        }
      }
    }
  });

  {
    std::vector<repair::MetricsRecord> all;
    for (const auto& r : runs) {
      all.insert(all.end(), r.manifest.records.begin(), r.manifest.records.end());
    }
    CheckResult r;
    const double s = timed([&] { r = metric_identity_check(all); });
    report({"8 metric identities", r.passed, r.detail, s});
  }

  {
    auto find = [&](repair::Method m, std::size_t n, std::uint64_t seed) -> const repair::MetricsRecord& {
      for (const auto& r : runs) {
        if (r.method == m && r.n == n && r.seed == seed) return r.manifest.final_record();
      }
      throw std::logic_error("missing run");
    };
    bool ok = true;
    std::ostringstream why;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      for (std::size_t n : {30u, 120u}) {
        const auto& rp = find(repair::Method::kRepair, n, seed);
        const auto& nf = find(repair::Method::kNaiveFt, n, seed);
        if (!(rp.op >= nf.op)) {
          ok = false;
          why << " seed " << seed << " N=" << n << " OP " << fmt(rp.op) << " < naive "
              << fmt(nf.op) << ";";
        }
        if (n == 120 && !(rp.loc >= 0.9)) {
          ok = false;
          why << " seed " << seed << " N=120 REPAIR Loc " << fmt(rp.loc) << " < 0.9;";
        }
        if (n == 120 && !(nf.loc <= 0.5)) {
          ok = false;
          why << " seed " << seed << " N=120 naive Loc " << fmt(nf.loc) << " > 0.5;";
        }
        if (n == 30 && !(rp.rel >= 0.9)) {
          ok = false;
          why << " seed " << seed << " N=30 REPAIR Rel " << fmt(rp.rel) << " < 0.9;";
        }
      }
    }
    if (run_seconds >= 600.0) {
      ok = false;
      why << " runtime " << fmt(run_seconds) << "s over 600s;";
    }
    report({"9 desk-scale ordering", ok,
            ok ? "OP ordering, Loc and Rel thresholds hold on all seeds" : why.str(), run_seconds});
  }

  {
    std::size_t separated = 0;
    std::ostringstream detail;
    std::vector<std::string> hists;
    for (const auto& r : runs) {
      if (r.method != repair::Method::kRepair || r.n != 30) continue;
      const auto& sep = *r.manifest.separation;
      separated += sep.separated ? 1 : 0;
      detail << "seed " << r.seed << ": min edit " << fmt(sep.min_edit) << " vs max loc "
             << fmt(sep.max_locality) << "; ";
      if (!sep.separated) {
        hists.push_back("    seed " + std::to_string(r.seed) + " edit     " +
                        hist_line(sep.edit_hist));
        hists.push_back("    seed " + std::to_string(r.seed) + " locality " +
                        hist_line(sep.locality_hist));
      }
    }
    detail << separated << "/3 separated";
    report({"10 routing separation", separated >= 2, detail.str(), 0.0});
    for (const auto& h : hists) std::printf("%s\n", h.c_str());
  }

  {
    const fs::path root = fs::temp_directory_path() / "repair_acceptance_determinism";
    fs::remove_all(root);
    bool ok = true;
    std::ostringstream why;
    const double s = timed([&] {
      for (int rep = 0; rep < 2; ++rep) {
        const fs::path d = root / std::to_string(rep);
        fs::create_directories(d);
        const std::string D = d.string();
        const bool cmds_ok =
            shell("generate --n 10 --seed 3 --out " + D + "/corpus.jsonl", d / "gen.out") == 0 &&
            shell("edit --method repair --n 10 --seed 3 --corpus " + D + "/corpus.jsonl --csv --out-dir " + D + "/repair",
                  d / "edit_repair.out") == 0 &&
            shell("edit --method naive-ft --n 10 --seed 3 --corpus " + D + "/corpus.jsonl --csv --out-dir " + D + "/naive",
                  d / "edit_naive.out") == 0 &&
            shell("eval --run-dir " + D + "/repair --corpus " + D + "/corpus.jsonl", d / "eval.out") == 0 &&
            shell("verify --out " + D + "/verify.json", d / "verify.out") == 0;
        if (!cmds_ok) {
          ok = false;
          why << "a subcommand exited non-zero in run " << rep << "; ";
        }
      }
      const std::vector<std::string> files{
          "corpus.jsonl",          "edit_repair.out",      "repair/manifest.json",
          "repair/metrics.jsonl",  "repair/metrics.csv",   "repair/checkpoint.bin",
          "edit_naive.out",        "naive/manifest.json",  "naive/metrics.jsonl",
          "naive/metrics.csv",     "naive/checkpoint.bin", "eval.out",
          "verify.json"};
      for (const auto& f : files) {
        const std::string a = slurp(root / "0" / f);
        const std::string b = slurp(root / "1" / f);
        if (a.empty() || a != b) {
          ok = false;
          why << f << (a.empty() ? " missing; " : " differs; ");
        }
      }
    });
    fs::remove_all(root);
    report({"11 CLI determinism", ok,
            ok ? "generate, edit (both methods), eval and verify outputs byte-identical"
               : why.str(),
            s});
  }

  std::size_t passed = 0;
  for (const auto& o : outcomes) passed += o.passed ? 1 : 0;
  std::printf("%zu/%zu criteria passed\n", passed, outcomes.size());
  return passed == outcomes.size() ? 0 : 1;
}
