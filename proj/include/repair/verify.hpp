#pragma once

// Property suite over the lemma- and theorem-level guarantees: masked-update
// norm bound, rho^2 overlap scaling, finite-time re-trigger bound, sphere RGD
// convergence, zero-variance minimizer, analytic-vs-numeric gradients, the
// merge oracle and the metric identities. Every check is seeded and prints
// no timing, so its report is reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "repair/distill.hpp"
#include "repair/feedback.hpp"
#include "repair/metrics.hpp"
#include "repair/numeric.hpp"
#include "repair/side_memory.hpp"
#include "repair/ties_merge.hpp"
#include "repair/toy_lm.hpp"

namespace repair::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(r, c);
  for (double& v : m.values()) v = n(rng);
  return m;
}

/// ||W'_after - W'_before||_F <= eta ||g||_F for random masks, gradients and
/// step sizes; the comparison allows one part in 1e12 for rounding.
inline CheckResult masked_norm_bound(std::size_t trials = 10000, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t violations = 0;
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t r = dim(rng), c = dim(rng);
    const double rho = std::max(unit(rng), 1e-3);
    const double eta = 2.0 * unit(rng) + 1e-6;
    ShardState s;
    s.weights = random_matrix(r, c, rng);
    s.mask = bernoulli_mask(r, c, rho, rng);
    const Matrix before = s.weights;
    const Matrix g = random_matrix(r, c, rng, 1.0 + 10.0 * unit(rng));
    masked_update(s, g, eta);
    const double moved = frobenius_norm(s.weights - before);
    const double bound = eta * frobenius_norm(g);
    worst = std::max(worst, bound > 0.0 ? moved / bound : 0.0);
    if (moved > bound * (1.0 + 1e-12)) ++violations;
  }
  return {"masked update norm bound", violations == 0,
          std::to_string(trials) + " trials, " + std::to_string(violations) +
              " violations, max ratio " + fmt(worst)};
}

inline CheckResult overlap_scaling(std::size_t trials = 100000, std::uint64_t seed = 2) {
  bool ok = true;
  std::string detail;
  for (double rho : {0.2, 0.5, 0.8}) {
    const OverlapEstimate e = overlap_inner_product_check(rho, trials, seed);
    const double err = std::abs(e.empirical - e.analytic);
    ok = ok && err <= 0.01;
    detail += "rho=" + fmt(rho) + ": " + fmt(e.empirical) + " vs " + fmt(e.analytic) + "; ";
  }
  return {"rho^2 overlap scaling", ok, detail};
}

/// Grid of deterministic and randomized delta-reduction processes: the
/// per-step envelope max(tau, r0 - n delta) holds and the first hit is at or
/// before N*, exactly at N* when every round removes exactly delta.
inline CheckResult finite_time_bound_check(std::uint64_t seed = 3) {
  std::size_t cases = 0, failures = 0;
  std::uint64_t s = seed;
  for (double r0 : {0.0, 0.1, 0.3, 0.45, 0.5, 0.62, 0.75, 0.9, 0.93, 1.0}) {
    for (double tau : {0.05, 0.2, 0.3, 0.5, 0.85}) {
      for (double delta : {0.01, 0.03, 0.05, 0.1, 0.2, 0.5}) {
        const std::size_t bound = finite_time_bound(r0, tau, delta);
        for (double extra : {0.0, 0.5 * delta, 2.0 * delta}) {
          ++cases;
          const DeltaProcess p = simulate_delta_process(r0, tau, delta, extra, bound + 5, ++s);
          bool ok = p.hit && p.hitting_step <= bound;
          if (extra == 0.0) ok = ok && p.hitting_step == bound;
          for (std::size_t n = 0; n < p.rates.size(); ++n) {
            const double env = std::max(tau, r0 - static_cast<double>(n) * delta);
            ok = ok && p.rates[n] <= env + 1e-9;
          }
          if (!ok) ++failures;
        }
      }
    }
  }
  return {"finite-time re-trigger bound", failures == 0,
          std::to_string(cases) + " processes, " + std::to_string(failures) + " failures"};
}

/// m = 4 features in R^3, step 1/L_R, 20 seeds: the loss never increases
/// (beyond 1e-14 rounding) and every feature ends aligned with u.
inline CheckResult sphere_rgd_check(std::size_t seeds = 20, std::size_t steps = 5000) {
  KDConfig cfg;
  const std::size_t m = 4;
  const double eta = 1.0 / sphere_kd_smoothness(cfg, m);
  std::size_t failures = 0;
  double worst_cos = 1.0;
  for (std::size_t seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Vector u(3);
    for (double& v : u) v = n(rng);
    u = normalized(u);
    const SphereRun run = sphere_rgd_converge(u, m, steps, eta, cfg, 2000 + seed);
    bool ok = true;
    for (std::size_t t = 1; t < run.loss_history.size(); ++t) {
      ok = ok && run.loss_history[t] <= run.loss_history[t - 1] + 1e-14;
    }
    for (const auto& o : run.features) {
      const double c = dot(o.values(), u.values());
      worst_cos = std::min(worst_cos, c);
      ok = ok && c > 1.0 - 1e-6;
    }
    if (!ok) ++failures;
  }
  return {"sphere RGD KD convergence", failures == 0,
          std::to_string(seeds) + " seeds, eta = 1/L_R = " + fmt(eta) + ", min cos " +
              fmt(worst_cos) + ", " + std::to_string(failures) + " failures"};
}

inline CheckResult zero_variance_check(std::uint64_t seed = 5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  KDConfig cfg;
  double max_equal = 0.0;
  double min_perturbed = 1e300;
  for (std::size_t t = 0; t < 50; ++t) {
    const std::size_t d = 2 + t % 7;
    const std::size_t b = 2 + t % 5;
    Vector f(d);
    for (double& v : f) v = n(rng);
    f = normalized(f);
    Batch batch;
    batch.teacher = 0;
    for (std::size_t i = 0; i < b; ++i) {
      if (i > 0) batch.students.push_back(i);
      batch.features.push_back(f);
    }
    max_equal = std::max(max_equal, std::abs(kd_loss(batch, cfg).total));
    const std::size_t which = t % b;
    Vector g = batch.features[which];
    g[t % d] += 1e-3 * (1.0 + std::abs(n(rng)));
    batch.features[which] = normalized(g);
    min_perturbed = std::min(min_perturbed, kd_loss(batch, cfg).total);
  }
  return {"zero-variance minimizer", max_equal <= 1e-12 && min_perturbed > 0.0,
          "equal batches max |L| = " + fmt(max_equal) + ", perturbed min L = " +
              fmt(min_perturbed)};
}

/// Worst central-difference error over 50 instances each of the edit loss,
/// the distillation loss and the routing margin loss.
struct GradientErrors {
  double edit = 0.0;
  double kd = 0.0;
  double activation = 0.0;
};

inline GradientErrors gradient_errors(std::uint64_t seed = 6) {
  GradientErrors out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Token> tok(0, 9);
  for (std::size_t t = 0; t < 50; ++t) {
    ModelConfig mc;
    mc.vocab_size = 10;
    mc.hidden_dim = 5;
    mc.ffn_dim = 7;
    mc.activation_shift = 0.5;
    mc.key_gain = 1.0;
    const ModelState model = ModelState::random(mc, seed * 100 + t);
    TokenSequence prompt, target;
    for (std::size_t i = 0; i < 1 + t % 3; ++i) prompt.push_back(tok(rng));
    for (std::size_t i = 0; i < 1 + t % 2; ++i) target.push_back(tok(rng));
    const Matrix v0 = random_matrix(7, 5, rng, 0.5);
    const auto r = grad_check(
        [&](const Matrix& v) { return autoreg_ce(model, prompt, target, v); }, v0);
    out.edit = std::max(out.edit, r.max_abs_error);
  }
  for (std::size_t t = 0; t < 50; ++t) {
    KDConfig cfg;
    cfg.lambda_cos = 0.2 + 0.1 * static_cast<double>(t % 5);
    cfg.theta_var = 0.1 + 0.2 * static_cast<double>(t % 3);
    const Matrix raw0 = random_matrix(2 + t % 4, 2 + t % 5, rng);
    const auto r = grad_check([&](const Matrix& z) { return kd_loss_raw(z, cfg); }, raw0);
    out.kd = std::max(out.kd, r.max_abs_error);
  }
  for (std::size_t t = 0; t < 50; ++t) {
    const std::size_t f = 6, h = 4, pairs = 3;
    RoutingMarginConfig cfg{1.0, 4.0, 3.0, 0.0};
    const Matrix base = random_matrix(f, h, rng);
    std::vector<Vector> ae(pairs, Vector(f)), ai(pairs, Vector(f));
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : ae)
      for (double& x : v) x = n(rng);
    for (auto& v : ai)
      for (double& x : v) x = 0.5 * n(rng);
    Matrix w0 = base + random_matrix(f, h, rng, 0.6);
    auto loss = [&](const Matrix& w) {
      ShardState s;
      s.weights = w;
      std::vector<double> de, di;
      for (std::size_t k = 0; k < pairs; ++k) {
        de.push_back(activation_score(ae[k], s, base));
        di.push_back(activation_score(ai[k], s, base));
      }
      const MarginLoss m = routing_margin_loss(de, di, cfg);
      LossAndGrad out{m.value, Matrix(f, h)};
      for (std::size_t k = 0; k < pairs; ++k) {
        accumulate_score_grad(out.grad, ae[k].values(), s, base, m.d_edit[k]);
        accumulate_score_grad(out.grad, ai[k].values(), s, base, m.d_irrelevant[k]);
      }
      return out;
    };
    const auto r = grad_check(loss, w0);
    out.activation = std::max(out.activation, r.max_abs_error);
  }
  return out;
}

inline CheckResult gradient_check() {
  const GradientErrors e = gradient_errors();
  const bool ok = e.edit <= 1e-5 && e.kd <= 1e-5 && e.activation <= 1e-5;
  return {"analytic vs finite-difference gradients", ok,
          "max abs error: edit " + fmt(e.edit) + ", kd " + fmt(e.kd) + ", activation " +
              fmt(e.activation)};
}

inline CheckResult ties_oracle_check(std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> kdist(1, 5), dim(2, 20);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool oracle_ok = true;
  std::size_t conflicts = 0;
  for (std::size_t cfg = 0; cfg < 40; ++cfg) {
    const std::size_t k = kdist(rng), r = dim(rng), c = dim(rng);
    const Matrix base = random_matrix(r, c, rng);
    std::vector<Matrix> deltas;
    std::vector<double> losses;
    const double rho = 0.2 + 0.6 * unit(rng);
    for (std::size_t i = 0; i < k; ++i) {
      deltas.push_back(hadamard(random_matrix(r, c, rng, 0.1), bernoulli_mask(r, c, rho, rng)));
      losses.push_back(3.0 * unit(rng));
    }
    const auto w = trust_weights(losses, 0.5 + unit(rng));
    const MergeResult m = ties_merge(deltas, w, base);
    conflicts += m.report.conflict_count;
    oracle_ok = oracle_ok && merge_oracle_check(deltas, w, base, m.merged, 1000, seed + cfg);
  }
  const Matrix base = random_matrix(9, 11, rng);
  const std::vector<Matrix> one{random_matrix(9, 11, rng, 0.2)};
  const std::vector<double> w1 = trust_weights(std::vector<double>{0.7}, 1.0);
  Matrix expect = base;
  expect.add_scaled(one[0], w1[0]);
  const bool single_ok = ties_merge(one, w1, base).merged == expect;
  return {"TIES merge oracle", oracle_ok && single_ok,
          "40 configurations x 1000 coordinates (" + std::to_string(conflicts) +
              " conflicted coordinates merged); single shard " +
              (single_ok ? "exact" : "MISMATCH")};
}

/// A model whose unembedding is zero predicts uniformly, so PPL = vocab.
inline double uniform_model_ppl(std::size_t vocab) {
  ModelConfig mc;
  mc.vocab_size = vocab;
  mc.hidden_dim = 4;
  mc.ffn_dim = 8;
  ModelState model = ModelState::random(mc, 11);
  model.unembed = Matrix(mc.hidden_dim, vocab);
  std::vector<std::pair<TokenSequence, TokenSequence>> pairs;
  for (Token t = 0; t < 5; ++t) {
    pairs.emplace_back(TokenSequence{static_cast<Token>(t % vocab)},
                       TokenSequence{static_cast<Token>((t + 1) % vocab), 1});
  }
  const RoutedModel rm{model, {}, model.value, 0.0};
  return compute_ppl(rm, pairs);
}

inline CheckResult metric_identity_check(std::span<const MetricsRecord> extra = {}) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  auto check = [&](const MetricsRecord& r) {
    worst = std::max(worst, std::abs(r.op - std::cbrt(r.rel * r.gen * r.loc)));
    if ((r.rel == 0.0 || r.gen == 0.0 || r.loc == 0.0) && r.op != 0.0) worst = 1.0;
  };
  for (std::size_t t = 0; t < 1000; ++t) {
    const double rel = t % 10 == 0 ? 0.0 : unit(rng);
    check(make_record(t, rel, unit(rng), unit(rng), 1.0));
  }
  for (const auto& r : extra) check(r);
  double ppl_err = 0.0;
  for (std::size_t v : {2, 10, 64, 257}) {
    ppl_err = std::max(ppl_err, std::abs(uniform_model_ppl(v) - static_cast<double>(v)));
  }
  return {"metric identities", worst < 1e-12 && ppl_err <= 1e-9,
          "max |op - cbrt(rel gen loc)| = " + fmt(worst) + " over " +
              std::to_string(1000 + extra.size()) + " records; uniform PPL error " +
              fmt(ppl_err)};
}

inline std::vector<CheckResult> run_property_suite() {
  return {masked_norm_bound(),     overlap_scaling(),     finite_time_bound_check(),
          sphere_rgd_check(),      zero_variance_check(), gradient_check(),
          ties_oracle_check(),     metric_identity_check()};
}

}  // namespace repair::verify
