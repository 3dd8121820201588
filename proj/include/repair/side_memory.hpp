#pragma once

// Side-memory shards: masked copies of the value matrix, the activation
// score that routes between them and the main memory, the margin loss that
// trains the routing boundary, and the masked SGD step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "repair/numeric.hpp"

namespace repair {

using SampleId = std::uint64_t;

struct ShardState {
  std::size_t id = 0;
  Matrix weights;  // W'_{v,i}
  Matrix mask;     // entries exactly 0 or 1
  std::set<SampleId> assigned;
  double train_loss = 0.0;
  std::size_t train_steps = 0;

  Matrix delta(const Matrix& base) const { return weights - base; }
};

inline Matrix bernoulli_mask(std::size_t rows, std::size_t cols, double rho,
                             std::mt19937_64& rng) {
  std::bernoulli_distribution coin(rho);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = coin(rng) ? 1.0 : 0.0;
  return m;
}

inline void require_mask_ratio(double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) {
    throw std::invalid_argument("mask ratio must lie in (0, 1], got " + std::to_string(rho));
  }
}

/// k shards, each an exact copy of `base` with an independent Bernoulli(rho) mask.
inline std::vector<ShardState> init_shards(const Matrix& base, std::size_t k, double rho,
                                           std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("init_shards: need at least one shard");
  require_mask_ratio(rho);
  std::mt19937_64 rng(seed);
  std::vector<ShardState> shards;
  shards.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    ShardState s;
    s.id = i;
    s.weights = base;
    s.mask = bernoulli_mask(base.rows(), base.cols(), rho, rng);
    shards.push_back(std::move(s));
  }
  return shards;
}

/// ||a (W' - W_v)||_2 evaluated row by row without forming the delta.
inline double activation_score(std::span<const double> a, const ShardState& shard,
                               const Matrix& base) {
  if (a.size() != base.rows() || !shard.weights.same_shape(base)) {
    throw ShapeError("activation_score: activation of dim " + std::to_string(a.size()) +
                     " against shard " + shard.weights.shape_string() + " and base " +
                     base.shape_string());
  }
  std::vector<double> out(base.cols(), 0.0);
  for (std::size_t p = 0; p < base.rows(); ++p) {
    const double ap = a[p];
    if (ap == 0.0) continue;
    auto w = shard.weights.row(p);
    auto b = base.row(p);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += ap * (w[j] - b[j]);
  }
  return l2_norm(out);
}
inline double activation_score(const Vector& a, const ShardState& shard, const Matrix& base) {
  return activation_score(a.values(), shard, base);
}

inline std::vector<double> activation_scores(std::span<const double> a,
                                             std::span<const ShardState> shards,
                                             const Matrix& base) {
  std::vector<double> scores;
  scores.reserve(shards.size());
  for (const auto& s : shards) scores.push_back(activation_score(a, s, base));
  return scores;
}

struct RoutingDecision {
  std::optional<std::size_t> shard;  // nullopt routes to main memory
  std::vector<double> scores;

  bool to_main() const { return !shard.has_value(); }
  friend bool operator==(const RoutingDecision&, const RoutingDecision&) = default;
};

/// Lowest index attaining the maximum.
inline std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

inline RoutingDecision route_scores(std::vector<double> scores, double epsilon) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("route: epsilon must be >= 0");
  RoutingDecision d{std::nullopt, std::move(scores)};
  if (d.scores.empty()) return d;
  const std::size_t best = argmax_lowest(d.scores);
  if (d.scores[best] > epsilon) d.shard = best;
  return d;
}

/// Main memory when every score is <= epsilon, otherwise the argmax shard.
inline RoutingDecision route(std::span<const double> a, std::span<const ShardState> shards,
                             const Matrix& base, double epsilon) {
  return route_scores(activation_scores(a, shards, base), epsilon);
}

/// Argmax shard for training. When no shard claims the input (every score is
/// at most `activity_floor`, or all scores are equal) the least-loaded shard
/// is used, lowest id first.
inline std::size_t assign_shard_scores(std::span<const double> scores,
                                       std::span<const ShardState> shards,
                                       double activity_floor = 0.0) {
  if (shards.empty()) throw std::invalid_argument("assign_shard: no shards");
  const std::size_t best = argmax_lowest(scores);
  const bool all_equal =
      std::all_of(scores.begin(), scores.end(), [&](double s) { return s == scores[0]; });
  if (!all_equal && scores[best] > activity_floor) return best;
  std::size_t pick = 0;
  for (std::size_t i = 1; i < shards.size(); ++i) {
    if (shards[i].assigned.size() < shards[pick].assigned.size()) pick = i;
  }
  return pick;
}

inline std::size_t assign_shard(std::span<const double> a, std::span<const ShardState> shards,
                                const Matrix& base, double activity_floor = 0.0) {
  return assign_shard_scores(activation_scores(a, shards, base), shards, activity_floor);
}

struct MaskedStep {
  double update_norm = 0.0;
  double grad_norm = 0.0;
};

/// W' <- W' - eta (M ⊙ g). A non-finite gradient leaves the shard untouched
/// and throws.
inline MaskedStep masked_update(ShardState& shard, const Matrix& grad, double eta) {
  if (!grad.same_shape(shard.weights)) {
    throw ShapeError("masked_update: gradient " + grad.shape_string() + " vs shard " +
                     shard.weights.shape_string());
  }
  if (!(eta > 0.0)) throw std::invalid_argument("masked_update: eta must be > 0");
  if (!all_finite(grad.values())) {
    throw NumericError("masked_update: non-finite gradient for shard " +
                       std::to_string(shard.id));
  }
  MaskedStep step;
  double upd_sq = 0.0;
  auto w = shard.weights.values();
  auto m = shard.mask.values();
  auto g = grad.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = eta * m[i] * g[i];
    w[i] -= d;
    upd_sq += d * d;
  }
  step.update_norm = std::sqrt(upd_sq);
  step.grad_norm = frobenius_norm(grad);
  return step;
}

struct OverlapEstimate {
  double empirical = 0.0;
  double analytic = 0.0;
};

/// Monte Carlo estimate of E<M_i⊙g_i, M_j⊙g_j> / <g_i, g_j> with fixed
/// gradients and independent Bernoulli(rho) masks; the analytic value is rho^2.
inline OverlapEstimate overlap_inner_product_check(double rho, std::size_t trials,
                                                   std::uint64_t seed, std::size_t dim = 64) {
  require_mask_ratio(rho);
  if (trials < 1) throw std::invalid_argument("overlap check: trials must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> gi(dim), gj(dim);
  for (std::size_t p = 0; p < dim; ++p) {
    gi[p] = normal(rng);
    gj[p] = gi[p] + 0.5 * normal(rng);
  }
  const double base = dot(gi, gj);
  if (base == 0.0) throw std::invalid_argument("overlap check: <g_i, g_j> = 0");
  std::bernoulli_distribution coin(rho);
  double acc = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    double ip = 0.0;
    for (std::size_t p = 0; p < dim; ++p) {
      const bool mi = coin(rng);
      const bool mj = coin(rng);
      if (mi && mj) ip += gi[p] * gj[p];
    }
    acc += ip;
  }
  return {acc / static_cast<double>(trials) / base, rho * rho};
}

struct RoutingMarginConfig {
  double gamma1 = 2.0;   // ceiling for unrelated inputs
  double gamma2 = 20.0;  // floor for edit inputs
  double gamma = 10.0;   // required gap
  double tau = 0.0;      // boundary of the separation objective; realized via the margins

  void validate() const {
    if (!(gamma1 >= 0.0) || !(gamma2 > gamma1)) {
      throw std::invalid_argument("routing margins need gamma2 > gamma1 >= 0");
    }
    if (!(gamma > 0.0)) throw std::invalid_argument("routing margin gamma must be > 0");
  }
};

struct MarginLoss {
  double value = 0.0;
  std::vector<double> d_edit;         // dL/dΔ_e per pair
  std::vector<double> d_irrelevant;   // dL/dΔ_i per pair
};

/// Mean over pairs of max(0, Δ_i - γ1) + max(0, γ2 - Δ_e) + max(0, γ - (Δ_e - Δ_i)),
/// with its (sub)gradient with respect to every score.
inline MarginLoss routing_margin_loss(std::span<const double> edit_scores,
                                      std::span<const double> irrelevant_scores,
                                      const RoutingMarginConfig& cfg) {
  if (edit_scores.empty() || edit_scores.size() != irrelevant_scores.size()) {
    throw std::invalid_argument("routing_margin_loss: need paired non-empty score lists");
  }
  const std::size_t n = edit_scores.size();
  const double inv = 1.0 / static_cast<double>(n);
  MarginLoss out{0.0, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t k = 0; k < n; ++k) {
    const double de = edit_scores[k];
    const double di = irrelevant_scores[k];
    if (di - cfg.gamma1 > 0.0) {
      out.value += di - cfg.gamma1;
      out.d_irrelevant[k] += inv;
    }
    if (cfg.gamma2 - de > 0.0) {
      out.value += cfg.gamma2 - de;
      out.d_edit[k] -= inv;
    }
    if (cfg.gamma - (de - di) > 0.0) {
      out.value += cfg.gamma - (de - di);
      out.d_edit[k] -= inv;
      out.d_irrelevant[k] += inv;
    }
  }
  out.value *= inv;
  return out;
}

/// Accumulates scale * dΔ/dW' for Δ = ||a (W' - W_v)|| into `grad`;
/// the subgradient at Δ = 0 is taken as zero.
inline void accumulate_score_grad(Matrix& grad, std::span<const double> a,
                                  const ShardState& shard, const Matrix& base, double scale) {
  std::vector<double> out(base.cols(), 0.0);
  for (std::size_t p = 0; p < base.rows(); ++p) {
    const double ap = a[p];
    if (ap == 0.0) continue;
    auto w = shard.weights.row(p);
    auto b = base.row(p);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += ap * (w[j] - b[j]);
  }
  const double norm = l2_norm(out);
  if (!(norm > 0.0) || scale == 0.0) return;
  for (double& v : out) v /= norm;
  add_outer(grad, a, out, scale);
}

}  // namespace repair
