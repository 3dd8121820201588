#pragma once

// Loss-aware TIES merging of shard deltas into the main value matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "repair/numeric.hpp"
#include "repair/side_memory.hpp"

namespace repair {

struct MergeConfig {
  double alpha = 1.0;
  std::size_t merge_cadence = 30;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
      throw std::invalid_argument("merge.alpha must be finite and > 0");
    }
    if (merge_cadence < 1) throw std::invalid_argument("merge.merge_cadence must be >= 1");
  }
};

struct MergeReport {
  std::vector<double> weights;
  std::vector<double> losses;
  std::vector<std::size_t> shard_ids;
  std::size_t consistent_count = 0;
  std::size_t conflict_count = 0;
  double merged_delta_norm = 0.0;
  std::size_t at_edit = 0;
};

/// softmax(-alpha L), with the max subtracted before exponentiation.
inline std::vector<double> trust_weights(std::span<const double> losses, double alpha) {
  if (losses.empty()) throw std::invalid_argument("trust_weights: need at least one loss");
  if (!std::isfinite(alpha)) throw std::invalid_argument("trust_weights: alpha must be finite");
  if (!all_finite(losses)) throw NumericError("trust_weights: non-finite loss");
  std::vector<double> z(losses.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = -alpha * losses[i];
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - zmax);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return z;
}

enum class Resolution { kConsistent, kConflict };

/// Merged delta at one coordinate. Zeros carry no sign; agreeing signs give
/// the weighted sum, a conflict keeps the delta with the largest w_i |tau_i|
/// (lowest index on exact ties).
inline double resolve_coordinate(std::span<const double> taus, std::span<const double> weights,
                                 Resolution* kind = nullptr) {
  bool pos = false;
  bool neg = false;
  for (double t : taus) {
    pos = pos || t > 0.0;
    neg = neg || t < 0.0;
  }
  if (!(pos && neg)) {
    double s = 0.0;
    for (std::size_t i = 0; i < taus.size(); ++i) s += weights[i] * taus[i];
    if (kind) *kind = Resolution::kConsistent;
    return s;
  }
  std::size_t best = 0;
  double best_mag = weights[0] * std::abs(taus[0]);
  for (std::size_t i = 1; i < taus.size(); ++i) {
    const double mag = weights[i] * std::abs(taus[i]);
    if (mag > best_mag) {
      best = i;
      best_mag = mag;
    }
  }
  if (kind) *kind = Resolution::kConflict;
  return taus[best];
}

struct MergeResult {
  Matrix merged;
  MergeReport report;
};

inline void require_merge_inputs(std::span<const Matrix> deltas, std::span<const double> weights,
                                 const Matrix& base) {
  if (deltas.empty()) throw std::invalid_argument("ties_merge: no deltas");
  if (deltas.size() != weights.size()) {
    throw std::invalid_argument("ties_merge: " + std::to_string(deltas.size()) + " deltas but " +
                                std::to_string(weights.size()) + " weights");
  }
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (!deltas[i].same_shape(base)) {
      throw ShapeError("ties_merge: delta " + std::to_string(i) + " is " +
                       deltas[i].shape_string() + ", base is " + base.shape_string());
    }
  }
}

inline MergeResult ties_merge(std::span<const Matrix> deltas, std::span<const double> weights,
                              const Matrix& base) {
  require_merge_inputs(deltas, weights, base);
  MergeResult out{base, {}};
  out.report.weights.assign(weights.begin(), weights.end());
  std::vector<double> taus(deltas.size());
  double norm_sq = 0.0;
  auto merged = out.merged.values();
  for (std::size_t p = 0; p < merged.size(); ++p) {
    for (std::size_t i = 0; i < deltas.size(); ++i) taus[i] = deltas[i].values()[p];
    Resolution kind{};
    const double d = resolve_coordinate(taus, weights, &kind);
    if (kind == Resolution::kConsistent) {
      ++out.report.consistent_count;
    } else {
      ++out.report.conflict_count;
    }
    merged[p] += d;
    norm_sq += d * d;
  }
  out.report.merged_delta_norm = std::sqrt(norm_sq);
  return out;
}

/// Re-resolves `samples` random coordinates by enumerating the rule directly
/// and compares them bit-for-bit against `merged`.
inline bool merge_oracle_check(std::span<const Matrix> deltas, std::span<const double> weights,
                               const Matrix& base, const Matrix& merged, std::size_t samples,
                               std::uint64_t seed) {
  require_merge_inputs(deltas, weights, base);
  if (!merged.same_shape(base)) return false;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, base.size() - 1);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t p = pick(rng);
    std::size_t positives = 0;
    std::size_t negatives = 0;
    for (const auto& d : deltas) {
      const double t = d.values()[p];
      if (t > 0.0) ++positives;
      if (t < 0.0) ++negatives;
    }
    double expect = 0.0;
    if (positives == 0 || negatives == 0) {
      for (std::size_t i = 0; i < deltas.size(); ++i) expect += weights[i] * deltas[i].values()[p];
    } else {
      double best = -1.0;
      for (std::size_t i = 0; i < deltas.size(); ++i) {
        const double t = deltas[i].values()[p];
        if (weights[i] * std::abs(t) > best) {
          best = weights[i] * std::abs(t);
          expect = t;
        }
      }
    }
    if (merged.values()[p] != base.values()[p] + expect) return false;
  }
  return true;
}

/// Re-bases every shard onto `merged` with a fresh mask and empty state.
inline void post_merge_reset(std::vector<ShardState>& shards, const Matrix& merged, double rho,
                             std::mt19937_64& rng) {
  require_mask_ratio(rho);
  for (auto& s : shards) {
    s.weights = merged;
    s.mask = bernoulli_mask(merged.rows(), merged.cols(), rho, rng);
    s.assigned.clear();
    s.train_loss = 0.0;
    s.train_steps = 0;
  }
}

}  // namespace repair
