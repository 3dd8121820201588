#pragma once

// Closed-loop error feedback: routed prediction, per-edit correctness,
// per-shard error rates over routed samples, the re-trigger rule, pruning of
// the worst shard with reintegration of its samples, and the finite-time
// bound on re-triggers under a guaranteed per-round error reduction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "repair/numeric.hpp"
#include "repair/side_memory.hpp"
#include "repair/toy_lm.hpp"

namespace repair {

/// Value matrix selected by routing for activation `a`.
inline const Matrix& routed_value(const RoutingDecision& d, std::span<const ShardState> shards,
                                  const Matrix& base) {
  return d.to_main() ? base : shards[*d.shard].weights;
}

struct RoutedPrediction {
  TokenSequence tokens;
  RoutingDecision routing;
};

/// Routes on A(x) and decodes with the chosen memory.
inline RoutedPrediction route_and_predict(const ModelState& model,
                                          std::span<const ShardState> shards, const Matrix& base,
                                          double epsilon, const TokenSequence& prompt,
                                          std::size_t max_len) {
  const Vector a = activation_tap(model, prompt);
  RoutedPrediction out;
  out.routing = route(a.values(), shards, base, epsilon);
  out.tokens = greedy_decode(model, prompt, max_len, routed_value(out.routing, shards, base));
  return out;
}

/// Negative log-likelihood summed over the continuation, and its token count.
struct SequenceNll {
  double nll = 0.0;
  std::size_t tokens = 0;
};

inline SequenceNll continuation_nll(const ModelState& model, const TokenSequence& context,
                                    const TokenSequence& continuation,
                                    const Matrix& value_matrix) {
  const TracedExample ex = TracedExample::make(model, context, continuation);
  return {autoreg_ce_traced(model, ex, value_matrix), continuation.size()};
}

enum class ScoreMode { kExactMatch, kInversePerplexity };

struct EditEvaluation {
  TokenSequence prediction;
  bool correct = false;
  double score = 0.0;  // correctness score in [0, 1]
  RoutingDecision routing;
};

/// Exact-match indicator in QA mode; 1/PPL of the target (clamped to [0, 1])
/// under the routed memory in hallucination mode. `correct` is always the
/// exact-match indicator.
inline EditEvaluation evaluate_edit(const ModelState& model, std::span<const ShardState> shards,
                                    const Matrix& base, double epsilon,
                                    const TokenSequence& prompt, const TokenSequence& target,
                                    ScoreMode mode = ScoreMode::kExactMatch) {
  RoutedPrediction p = route_and_predict(model, shards, base, epsilon, prompt, target.size());
  EditEvaluation ev;
  ev.correct = p.tokens == target;
  ev.prediction = std::move(p.tokens);
  ev.routing = std::move(p.routing);
  if (mode == ScoreMode::kExactMatch) {
    ev.score = ev.correct ? 1.0 : 0.0;
  } else {
    const auto nll = continuation_nll(model, prompt, target,
                                      routed_value(ev.routing, shards, base));
    const double ppl = std::exp(nll.nll / static_cast<double>(nll.tokens));
    ev.score = std::clamp(1.0 / ppl, 0.0, 1.0);
  }
  return ev;
}

struct FeedbackConfig {
  double tau_correct = 0.85;
  double tau_prune = 0.3;
  std::size_t tau_E = 8;
  std::size_t max_iter = 10000;
  double sigma_init = 0.01;
  /// Re-triggers allowed per feedback check; the global cap is max_iter.
  std::size_t max_per_check = 2;

  void validate() const {
    if (!(tau_correct >= 0.0 && tau_correct <= 1.0)) {
      throw std::invalid_argument("feedback.tau_correct must lie in [0, 1]");
    }
    if (!(tau_prune > 0.0 && tau_prune <= 1.0)) {
      throw std::invalid_argument("feedback.tau_prune must lie in (0, 1]");
    }
    if (!(sigma_init >= 0.0)) throw std::invalid_argument("feedback.sigma_init must be >= 0");
  }
};

/// Latest evaluation of an edit: which shard routing favours and how correct it was.
struct RoutedSample {
  SampleId id = 0;
  std::optional<std::size_t> shard;  // argmax shard, nullopt when no shard is active
  double correctness = 0.0;
};

struct FailureEntry {
  SampleId id = 0;
  std::optional<std::size_t> shard;
  double correctness = 0.0;
};

/// Failed edits awaiting correction plus re-trigger bookkeeping.
class FeedbackPool {
 public:
  FeedbackPool() = default;
  FeedbackPool(FeedbackConfig cfg, std::size_t num_shards)
      : cfg_(cfg), retrigger_count_(num_shards, 0) {
    cfg_.validate();
  }

  const FeedbackConfig& config() const { return cfg_; }

  /// Only failures (score <= tau_correct) may enter the pool.
  void add_failure(const FailureEntry& e) {
    if (e.correctness > cfg_.tau_correct) {
      throw std::invalid_argument("feedback pool: sample " + std::to_string(e.id) +
                                  " is not a failure");
    }
    failures_[e.id] = e;
  }
  bool contains(SampleId id) const { return failures_.contains(id); }
  void clear(SampleId id) { failures_.erase(id); }
  std::size_t size() const { return failures_.size(); }
  bool empty() const { return failures_.empty(); }
  const std::map<SampleId, FailureEntry>& failures() const { return failures_; }

  std::vector<SampleId> ids() const {
    std::vector<SampleId> out;
    for (const auto& [id, e] : failures_) out.push_back(id);
    return out;
  }

  /// Marks every remaining failure as expelled because the budget ran out.
  std::vector<SampleId> expel_all() {
    std::vector<SampleId> out = ids();
    expelled_.insert(expelled_.end(), out.begin(), out.end());
    failures_.clear();
    return out;
  }
  const std::vector<SampleId>& expelled() const { return expelled_; }

  std::size_t total_retriggers() const { return total_retriggers_; }
  bool budget_exhausted() const { return total_retriggers_ >= cfg_.max_iter; }
  const std::vector<std::size_t>& retrigger_count() const { return retrigger_count_; }
  void record_retrigger(std::size_t shard) {
    if (shard >= retrigger_count_.size()) retrigger_count_.resize(shard + 1, 0);
    ++retrigger_count_[shard];
    ++total_retriggers_;
  }

 private:
  FeedbackConfig cfg_;
  std::map<SampleId, FailureEntry> failures_;
  std::vector<SampleId> expelled_;
  std::vector<std::size_t> retrigger_count_;
  std::size_t total_retriggers_ = 0;
};

/// Fraction of samples routed to `shard` whose correctness is <= tau_correct.
/// An unused shard has no evidence of failure and scores 0.
inline double error_rate(const FeedbackPool& pool, std::size_t shard,
                         std::span<const RoutedSample> routed) {
  std::size_t total = 0;
  std::size_t failed = 0;
  for (const auto& r : routed) {
    if (r.shard != shard) continue;
    ++total;
    if (r.correctness <= pool.config().tau_correct) ++failed;
  }
  return total == 0 ? 0.0 : static_cast<double>(failed) / static_cast<double>(total);
}

inline std::vector<double> error_rates(const FeedbackPool& pool, std::size_t num_shards,
                                       std::span<const RoutedSample> routed) {
  std::vector<double> rates(num_shards);
  for (std::size_t i = 0; i < num_shards; ++i) rates[i] = error_rate(pool, i, routed);
  return rates;
}

inline bool should_retrigger(const FeedbackPool& pool, std::span<const double> rates) {
  if (pool.budget_exhausted()) return false;
  const bool rate_trip = std::any_of(rates.begin(), rates.end(),
                                     [&](double r) { return r > pool.config().tau_prune; });
  return rate_trip || pool.size() > pool.config().tau_E;
}

struct RetriggerReport {
  std::size_t pruned_shard = 0;
  std::size_t retrain_size = 0;
  std::size_t cleared = 0;
  std::vector<double> pre_rates;
  std::vector<double> post_rates;
  std::size_t ordinal = 0;  // 1-based count of re-triggers so far
  std::size_t at_edit = 0;
};

/// Re-initializes `shard` as base + sigma (N(0,1) ⊙ M) with a freshly drawn
/// mask M, so its delta stays inside the new mask support.
inline void reinitialize_shard(ShardState& shard, const Matrix& base, double rho, double sigma,
                               std::mt19937_64& rng) {
  require_mask_ratio(rho);
  shard.mask = bernoulli_mask(base.rows(), base.cols(), rho, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  shard.weights = base;
  auto w = shard.weights.values();
  auto m = shard.mask.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double noise = normal(rng);
    w[i] += sigma * noise * m[i];
  }
  shard.assigned.clear();
  shard.train_loss = 0.0;
  shard.train_steps = 0;
}

/// Prunes the worst shard and retrains on the pooled failures plus the
/// samples the pruned shard was holding.
///
/// `retrain(ids)` batches and trains the given samples; `evaluate(id)`
/// re-scores one sample after retraining; `routed_fn()` returns the current
/// routed-sample table used for the post-retrain error rates.
template <typename Retrain, typename Evaluate, typename RoutedFn>
RetriggerReport retrigger(FeedbackPool& pool, std::vector<ShardState>& shards,
                          const Matrix& base, double rho, std::mt19937_64& rng,
                          std::span<const RoutedSample> routed, Retrain&& retrain,
                          Evaluate&& evaluate, RoutedFn&& routed_fn) {
  if (shards.empty()) throw std::invalid_argument("retrigger: no shards");
  RetriggerReport report;
  report.pre_rates = error_rates(pool, shards.size(), routed);
  report.pruned_shard = argmax_lowest(report.pre_rates);

  ShardState& pruned = shards[report.pruned_shard];
  std::set<SampleId> retrain_set(pruned.assigned.begin(), pruned.assigned.end());
  for (SampleId id : pool.ids()) retrain_set.insert(id);
  reinitialize_shard(pruned, base, rho, pool.config().sigma_init, rng);

  const std::vector<SampleId> ids(retrain_set.begin(), retrain_set.end());
  report.retrain_size = ids.size();
  retrain(ids);

  for (SampleId id : pool.ids()) {
    const FailureEntry now = evaluate(id);
    if (now.correctness > pool.config().tau_correct) {
      pool.clear(id);
      ++report.cleared;
    } else {
      pool.add_failure(now);
    }
  }
  pool.record_retrigger(report.pruned_shard);
  report.ordinal = pool.total_retriggers();
  const std::vector<RoutedSample> after = routed_fn();
  report.post_rates = error_rates(pool, shards.size(), after);
  return report;
}

/// N* = ceil((r0 - tau)_+ / delta). Quotients within 1e-9 of an integer
/// from below are treated as that integer, so decimal inputs such as
/// (0.9 - 0.5) / 0.1 do not round up spuriously.
inline std::size_t finite_time_bound(double r0, double tau_prune, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("finite_time_bound: delta must be > 0");
  const double excess = std::max(r0 - tau_prune, 0.0);
  const double q = excess / delta;
  const double n = std::ceil(q);
  if (n >= 1.0 && q - (n - 1.0) <= 1e-9 * std::max(1.0, q)) return static_cast<std::size_t>(n - 1.0);
  return static_cast<std::size_t>(n);
}

struct DeltaProcess {
  std::vector<double> rates;  // r^(0), r^(1), ...
  std::size_t hitting_step = 0;
  bool hit = false;
};

/// Error-rate process in which every re-trigger above the threshold removes at
/// least delta (plus a random surplus of up to `max_extra`) and the rate never
/// rises again once it is at or below the threshold.
inline DeltaProcess simulate_delta_process(double r0, double tau_prune, double delta,
                                           double max_extra, std::size_t max_steps,
                                           std::uint64_t seed) {
  if (!(delta > 0.0)) throw std::invalid_argument("simulate_delta_process: delta must be > 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> extra(0.0, std::max(max_extra, 0.0));
  DeltaProcess p;
  double r = r0;
  p.rates.push_back(r);
  const double tol = 1e-9 * std::max(1.0, std::abs(r0));
  if (r <= tau_prune + tol) {
    p.hit = true;
    return p;
  }
  for (std::size_t n = 1; n <= max_steps; ++n) {
    if (r > tau_prune + tol) {
      r = std::max(r - delta - (max_extra > 0.0 ? extra(rng) : 0.0), 0.0);
    }
    p.rates.push_back(r);
    if (!p.hit && r <= tau_prune + tol) {
      p.hit = true;
      p.hitting_step = n;
    }
  }
  return p;
}

}  // namespace repair
