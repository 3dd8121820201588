#pragma once

// The edit stream end to end: the closed-loop side-memory editor and the
// naive fine-tuning reference, both emitting a RunManifest.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "repair/checkpoint.hpp"
#include "repair/config.hpp"
#include "repair/corpus.hpp"
#include "repair/distill.hpp"
#include "repair/feedback.hpp"
#include "repair/metrics.hpp"
#include "repair/numeric.hpp"
#include "repair/side_memory.hpp"
#include "repair/ties_merge.hpp"
#include "repair/toy_lm.hpp"

namespace repair {

inline constexpr const char* kManifestSchema = "repair.manifest.v1";
inline constexpr const char* kMetricsSchema = "repair.metrics.v1";
inline constexpr std::size_t kMaxConsecutiveNonFinite = 10;

enum class Method { kRepair, kNaiveFt };

inline std::string to_string(Method m) { return m == Method::kRepair ? "repair" : "naive-ft"; }

inline Method parse_method(const std::string& s) {
  if (s == "repair") return Method::kRepair;
  if (s == "naive-ft" || s == "naive") return Method::kNaiveFt;
  throw std::invalid_argument("unknown method \"" + s + "\" (expected repair or naive-ft)");
}

struct CalibrationRecord {
  std::size_t step = 0;
  double epsilon = 0.0;
  double calibration_max = 0.0;
  std::optional<double> edit_min;
};

struct SkipEvent {
  std::size_t step = 0;
  std::optional<std::size_t> shard;  // nullopt for the main memory
  std::size_t iteration = 0;
};

struct BatchTrace {
  std::size_t step = 0;
  std::size_t batch = 0;
  SampleId teacher = 0;
  std::vector<SampleId> students;
  std::vector<double> per_sample;
  double kd_total = 0.0;
  std::size_t shard = 0;
};

struct RoutingTrace {
  SampleId id = 0;
  std::string kind;
  std::vector<double> scores;
  std::optional<std::size_t> shard;
};

struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

inline Histogram histogram(std::span<const double> values, double lo, double hi,
                           std::size_t bins) {
  Histogram h;
  h.counts.assign(bins, 0);
  const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + width * static_cast<double>(i));
  for (double v : values) {
    auto b = static_cast<std::size_t>(std::max(0.0, (v - lo) / width));
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

/// Edit-prompt scores against locality-prompt scores (max over shards).
struct Separation {
  double min_edit = 0.0;
  double max_locality = 0.0;
  bool separated = false;
  Histogram edit_hist;
  Histogram locality_hist;
};

struct RunManifest {
  std::string method;
  RunConfig config;
  std::vector<MetricsRecord> records;
  std::vector<RetriggerReport> retriggers;
  std::vector<MergeReport> merges;
  std::vector<CalibrationRecord> calibration;
  std::vector<SkipEvent> skipped;
  std::vector<SampleId> expelled;
  std::size_t pool_size = 0;
  bool aborted = false;
  std::string abort_reason;
  std::optional<Separation> separation;

  // Kept out of the serialized manifest.
  std::vector<BatchTrace> batch_traces;
  std::vector<RoutingTrace> routing_traces;
  std::map<std::string, double> timings;
  TensorMap checkpoint;

  const MetricsRecord& final_record() const {
    if (records.empty()) throw std::logic_error("manifest has no metrics records");
    return records.back();
  }
};

/// Test seam: lets callers corrupt gradients before they are applied.
struct RunHooks {
  std::function<void(Matrix& grad, std::size_t step)> on_gradient;
};

class RunAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class PhaseClock {
 public:
  explicit PhaseClock(std::map<std::string, double>& sink, std::string name)
      : sink_(sink), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
  ~PhaseClock() {
    const auto d = std::chrono::steady_clock::now() - start_;
    sink_[name_] += std::chrono::duration<double>(d).count();
  }
  PhaseClock(const PhaseClock&) = delete;
  PhaseClock& operator=(const PhaseClock&) = delete;

 private:
  std::map<std::string, double>& sink_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
};

inline void require_corpus(const RunConfig& cfg, const Corpus& corpus) {
  if (corpus.examples.size() < cfg.n_edits) {
    throw std::invalid_argument("corpus has " + std::to_string(corpus.examples.size()) +
                                " examples, run needs " + std::to_string(cfg.n_edits));
  }
  if (corpus.vocab != cfg.model.vocab_size) {
    throw std::invalid_argument("corpus vocab does not match model.vocab_size");
  }
  if (corpus.model_seed != cfg.model_seed) {
    throw std::invalid_argument("corpus was generated for model seed " +
                                std::to_string(corpus.model_seed) + ", config has " +
                                std::to_string(cfg.model_seed));
  }
}

/// End of the window starting at `start`: never crosses an evaluation or
/// merge boundary.
inline std::size_t window_end(std::size_t start, std::size_t window, std::size_t n,
                              std::size_t eval_every, std::optional<std::size_t> cadence) {
  std::size_t end = std::min(start + window, n);
  end = std::min(end, (start / eval_every + 1) * eval_every);
  if (cadence) end = std::min(end, (start / *cadence + 1) * *cadence);
  return end;
}

}  // namespace detail

inline ModelState model_for(const RunConfig& cfg) {
  return ModelState::random(cfg.model, cfg.model_seed);
}

inline Corpus corpus_for(const RunConfig& cfg, std::uint64_t corpus_seed, std::size_t n) {
  CorpusOptions opt;
  opt.n = n;
  opt.rephrases_per_fact = cfg.rephrases_per_fact;
  opt.unrelated = cfg.unrelated_pool;
  opt.calibration = cfg.calibration_pool;
  opt.seed = corpus_seed;
  return generate_corpus(model_for(cfg), cfg.model_seed, opt);
}

class RepairRunner {
 public:
  RepairRunner(const RunConfig& cfg, const Corpus& corpus, RunHooks hooks = {})
      : cfg_(cfg),
        corpus_(corpus),
        hooks_(std::move(hooks)),
        model_(model_for(cfg)),
        base_(model_.value),
        rng_(cfg.seed),
        pool_(cfg.feedback, cfg.num_shards) {
    cfg_.validate();
    detail::require_corpus(cfg_, corpus_);
    examples_.assign(corpus_.examples.begin(),
                     corpus_.examples.begin() + static_cast<long>(cfg_.n_edits));
    manifest_.method = to_string(Method::kRepair);
    manifest_.config = cfg_;
    {
      detail::PhaseClock clock(manifest_.timings, "precompute");
      for (const auto& ex : examples_) {
        edit_act_.push_back(activation_tap(model_, ex.edit_prompt));
        loc_act_.push_back(activation_tap(model_, ex.locality_prompt));
        traced_.push_back(TracedExample::make(model_, ex.edit_prompt, ex.edit_target));
      }
      for (const auto& s : corpus_.unrelated) unrelated_act_.push_back(activation_tap(model_, s));
      for (const auto& s : corpus_.calibration) calib_act_.push_back(activation_tap(model_, s));
    }
    shards_ = init_shards(base_, cfg_.num_shards, cfg_.mask_ratio, rng_());
    epsilon_ = cfg_.margin.gamma1;
  }

  RunManifest run() {
    try {
      stream();
    } catch (const RunAborted& e) {
      manifest_.aborted = true;
      manifest_.abort_reason = e.what();
    }
    finish();
    return std::move(manifest_);
  }

  const std::vector<ShardState>& shards() const { return shards_; }
  const Matrix& main_memory() const { return base_; }
  double epsilon() const { return epsilon_; }

 private:
  void stream() {
    const std::size_t n = cfg_.n_edits;
    std::size_t start = 0;
    while (start < n) {
      if (start > 0 && start % cfg_.merge.merge_cadence == 0 && merged_at_ != start) {
        detail::PhaseClock clock(manifest_.timings, "merge");
        merge(start);
      }
      const std::size_t end = detail::window_end(start, cfg_.train.window, n, cfg_.eval_every,
                                                 cfg_.merge.merge_cadence);
      std::vector<SampleId> ids;
      for (std::size_t i = start; i < end; ++i) ids.push_back(i);
      {
        detail::PhaseClock clock(manifest_.timings, "train");
        for (const Batch& b : plan_batches(ids, end)) {
          const std::size_t shard = assign_shard_scores(
              activation_scores(edit_act_[b.teacher].values(), shards_, base_), shards_,
              std::max(cfg_.margin.gamma1, epsilon_));
          train_batch(b.members(), shard, end);
          for (SampleId id : b.members()) shards_[shard].assigned.insert(id);
          shard_of_batch_.push_back(shard);
        }
        fill_trace_shards();
      }
      processed_ = end;
      recalibrate(end);
      {
        detail::PhaseClock clock(manifest_.timings, "evaluate");
        const bool eval_point = end % cfg_.eval_every == 0 || end == n;
        if (eval_point) {
          std::vector<SampleId> all;
          for (std::size_t i = 0; i < end; ++i) all.push_back(i);
          sweep(all);
        } else {
          sweep(ids);
        }
      }
      {
        detail::PhaseClock clock(manifest_.timings, "feedback");
        feedback(end);
      }
      if (end % cfg_.eval_every == 0 || end == n) {
        detail::PhaseClock clock(manifest_.timings, "metrics");
        record_metrics(end);
      }
      start = end;
    }
  }

  // Batching ---------------------------------------------------------------

  FeatureSample feature(SampleId id) const { return {id, normalized(edit_act_[id])}; }

  std::vector<Batch> plan_batches(const std::vector<SampleId>& ids, std::size_t step) {
    std::vector<Batch> out;
    std::vector<SampleId> pending = ids;
    ResidualPool residual;
    for (std::size_t round = 0; round <= cfg_.kd.max_recluster_rounds && pending.size() >= 2;
         ++round) {
      std::vector<FeatureSample> samples;
      for (SampleId id : pending) samples.push_back(feature(id));
      BatchPlan plan = form_batches(std::move(samples), cfg_.kd.batch_size);
      std::vector<std::vector<double>> losses;
      for (const auto& b : plan.batches) losses.push_back(kd_loss(b, cfg_.kd).per_sample);
      std::vector<Batch> kept = filter_and_recluster(plan.batches, losses, cfg_.kd, residual);
      for (auto& b : kept) out.push_back(std::move(b));
      pending = plan.residual;
      for (const auto& [id, entry] : residual.drain()) pending.push_back(id);
      std::sort(pending.begin(), pending.end());
    }
    for (SampleId id : pending) {
      Batch b;
      b.teacher = id;
      b.features.push_back(feature(id).feature);
      out.push_back(std::move(b));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      BatchTrace t;
      t.step = step;
      t.batch = i;
      t.teacher = out[i].teacher;
      t.students = out[i].students;
      if (out[i].size() >= 2) {
        const KDLoss kd = kd_loss(out[i], cfg_.kd);
        t.per_sample = kd.per_sample;
        t.kd_total = kd.total;
      }
      pending_traces_.push_back(std::move(t));
    }
    return out;
  }

  void fill_trace_shards() {
    for (std::size_t i = 0; i < pending_traces_.size() && i < shard_of_batch_.size(); ++i) {
      pending_traces_[i].shard = shard_of_batch_[i];
      manifest_.batch_traces.push_back(std::move(pending_traces_[i]));
    }
    pending_traces_.clear();
    shard_of_batch_.clear();
  }

  // Training ---------------------------------------------------------------

  /// n_iter masked steps on `shard` over edit loss, routing margin and the
  /// optional soft distillation term. Returns the final mean edit loss.
  double train_batch(const std::vector<SampleId>& members, std::size_t shard_id,
                     std::size_t step) {
    ShardState& shard = shards_[shard_id];
    // Routing negatives: background prompts plus edits owned by other shards.
    std::vector<const Vector*> others;
    for (const auto& s : shards_) {
      if (s.id == shard_id) continue;
      for (SampleId id : s.assigned) {
        if (std::find(members.begin(), members.end(), id) == members.end()) {
          others.push_back(&edit_act_[id]);
        }
      }
    }
    std::uniform_int_distribution<std::size_t> pick_irr(
        0, unrelated_act_.empty() ? 0 : unrelated_act_.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_other(0, others.empty() ? 0 : others.size() - 1);
    const std::size_t r_bg = unrelated_act_.empty() ? 0 : cfg_.train.irrelevant_per_edit;
    const std::size_t r_x = others.empty() ? 0 : cfg_.train.cross_shard_negatives;
    const std::size_t r = r_bg + r_x;
    std::vector<SampleId> held;
    for (SampleId id : shard.assigned) {
      if (std::find(members.begin(), members.end(), id) == members.end()) held.push_back(id);
    }
    double last_ce = 0.0;
    for (std::size_t it = 0; it < cfg_.train.n_iter; ++it) {
      std::vector<SampleId> active = members;
      if (!held.empty() && cfg_.train.replay > 0) {
        std::vector<SampleId> pick;
        std::sample(held.begin(), held.end(), std::back_inserter(pick), cfg_.train.replay, rng_);
        active.insert(active.end(), pick.begin(), pick.end());
      }
      Matrix grad(base_.rows(), base_.cols());
      double ce = 0.0;
      double loss = 0.0;
      for (SampleId id : active) ce += autoreg_ce_traced(model_, traced_[id], shard.weights, &grad);
      loss += ce;
      if (cfg_.train.lambda_a > 0.0 && r > 0) {
        for (SampleId id : active) {
          const auto& ae = edit_act_[id].values();
          const double de = activation_score(ae, shard, base_);
          std::vector<double> edit_scores(r, de);
          std::vector<const Vector*> neg(r);
          std::vector<double> neg_scores(r);
          for (std::size_t k = 0; k < r; ++k) {
            neg[k] = k < r_bg ? &unrelated_act_[pick_irr(rng_)] : others[pick_other(rng_)];
            neg_scores[k] = activation_score(neg[k]->values(), shard, base_);
          }
          const MarginLoss m = routing_margin_loss(edit_scores, neg_scores, cfg_.margin);
          loss += cfg_.train.lambda_a * m.value;
          double d_edit = 0.0;
          for (double d : m.d_edit) d_edit += d;
          accumulate_score_grad(grad, ae, shard, base_, cfg_.train.lambda_a * d_edit);
          for (std::size_t k = 0; k < r; ++k) {
            if (m.d_irrelevant[k] == 0.0) continue;
            accumulate_score_grad(grad, neg[k]->values(), shard, base_,
                                  cfg_.train.lambda_a * m.d_irrelevant[k]);
          }
        }
      }
      if (cfg_.train.soft_weight > 0.0 && cfg_.kd.temperature > 0.0 && members.size() >= 2) {
        loss += soft_distill(members, shard, grad);
      }
      if (hooks_.on_gradient) hooks_.on_gradient(grad, step);
      if (!apply_step(shard, grad, loss, step, it, shard_id)) continue;
      last_ce = ce / static_cast<double>(active.size());
    }
    shard.train_loss = last_ce;
    shard.train_steps += cfg_.train.n_iter;
    return last_ce;
  }

  /// KL(p_teacher || p_student) at temperature T on the first target
  /// position, teacher held fixed; gradient flows into the student's logits.
  double soft_distill(const std::vector<SampleId>& members, const ShardState& shard,
                      Matrix& grad) {
    const double temp = cfg_.kd.temperature;
    const double scale = cfg_.train.soft_weight / static_cast<double>(members.size() - 1);
    auto logits_of = [&](SampleId id) {
      const auto& tr = traced_[id];
      return logits_at(model_, tr.trace, tr.first_prediction(), shard.weights);
    };
    const Vector teacher = logits_of(members[0]);
    const Vector teacher_log = log_softmax(teacher, temp);
    double value = 0.0;
    const std::size_t H = model_.config.hidden_dim;
    for (std::size_t s = 1; s < members.size(); ++s) {
      const Vector student = logits_of(members[s]);
      value += scale * kl_divergence(teacher_log, log_softmax(student, temp));
      const Vector dlogits = soft_kd_student_grad(teacher, student, temp);
      Vector dout(H);
      for (std::size_t j = 0; j < H; ++j) dout[j] = dot(model_.unembed.row(j), dlogits.values());
      const auto& tr = traced_[members[s]];
      add_outer(grad, tr.trace.activation.row(tr.first_prediction()), dout.values(), scale);
    }
    return value;
  }

  bool apply_step(ShardState& shard, const Matrix& grad, double loss, std::size_t step,
                  std::size_t iteration, std::size_t shard_id) {
    const bool finite = std::isfinite(loss) && all_finite(grad.values()) &&
                        frobenius_norm(grad) <= cfg_.max_grad_norm;
    if (!finite) {
      manifest_.skipped.push_back({step, shard_id, iteration});
      if (++consecutive_nonfinite_ >= kMaxConsecutiveNonFinite) {
        throw RunAborted("loss non-finite for " + std::to_string(kMaxConsecutiveNonFinite) +
                         " consecutive steps at edit " + std::to_string(step));
      }
      return false;
    }
    consecutive_nonfinite_ = 0;
    masked_update(shard, grad, cfg_.train.edit_lr);
    return true;
  }

  // Routing threshold ------------------------------------------------------

  double max_score(const Vector& a) const {
    double best = 0.0;
    for (const auto& s : shards_) best = std::max(best, activation_score(a.values(), s, base_));
    return best;
  }

  std::set<SampleId> live_edits() const {
    std::set<SampleId> live;
    for (const auto& s : shards_) live.insert(s.assigned.begin(), s.assigned.end());
    return live;
  }

  /// Midpoint between the held-out calibration maximum and the weakest live
  /// edit; the calibration maximum when the two overlap.
  void recalibrate(std::size_t step) {
    detail::PhaseClock clock(manifest_.timings, "calibrate");
    CalibrationRecord rec;
    rec.step = step;
    for (const auto& a : calib_act_) rec.calibration_max = std::max(rec.calibration_max, max_score(a));
    for (SampleId id : live_edits()) {
      const double s = max_score(edit_act_[id]);
      rec.edit_min = rec.edit_min ? std::min(*rec.edit_min, s) : s;
    }
    if (rec.edit_min && *rec.edit_min > rec.calibration_max) {
      rec.epsilon = 0.5 * (*rec.edit_min + rec.calibration_max);
    } else {
      rec.epsilon = rec.calibration_max;
    }
    epsilon_ = rec.epsilon;
    manifest_.calibration.push_back(rec);
  }

  // Feedback ---------------------------------------------------------------

  ScoreMode score_mode() const {
    return cfg_.mode == RunMode::kQa ? ScoreMode::kExactMatch : ScoreMode::kInversePerplexity;
  }

  static std::optional<std::size_t> argmax_active(const std::vector<double>& scores) {
    if (scores.empty()) return std::nullopt;
    const std::size_t best = argmax_lowest(scores);
    if (!(scores[best] > 0.0)) return std::nullopt;
    return best;
  }

  FailureEntry evaluate(SampleId id) {
    const auto& ex = examples_[id];
    const EditEvaluation ev = evaluate_edit(model_, shards_, base_, epsilon_, ex.edit_prompt,
                                            ex.edit_target, score_mode());
    FailureEntry e{id, argmax_active(ev.routing.scores), ev.score};
    routed_[id] = {id, e.shard, e.correctness};
    return e;
  }

  void sweep(const std::vector<SampleId>& ids) {
    for (SampleId id : ids) {
      const FailureEntry e = evaluate(id);
      if (e.correctness <= cfg_.feedback.tau_correct) {
        pool_.add_failure(e);
      } else if (pool_.contains(id)) {
        pool_.clear(id);
      }
    }
  }

  std::vector<RoutedSample> routed_table() const {
    std::vector<RoutedSample> out;
    for (const auto& [id, r] : routed_) out.push_back(r);
    return out;
  }

  void refresh_routed() {
    for (std::size_t i = 0; i < processed_; ++i) evaluate(i);
  }

  void feedback(std::size_t step) {
    std::vector<RoutedSample> table = routed_table();
    std::vector<double> rates = error_rates(pool_, shards_.size(), table);
    for (std::size_t n = 0; n < cfg_.feedback.max_per_check && should_retrigger(pool_, rates);
         ++n) {
      std::size_t pruned = 0;
      auto retrain = [&](const std::vector<SampleId>& ids) {
        pruned = argmax_lowest(rates);
        for (auto& s : shards_)
          for (SampleId id : ids) s.assigned.erase(id);
        for (const Batch& b : plan_batches(ids, step)) {
          train_batch(b.members(), pruned, step);
          for (SampleId id : b.members()) shards_[pruned].assigned.insert(id);
          shard_of_batch_.push_back(pruned);
        }
        fill_trace_shards();
        recalibrate(step);
      };
      auto eval = [&](SampleId id) { return evaluate(id); };
      auto routed_fn = [&]() {
        refresh_routed();
        return routed_table();
      };
      RetriggerReport report = retrigger(pool_, shards_, base_, cfg_.mask_ratio, rng_, table,
                                         retrain, eval, routed_fn);
      report.at_edit = step;
      rates = report.post_rates;
      table = routed_table();
      manifest_.retriggers.push_back(std::move(report));
    }
    if (pool_.budget_exhausted() && !pool_.empty()) {
      const auto out = pool_.expel_all();
      manifest_.expelled.insert(manifest_.expelled.end(), out.begin(), out.end());
    }
  }

  // Merge ------------------------------------------------------------------

  void merge(std::size_t step) {
    merged_at_ = step;
    std::vector<Matrix> deltas;
    MergeReport report;
    report.at_edit = step;
    for (const auto& s : shards_) {
      if (s.assigned.empty()) continue;
      double ce = 0.0;
      for (SampleId id : s.assigned) ce += autoreg_ce_traced(model_, traced_[id], s.weights);
      report.losses.push_back(ce / static_cast<double>(s.assigned.size()));
      report.shard_ids.push_back(s.id);
      deltas.push_back(s.delta(base_));
    }
    if (deltas.empty()) return;
    const std::vector<double> w = trust_weights(report.losses, cfg_.merge.alpha);
    MergeResult merged = ties_merge(deltas, w, base_);
    merged.report.losses = report.losses;
    merged.report.shard_ids = report.shard_ids;
    merged.report.at_edit = step;
    base_ = std::move(merged.merged);
    post_merge_reset(shards_, base_, cfg_.mask_ratio, rng_);
    routed_.clear();
    manifest_.merges.push_back(std::move(merged.report));
    recalibrate(step);
  }

  // Reporting --------------------------------------------------------------

  void record_metrics(std::size_t step) {
    const RoutedModel rm{model_, shards_, base_, epsilon_};
    manifest_.records.push_back(
        compute_metrics(rm, std::span(examples_).first(step), step));
  }

  void finish() {
    manifest_.pool_size = pool_.size();
    if (processed_ == 0) return;
    std::vector<double> edit_scores, loc_scores;
    for (std::size_t i = 0; i < processed_; ++i) {
      edit_scores.push_back(max_score(edit_act_[i]));
      loc_scores.push_back(max_score(loc_act_[i]));
    }
    Separation sep;
    sep.min_edit = *std::min_element(edit_scores.begin(), edit_scores.end());
    sep.max_locality = *std::max_element(loc_scores.begin(), loc_scores.end());
    sep.separated = sep.min_edit > sep.max_locality;
    const double hi = std::max(*std::max_element(edit_scores.begin(), edit_scores.end()),
                               sep.max_locality);
    sep.edit_hist = histogram(edit_scores, 0.0, hi, 10);
    sep.locality_hist = histogram(loc_scores, 0.0, hi, 10);
    manifest_.separation = sep;

    for (std::size_t i = 0; i < processed_; ++i) {
      const auto& ex = examples_[i];
      auto trace = [&](const std::string& kind, const Vector& a) {
        RoutingDecision d = route(a.values(), shards_, base_, epsilon_);
        manifest_.routing_traces.push_back({ex.id, kind, d.scores, d.shard});
      };
      trace("edit", edit_act_[i]);
      for (const auto& r : ex.rephrases) trace("rephrase", activation_tap(model_, r));
      trace("locality", loc_act_[i]);
    }

    TensorMap& ck = manifest_.checkpoint;
    ck["model.embed"] = model_.embed;
    ck["model.key"] = model_.key;
    ck["model.unembed"] = model_.unembed;
    ck["value.main"] = base_;
    for (const auto& s : shards_) {
      ck["shard." + std::to_string(s.id) + ".weights"] = s.weights;
      ck["shard." + std::to_string(s.id) + ".mask"] = s.mask;
    }
    ck["routing.epsilon"] = Matrix(1, 1, epsilon_);
  }

  RunConfig cfg_;
  const Corpus& corpus_;
  RunHooks hooks_;
  ModelState model_;
  Matrix base_;
  std::mt19937_64 rng_;
  FeedbackPool pool_;
  std::vector<EditExample> examples_;
  std::vector<Vector> edit_act_, loc_act_, unrelated_act_, calib_act_;
  std::vector<TracedExample> traced_;
  std::vector<ShardState> shards_;
  double epsilon_ = 0.0;
  std::map<SampleId, RoutedSample> routed_;
  std::size_t processed_ = 0;
  std::size_t merged_at_ = 0;
  std::size_t consecutive_nonfinite_ = 0;
  std::vector<BatchTrace> pending_traces_;
  std::vector<std::size_t> shard_of_batch_;
  RunManifest manifest_;
};

inline RunManifest run_repair(const RunConfig& cfg, const Corpus& corpus, RunHooks hooks = {}) {
  return RepairRunner(cfg, corpus, std::move(hooks)).run();
}

/// Sequential fine-tuning of W_v itself on each edit, no shards or routing.
inline RunManifest run_naive_ft(const RunConfig& cfg, const Corpus& corpus, RunHooks hooks = {}) {
  cfg.validate();
  detail::require_corpus(cfg, corpus);
  RunManifest m;
  m.method = to_string(Method::kNaiveFt);
  m.config = cfg;
  const ModelState model = model_for(cfg);
  Matrix w = model.value;
  const std::vector<EditExample> examples(corpus.examples.begin(),
                                          corpus.examples.begin() + static_cast<long>(cfg.n_edits));
  std::size_t consecutive = 0;
  try {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      {
        detail::PhaseClock clock(m.timings, "train");
        const TracedExample ex =
            TracedExample::make(model, examples[i].edit_prompt, examples[i].edit_target);
        for (std::size_t it = 0; it < cfg.train.n_iter; ++it) {
          Matrix grad(w.rows(), w.cols());
          const double loss = autoreg_ce_traced(model, ex, w, &grad);
          if (hooks.on_gradient) hooks.on_gradient(grad, i + 1);
          if (!std::isfinite(loss) || !all_finite(grad.values()) ||
              frobenius_norm(grad) > cfg.max_grad_norm) {
            m.skipped.push_back({i + 1, std::nullopt, it});
            if (++consecutive >= kMaxConsecutiveNonFinite) {
              throw RunAborted("loss non-finite for " + std::to_string(kMaxConsecutiveNonFinite) +
                               " consecutive steps at edit " + std::to_string(i + 1));
            }
            continue;
          }
          consecutive = 0;
          w.add_scaled(grad, -cfg.train.edit_lr);
        }
      }
      const std::size_t step = i + 1;
      if (step % cfg.eval_every == 0 || step == examples.size()) {
        detail::PhaseClock clock(m.timings, "metrics");
        const RoutedModel rm{model, {}, w, 0.0};
        m.records.push_back(compute_metrics(rm, std::span(examples).first(step), step));
      }
    }
  } catch (const RunAborted& e) {
    m.aborted = true;
    m.abort_reason = e.what();
  }
  m.checkpoint["model.embed"] = model.embed;
  m.checkpoint["model.key"] = model.key;
  m.checkpoint["model.unembed"] = model.unembed;
  m.checkpoint["value.main"] = w;
  m.checkpoint["routing.epsilon"] = Matrix(1, 1, 0.0);
  return m;
}

inline RunManifest run_method(Method method, const RunConfig& cfg, const Corpus& corpus,
                              RunHooks hooks = {}) {
  return method == Method::kRepair ? run_repair(cfg, corpus, std::move(hooks))
                                   : run_naive_ft(cfg, corpus, std::move(hooks));
}

/// Metrics for the first `n` examples from a saved checkpoint.
inline MetricsRecord evaluate_checkpoint(const RunConfig& cfg, const TensorMap& ck,
                                         const Corpus& corpus, std::size_t n) {
  ModelState model = model_for(cfg);
  auto get = [&](const std::string& name) -> const Matrix& {
    const auto it = ck.find(name);
    if (it == ck.end()) throw std::runtime_error("checkpoint lacks tensor " + name);
    return it->second;
  };
  model.embed = get("model.embed");
  model.key = get("model.key");
  model.unembed = get("model.unembed");
  const Matrix& main = get("value.main");
  model.require_value_shape(main);
  std::vector<ShardState> shards;
  for (std::size_t i = 0; ck.contains("shard." + std::to_string(i) + ".weights"); ++i) {
    ShardState s;
    s.id = i;
    s.weights = get("shard." + std::to_string(i) + ".weights");
    s.mask = get("shard." + std::to_string(i) + ".mask");
    model.require_value_shape(s.weights);
    shards.push_back(std::move(s));
  }
  const double eps = get("routing.epsilon")(0, 0);
  if (n < 1 || n > corpus.examples.size()) throw std::invalid_argument("eval: bad example count");
  const RoutedModel rm{model, shards, main, eps};
  return compute_metrics(rm, std::span(corpus.examples).first(n), n);
}

// Serialization --------------------------------------------------------------

inline nlohmann::json to_json(const RetriggerReport& r) {
  return {{"at_edit", r.at_edit},         {"ordinal", r.ordinal},
          {"pruned_shard", r.pruned_shard}, {"retrain_size", r.retrain_size},
          {"cleared", r.cleared},         {"pre_rates", r.pre_rates},
          {"post_rates", r.post_rates}};
}

inline nlohmann::json to_json(const MergeReport& r) {
  return {{"at_edit", r.at_edit},
          {"shard_ids", r.shard_ids},
          {"losses", r.losses},
          {"weights", r.weights},
          {"consistent_count", r.consistent_count},
          {"conflict_count", r.conflict_count},
          {"merged_delta_norm", r.merged_delta_norm}};
}

inline nlohmann::json optional_json(const std::optional<std::size_t>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const Histogram& h) {
  return {{"edges", h.edges}, {"counts", h.counts}};
}

inline nlohmann::json to_json(const RunManifest& m) {
  using nlohmann::json;
  json j{{"schema", kManifestSchema}, {"method", m.method}, {"config", to_json(m.config)},
         {"seed", m.config.seed}};
  j["records"] = json::array();
  for (const auto& r : m.records) j["records"].push_back(to_json(r));
  j["retriggers"] = json::array();
  for (const auto& r : m.retriggers) j["retriggers"].push_back(to_json(r));
  j["merges"] = json::array();
  for (const auto& r : m.merges) j["merges"].push_back(to_json(r));
  j["calibration"] = json::array();
  for (const auto& c : m.calibration) {
    j["calibration"].push_back({{"step", c.step},
                                {"epsilon", c.epsilon},
                                {"calibration_max", c.calibration_max},
                                {"edit_min", c.edit_min ? json(*c.edit_min) : json(nullptr)}});
  }
  j["skipped_steps"] = json::array();
  for (const auto& s : m.skipped) {
    j["skipped_steps"].push_back(
        {{"step", s.step}, {"shard", optional_json(s.shard)}, {"iteration", s.iteration}});
  }
  j["expelled"] = m.expelled;
  j["pool_size"] = m.pool_size;
  j["aborted"] = m.aborted;
  j["abort_reason"] = m.abort_reason;
  if (m.separation) {
    const auto& s = *m.separation;
    j["separation"] = {{"min_edit_score", s.min_edit},
                       {"max_locality_score", s.max_locality},
                       {"separated", s.separated},
                       {"edit_histogram", to_json(s.edit_hist)},
                       {"locality_histogram", to_json(s.locality_hist)}};
  } else {
    j["separation"] = nullptr;
  }
  return j;
}

inline nlohmann::json to_json(const BatchTrace& t) {
  return {{"step", t.step},         {"batch", t.batch},       {"teacher", t.teacher},
          {"students", t.students}, {"per_sample_kd", t.per_sample},
          {"kd_total", t.kd_total}, {"shard", t.shard}};
}

inline nlohmann::json to_json(const RoutingTrace& t) {
  return {{"id", t.id}, {"kind", t.kind}, {"scores", t.scores}, {"shard", optional_json(t.shard)}};
}

/// One JSON record per evaluation step, schema tag on every line.
inline std::string metrics_jsonl(const RunManifest& m) {
  std::string out;
  for (const auto& r : m.records) {
    nlohmann::json j = to_json(r);
    j["schema"] = kMetricsSchema;
    j["method"] = m.method;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string metrics_csv(const RunManifest& m) {
  std::string out = "method,step,rel,gen,loc,op,ppl\n";
  char buf[256];
  for (const auto& r : m.records) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.method.c_str(),
                  r.step, r.rel, r.gen, r.loc, r.op, r.ppl);
    out += buf;
  }
  return out;
}

}  // namespace repair
