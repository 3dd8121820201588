#pragma once

// Reliability, generalization, locality, their geometric mean, and
// perplexity, all measured through routing.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <json.hpp>

#include "repair/corpus.hpp"
#include "repair/feedback.hpp"
#include "repair/side_memory.hpp"
#include "repair/toy_lm.hpp"

namespace repair {

struct MetricsRecord {
  std::size_t step = 0;
  double rel = 0.0;
  double gen = 0.0;
  double loc = 0.0;
  double op = 0.0;
  double ppl = 0.0;
};

inline double overall_performance(double rel, double gen, double loc) {
  return std::cbrt(rel * gen * loc);
}

inline MetricsRecord make_record(std::size_t step, double rel, double gen, double loc,
                                 double ppl) {
  return {step, rel, gen, loc, overall_performance(rel, gen, loc), ppl};
}

inline nlohmann::json to_json(const MetricsRecord& r) {
  return {{"step", r.step}, {"rel", r.rel}, {"gen", r.gen},
          {"loc", r.loc},   {"op", r.op},   {"ppl", r.ppl}};
}

/// Routed memory for one prompt, read-only over the shard set.
struct RoutedModel {
  const ModelState& model;
  std::span<const ShardState> shards;
  const Matrix& base;
  double epsilon;

  const Matrix& value_for(std::span<const double> activation) const {
    if (shards.empty()) return base;
    return routed_value(route(activation, shards, base, epsilon), shards, base);
  }
  const Matrix& value_for(const TokenSequence& prompt) const {
    return value_for(activation_tap(model, prompt).values());
  }
  TokenSequence decode(const TokenSequence& prompt, std::size_t max_len) const {
    return greedy_decode(model, prompt, max_len, value_for(prompt));
  }
};

/// exp of the mean per-token negative log-likelihood of each continuation
/// given its context, with the memory chosen by routing on the context.
inline double compute_ppl(const RoutedModel& rm,
                          std::span<const std::pair<TokenSequence, TokenSequence>> pairs) {
  if (pairs.empty()) throw std::invalid_argument("compute_ppl: no continuations");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& [context, continuation] : pairs) {
    if (continuation.empty()) throw std::invalid_argument("compute_ppl: empty continuation");
    const auto s = continuation_nll(rm.model, context, continuation, rm.value_for(context));
    nll += s.nll;
    tokens += s.tokens;
  }
  return std::exp(nll / static_cast<double>(tokens));
}

/// Rel over edit prompts, Gen over every rephrase, Loc against the frozen
/// pre-edit references, and PPL of the edit targets.
inline MetricsRecord compute_metrics(const RoutedModel& rm, std::span<const EditExample> examples,
                                     std::size_t step) {
  if (examples.empty()) throw std::invalid_argument("compute_metrics: no examples");
  std::size_t rel = 0, gen = 0, gen_total = 0, loc = 0;
  std::vector<std::pair<TokenSequence, TokenSequence>> pairs;
  for (const auto& ex : examples) {
    const std::size_t len = ex.edit_target.size();
    if (rm.decode(ex.edit_prompt, len) == ex.edit_target) ++rel;
    for (const auto& r : ex.rephrases) {
      ++gen_total;
      if (rm.decode(r, len) == ex.edit_target) ++gen;
    }
    if (rm.decode(ex.locality_prompt, ex.locality_reference.size()) == ex.locality_reference) {
      ++loc;
    }
    pairs.emplace_back(ex.edit_prompt, ex.edit_target);
  }
  const double n = static_cast<double>(examples.size());
  const double g = gen_total == 0 ? 0.0 : static_cast<double>(gen) / static_cast<double>(gen_total);
  return make_record(step, static_cast<double>(rel) / n, g, static_cast<double>(loc) / n,
                     compute_ppl(rm, pairs));
}

}  // namespace repair
