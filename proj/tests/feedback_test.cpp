#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "repair/feedback.hpp"

namespace {

using repair::FailureEntry;
using repair::FeedbackConfig;
using repair::FeedbackPool;
using repair::Matrix;
using repair::ModelConfig;
using repair::ModelState;
using repair::RoutedSample;
using repair::TokenSequence;

ModelState small_model() {
  ModelConfig c;
  c.vocab_size = 16;
  c.hidden_dim = 8;
  c.ffn_dim = 32;
  c.activation_shift = 0.5;
  c.key_gain = 1.0;
  return ModelState::random(c, 3);
}

TEST(Feedback, EvaluateEditOnBaseMatchesGreedyDecode) {
  const ModelState m = small_model();
  const std::vector<repair::ShardState> none;
  const TokenSequence prompt{3, 4, 5};
  const TokenSequence decoded = repair::greedy_decode(m, prompt, 2, m.value);
  auto ev = repair::evaluate_edit(m, none, m.value, 0.0, prompt, decoded);
  EXPECT_TRUE(ev.correct);
  EXPECT_EQ(ev.score, 1.0);
  EXPECT_TRUE(ev.routing.to_main());
  TokenSequence other = decoded;
  other = TokenSequence{static_cast<repair::Token>((decoded[0] + 1) % 16), decoded[1]};
  ev = repair::evaluate_edit(m, none, m.value, 0.0, prompt, other);
  EXPECT_FALSE(ev.correct);
  EXPECT_EQ(ev.score, 0.0);
}

TEST(Feedback, InversePerplexityScore) {
  const ModelState m = small_model();
  const std::vector<repair::ShardState> none;
  const TokenSequence prompt{1, 2};
  const TokenSequence target{7, 9};
  const auto ev = repair::evaluate_edit(m, none, m.value, 0.0, prompt, target,
                                        repair::ScoreMode::kInversePerplexity);
  const double nll = repair::autoreg_ce(m, prompt, target, m.value).value;
  EXPECT_NEAR(ev.score, std::exp(-nll / 2.0), 1e-12);
  EXPECT_GT(ev.score, 0.0);
  EXPECT_LE(ev.score, 1.0);
}

TEST(Feedback, EvaluateEditRoutesToEditedShard) {
  const ModelState m = small_model();
  auto shards = repair::init_shards(m.value, 2, 1.0, 0);
  const TokenSequence prompt{3, 4, 5};
  const TokenSequence target{11, 12};
  for (int it = 0; it < 300; ++it) {
    const auto lg = repair::autoreg_ce(m, prompt, target, shards[1].weights);
    repair::masked_update(shards[1], lg.grad, 0.5);
  }
  const auto ev = repair::evaluate_edit(m, shards, m.value, 1e-9, prompt, target);
  ASSERT_FALSE(ev.routing.to_main());
  EXPECT_EQ(*ev.routing.shard, 1u);
  EXPECT_TRUE(ev.correct);
  const double huge = 1e9;
  EXPECT_TRUE(repair::evaluate_edit(m, shards, m.value, huge, prompt, target).routing.to_main());
}

TEST(Feedback, ConfigValidation) {
  FeedbackConfig c;
  c.tau_prune = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.tau_correct = 1.5;
  EXPECT_THROW(FeedbackPool(c, 2), std::invalid_argument);
}

TEST(Feedback, PoolAcceptsOnlyFailures) {
  FeedbackPool pool(FeedbackConfig{}, 2);
  EXPECT_THROW(pool.add_failure({1, 0, 0.9}), std::invalid_argument);
  pool.add_failure({1, 0, 0.85});
  EXPECT_TRUE(pool.contains(1));
  pool.clear(1);
  EXPECT_TRUE(pool.empty());
}

TEST(Feedback, ErrorRatePerShard) {
  FeedbackPool pool(FeedbackConfig{}, 3);
  const std::vector<RoutedSample> routed{
      {0, 0, 1.0}, {1, 0, 0.0}, {2, 0, 0.5}, {3, 1, 1.0}, {4, std::nullopt, 0.0}};
  const auto rates = repair::error_rates(pool, 3, routed);
  EXPECT_NEAR(rates[0], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(rates[1], 0.0);
  EXPECT_EQ(rates[2], 0.0);
}

TEST(Feedback, RetriggerConditions) {
  FeedbackConfig cfg;
  cfg.tau_E = 2;
  cfg.max_iter = 1;
  FeedbackPool pool(cfg, 2);
  const std::vector<double> low{0.1, 0.2};
  const std::vector<double> high{0.1, 0.31};
  EXPECT_FALSE(repair::should_retrigger(pool, low));
  EXPECT_TRUE(repair::should_retrigger(pool, high));
  for (repair::SampleId i = 0; i < 3; ++i) pool.add_failure({i, 0, 0.0});
  EXPECT_TRUE(repair::should_retrigger(pool, low));
  pool.record_retrigger(0);
  EXPECT_TRUE(pool.budget_exhausted());
  EXPECT_FALSE(repair::should_retrigger(pool, high));
  const auto out = pool.expel_all();
  EXPECT_EQ(out.size(), 3u);
  EXPECT_EQ(pool.expelled().size(), 3u);
  EXPECT_TRUE(pool.empty());
}

TEST(Feedback, ReinitializeKeepsDeltaInsideNewMask) {
  std::mt19937_64 rng(1);
  Matrix base(20, 10, 0.5);
  auto shards = repair::init_shards(base, 1, 0.3, 0);
  shards[0].assigned = {1, 2};
  repair::reinitialize_shard(shards[0], base, 0.3, 0.01, rng);
  EXPECT_TRUE(shards[0].assigned.empty());
  double moved = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double d = shards[0].weights.values()[i] - base.values()[i];
    if (shards[0].mask.values()[i] == 0.0) {
      EXPECT_EQ(d, 0.0);
    }
    moved += std::abs(d);
  }
  EXPECT_GT(moved, 0.0);
}

TEST(Feedback, RetriggerPrunesWorstShardAndRetrainsPoolPlusHeld) {
  Matrix base(4, 3);
  auto shards = repair::init_shards(base, 3, 0.5, 0);
  shards[1].assigned = {10, 11};
  shards[2].assigned = {20};
  FeedbackPool pool(FeedbackConfig{}, 3);
  pool.add_failure({11, 1, 0.0});
  pool.add_failure({20, 2, 0.0});
  const std::vector<RoutedSample> routed{{10, 1, 0.0}, {11, 1, 0.0}, {20, 2, 1.0}};
  std::vector<repair::SampleId> retrained;
  std::mt19937_64 rng(0);
  const auto rep = repair::retrigger(
      pool, shards, base, 0.5, rng, routed,
      [&](const std::vector<repair::SampleId>& ids) { retrained = ids; },
      [](repair::SampleId id) { return FailureEntry{id, 1, id == 11 ? 1.0 : 0.0}; },
      [] { return std::vector<RoutedSample>{}; });
  EXPECT_EQ(rep.pruned_shard, 1u);
  EXPECT_EQ(retrained, (std::vector<repair::SampleId>{10, 11, 20}));
  EXPECT_EQ(rep.retrain_size, 3u);
  EXPECT_EQ(rep.cleared, 1u);
  EXPECT_FALSE(pool.contains(11));
  EXPECT_TRUE(pool.contains(20));
  EXPECT_EQ(rep.ordinal, 1u);
  EXPECT_EQ(pool.retrigger_count()[1], 1u);
}

TEST(Feedback, FiniteTimeBoundValues) {
  EXPECT_EQ(repair::finite_time_bound(0.9, 0.5, 0.1), 4u);
  EXPECT_EQ(repair::finite_time_bound(0.3, 0.5, 0.1), 0u);
  EXPECT_EQ(repair::finite_time_bound(0.55, 0.5, 0.1), 1u);
  EXPECT_EQ(repair::finite_time_bound(1.0, 0.3, 0.25), 3u);
  EXPECT_THROW(repair::finite_time_bound(1.0, 0.3, 0.0), std::invalid_argument);
}

TEST(Feedback, DeltaProcessHitsWithinBound) {
  for (double r0 : {0.4, 0.75, 1.0}) {
    for (double delta : {0.05, 0.2}) {
      const auto n_star = repair::finite_time_bound(r0, 0.3, delta);
      const auto p = repair::simulate_delta_process(r0, 0.3, delta, 0.1, n_star + 5, 42);
      EXPECT_TRUE(p.hit);
      EXPECT_LE(p.hitting_step, n_star);
      const auto exact = repair::simulate_delta_process(r0, 0.3, delta, 0.0, n_star + 5, 0);
      EXPECT_EQ(exact.hitting_step, n_star);
    }
  }
}

}  // namespace
