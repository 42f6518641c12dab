#include <gtest/gtest.h>

#include <cmath>

#include "aegpo/allocation.hpp"
#include "aegpo/entropy.hpp"
#include "oracles.hpp"

using namespace aegpo;

namespace {

AttentionRecord record_of(std::vector<Tensor> maps, std::vector<std::size_t> layers = {}) {
  AttentionRecord r;
  if (layers.empty()) {
    for (std::size_t l = 0; l < maps.size(); ++l) layers.push_back(l);
  }
  r.maps = std::move(maps);
  r.selected_layers = std::move(layers);
  return r;
}

std::vector<SampleValue> values_of(const std::vector<double>& v) {
  std::vector<SampleValue> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back({static_cast<std::int64_t>(i), v[i], {}});
  return out;
}

}  // namespace

TEST(Entropy, UniformAttentionIsLog2OfTokens) {
  const Tensor u = Tensor::matrix(16, 6, 1.0 / 6.0);
  EXPECT_NEAR(entropy_t(record_of({u, u, u})), std::log2(6.0), 1e-9);
}

TEST(Entropy, OneHotAttentionIsZero) {
  Tensor m = Tensor::matrix(4, 6);
  for (std::size_t i = 0; i < 4; ++i) m.at(i, i) = 1.0;
  EXPECT_EQ(entropy_t(record_of({m})), 0.0);
}

TEST(Entropy, MatchesPerRowOracle) {
  Rng rng(1);
  const Tensor a = oracle::random_stochastic(5, 4, rng);
  const Tensor b = oracle::random_stochastic(5, 4, rng);
  double expected = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> row(4);
    for (std::size_t j = 0; j < 4; ++j) row[j] = 0.5 * (a.at(i, j) + b.at(i, j));
    expected += oracle::entropy_bits(row);
  }
  EXPECT_NEAR(entropy_t(record_of({a, b})), expected / 5.0, 1e-12);
}

TEST(Entropy, OnlySelectedLayersAreAveraged) {
  Rng rng(2);
  const Tensor a = oracle::random_stochastic(3, 4, rng);
  const Tensor junk = Tensor::matrix(3, 4, 1.0 / 4.0);
  EXPECT_NEAR(entropy_t(record_of({junk, a, junk}, {1})), entropy_t(record_of({a})), 1e-15);
}

TEST(Entropy, FeatureProbRenormalizesRows) {
  const Tensor m = Tensor::from_rows({{2.0, 2.0}, {1.0, 3.0}});
  const Tensor p = feature_prob(record_of({m}));
  EXPECT_DOUBLE_EQ(p.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p.at(1, 1), 0.75);
}

TEST(Entropy, EmptySelectionOrZeroRowThrows) {
  AttentionRecord none;
  none.maps = {Tensor::matrix(2, 2, 0.5)};
  EXPECT_THROW(feature_prob(none), std::invalid_argument);
  none.selected_layers = {3};
  EXPECT_THROW(feature_prob(none), std::out_of_range);
  EXPECT_THROW(feature_prob(record_of({Tensor::matrix(2, 2, 0.0)})), std::invalid_argument);
}

TEST(Entropy, DeltaOfIdenticalTrajectoriesIsZero) {
  const EntropyTrajectory a{{1.0, 2.0, 0.5}};
  const SampleValue v = delta_entropy(a, a, 3);
  EXPECT_EQ(v.delta_entropy, 0.0);
  EXPECT_EQ(v.prompt_id, 3);
}

TEST(Entropy, DeltaIsMeanAbsoluteDifference) {
  const SampleValue v = delta_entropy({{1.0, 2.0, 0.5}}, {{1.5, 1.0, 0.5}});
  EXPECT_EQ(v.per_step, (std::vector<double>{0.5, 1.0, 0.0}));
  EXPECT_DOUBLE_EQ(v.delta_entropy, 0.5);
  EXPECT_THROW(delta_entropy({{1.0}}, {{1.0, 2.0}}), std::invalid_argument);
}

TEST(Entropy, RolloutEntropiesStayWithinBounds) {
  DenoiserConfig cfg;
  const DenoiserParams p = init_params(cfg, 3);
  const double hi = std::log2(static_cast<double>(cfg.num_tokens));
  for (int i = 0; i < 10; ++i) {
    Rng rng(Rng::derive(4, i));
    const Trajectory t = rollout(cfg, p, make_prompt(cfg, i), sample_noise(cfg, rng), rng);
    for (double e : entropy_trajectory(t).values) {
      EXPECT_GE(e, 0.0);
      EXPECT_LE(e, hi + 1e-12);
    }
  }
}

TEST(Allocation, DefaultTiersAreEightAndSixteen) {
  const AllocationConfig c = AllocationConfig::from_average(12);
  EXPECT_EQ(c.r_low, 8);
  EXPECT_EQ(c.r_high, 16);
  EXPECT_EQ(c.warmup_iters, 20);
}

TEST(Allocation, InvalidTiersAreRejected) {
  AllocationConfig c;
  c.r_high = 15;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Allocation, MedianSplitGivesHighAboveMedian) {
  const auto v = values_of({0.1, 0.9, 0.5, 0.3});
  const BudgetAssignment b = allocate(v, AllocationConfig{}, 25);
  EXPECT_DOUBLE_EQ(b.median, 0.4);
  EXPECT_EQ(b.rollouts, (std::vector<int>{8, 16, 16, 8}));
  EXPECT_EQ(b.tiers[1], Tier::kHigh);
  EXPECT_EQ(b.tiers[0], Tier::kLow);
  EXPECT_FALSE(b.warmup);
}

TEST(Allocation, WarmupIsUniform) {
  const BudgetAssignment b = allocate(values_of({0.1, 0.9, 0.5, 0.3}), AllocationConfig{}, 19);
  EXPECT_TRUE(b.warmup);
  EXPECT_EQ(b.rollouts, (std::vector<int>(4, 12)));
  EXPECT_EQ(b.tiers[0], Tier::kUniform);
}

TEST(Allocation, DegenerateBatchesFallBackToAverage) {
  EXPECT_EQ(allocate(values_of({0.7}), AllocationConfig{}, 50).rollouts, (std::vector<int>{12}));
  EXPECT_EQ(allocate(values_of({0.2, 0.2, 0.2, 0.2}), AllocationConfig{}, 50).rollouts, (std::vector<int>(4, 12)));
}

TEST(Allocation, TiesAtTheMedianStillConserveBudget) {
  const BudgetAssignment b = allocate(values_of({0.5, 0.5, 0.5, 0.1}), AllocationConfig{}, 50);
  EXPECT_EQ(b.total(), 48);
  EXPECT_EQ(b.rollouts, (std::vector<int>{16, 16, 8, 8}));
}

TEST(Allocation, EvenBatchesConserveBudget) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 2 * (1 + rng.below(16));
    std::vector<double> v(b);
    for (double& x : v) x = std::floor(rng.uniform() * 5.0) / 5.0;  // frequent ties
    EXPECT_EQ(allocate(values_of(v), AllocationConfig{}, 30).total(), static_cast<long long>(b) * 12);
  }
}

TEST(Allocation, StratifiedKeepsOneHalf) {
  const auto v = values_of({0.1, 0.9, 0.5, 0.3});
  const BudgetAssignment hi = allocate_stratified(v, 12, true);
  EXPECT_EQ(hi.rollouts, (std::vector<int>{0, 12, 12, 0}));
  EXPECT_EQ(hi.tiers[0], Tier::kSkipped);
  const BudgetAssignment lo = allocate_stratified(v, 12, false);
  EXPECT_EQ(lo.rollouts, (std::vector<int>{12, 0, 0, 12}));
}

TEST(Allocation, MedianOfOddAndEven) {
  const std::vector<double> odd{3.0, 1.0, 2.0};
  const std::vector<double> even{4.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(median_of(odd), 2.0);
  EXPECT_EQ(median_of(even), 2.5);
  EXPECT_THROW(median_of(std::vector<double>{}), std::invalid_argument);
}
