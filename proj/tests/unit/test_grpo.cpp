#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "aegpo/grpo.hpp"
#include "oracles.hpp"

using namespace aegpo;

namespace {

RewardMatrix column(const std::vector<double>& v) {
  RewardMatrix m;
  for (double x : v) m.push_back({x});
  return m;
}

Var single_term_loss(Tape& tape, double log_ratio, double adv, double eps) {
  const std::vector<std::vector<Var>> lr{{tape.constant(Tensor::scalar(log_ratio))}};
  const std::vector<double> a{adv};
  return clipped_objective(tape, a, lr, eps);
}

TrainerSetup small_setup() {
  TrainerSetup s;
  s.train.learning_rate = 0.02;
  s.train.max_grad_norm = 1.0;
  s.train.clip_range = 0.2;
  s.train.grad_accum_steps = 2;
  s.train.num_generations = 4;
  s.train.k_peaks = 2;
  s.train.warmup_iters = 1;
  return s;
}

std::vector<PromptSpec> prompts(const DenoiserConfig& cfg, int n) {
  std::vector<PromptSpec> out;
  for (int i = 0; i < n; ++i) out.push_back(make_prompt(cfg, i));
  return out;
}

}  // namespace

TEST(Advantages, ReferenceExample) {
  const AdvantageSet a = group_advantages(column({2.0, 4.0, 6.0}), 5.0);
  const double sd = std::sqrt(8.0 / 3.0);
  EXPECT_NEAR(a.advantages[0], -2.0 / sd, 1e-12);
  EXPECT_NEAR(a.advantages[1], 0.0, 1e-12);
  EXPECT_NEAR(a.advantages[2], 2.0 / sd, 1e-12);
  EXPECT_NEAR(a.advantages[2], 1.2247, 1e-4);
  EXPECT_NEAR(a.stds[0], sd, 1e-15);
  EXPECT_NEAR(a.means[0], 4.0, 1e-15);
}

TEST(Advantages, DuplicateColumnsDoubleThenClamp) {
  RewardMatrix m = column({2.0, 4.0, 6.0});
  for (auto& row : m) row.push_back(row[0]);
  const AdvantageSet one = group_advantages(column({2.0, 4.0, 6.0}), 5.0);
  const AdvantageSet two = group_advantages(m, 5.0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(two.advantages[j], 2.0 * one.advantages[j], 1e-12);
  const AdvantageSet clamped = group_advantages(m, 2.0);
  EXPECT_EQ(clamped.advantages[0], -2.0);
  EXPECT_EQ(clamped.advantages[2], 2.0);
  EXPECT_NEAR(clamped.raw[2], 2.0 * one.advantages[2], 1e-12);
}

TEST(Advantages, ConstantColumnContributesZero) {
  RewardMatrix m = column({1.0, 5.0, 3.0});
  for (auto& row : m) row.push_back(7.0);
  const AdvantageSet a = group_advantages(m, 5.0);
  const AdvantageSet b = group_advantages(column({1.0, 5.0, 3.0}), 5.0);
  EXPECT_EQ(a.advantages, b.advantages);
  EXPECT_EQ(group_advantages(column({3.0, 3.0}), 5.0).advantages, (std::vector<double>{0.0, 0.0}));
}

TEST(Advantages, ZeroMeanUnitStdBeforeClamping) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> r(2 + rng.below(20));
    for (double& x : r) x = rng.normal();
    const AdvantageSet a = group_advantages(column(r), 1e9);
    EXPECT_NEAR(oracle::mean(a.raw), 0.0, 1e-9);
    EXPECT_NEAR(oracle::population_std(a.raw), 1.0, 1e-9);
  }
}

TEST(Advantages, WeightsScaleContributions) {
  RewardMatrix m = column({1.0, 2.0});
  for (auto& row : m) row.push_back(-row[0]);
  const std::vector<double> w{2.0, 0.5};
  const AdvantageSet a = group_advantages(m, 10.0, w);
  EXPECT_NEAR(a.advantages[1], 2.0 - 0.5, 1e-12);
}

TEST(Advantages, RejectsSmallOrRaggedGroups) {
  EXPECT_THROW(group_advantages(column({1.0}), 5.0), std::invalid_argument);
  EXPECT_THROW(group_advantages(RewardMatrix{{1.0, 2.0}, {1.0}}, 5.0), std::invalid_argument);
}

TEST(Objective, UnitRatioGivesNegativeMeanAdvantage) {
  Tape tape;
  const std::vector<double> adv{0.5, -1.5, 2.0};
  std::vector<std::vector<Var>> lr(3);
  for (auto& leaf : lr) {
    for (int s = 0; s < 4; ++s) leaf.push_back(tape.constant(Tensor::scalar(0.0)));
  }
  EXPECT_DOUBLE_EQ(clipped_objective(tape, adv, lr, 1e-4).value().item(), -oracle::mean(adv));
}

TEST(Objective, ClipDefinitionExample) {
  Tape tape;
  const double rho = 1.5;
  const Var loss = single_term_loss(tape, std::log(rho), 1.0, 0.2);
  EXPECT_NEAR(loss.value().item(), -1.2, 1e-12);
}

TEST(Objective, MatchesMinOfSurrogatesOracle) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double lr = rng.uniform() * 1.2 - 0.6;
    const double a = rng.normal() * 2.0;
    const double eps = 0.01 + 0.4 * rng.uniform();
    const double rho = std::exp(lr);
    const double expected = -std::min(rho * a, std::clamp(rho, 1.0 - eps, 1.0 + eps) * a);
    Tape tape;
    EXPECT_EQ(single_term_loss(tape, lr, a, eps).value().item(), expected);
  }
}

TEST(Objective, UnitRatioGradientIsPolicyGradient) {
  // d/dtheta of -mean(A rho) at rho = 1 equals -mean(A dlogp/dtheta) even with a tiny clip range.
  Tape tape;
  Var theta = tape.parameter(Tensor::from_rows({{0.3, -0.2}}));
  const double old0 = 0.3, old1 = -0.2;
  const std::vector<std::vector<Var>> lr{{add_scalar(pick(theta, 0, 0), -old0)}, {add_scalar(pick(theta, 0, 1), -old1)}};
  const std::vector<double> adv{1.0, -2.0};
  tape.backward(clipped_objective(tape, adv, lr, 1e-4));
  EXPECT_DOUBLE_EQ(tape.grad(theta).data[0], -0.5);
  EXPECT_DOUBLE_EQ(tape.grad(theta).data[1], 1.0);
}

TEST(Objective, NonFiniteRatioFailsWithDiagnostics) {
  Tape tape;
  try {
    single_term_loss(tape, std::numeric_limits<double>::quiet_NaN(), 1.0, 0.2);
    FAIL() << "expected a throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("leaf 0"), std::string::npos);
  }
}

TEST(Update, ZeroGradientKeepsParamsAndDriftsEma) {
  DenoiserConfig cfg;
  DenoiserParams p = init_params(cfg, 1);
  const DenoiserParams before = p;
  DenoiserParams ema = p;
  for (double& v : ema.tensors[0].data) v += 1.0;
  TrainConfig tc;
  tc.weight_decay = 0.0;
  apply_update(p, ParamGradients::zeros_like(p), tc, &ema);
  EXPECT_EQ(p.tensors[3].data, before.tensors[3].data);
  for (std::size_t i = 0; i < ema.tensors[0].data.size(); ++i) {
    EXPECT_NEAR(ema.tensors[0].data[i] - p.tensors[0].data[i], 0.995, 1e-12);
  }
}

TEST(Update, GlobalNormIsClippedToMax) {
  DenoiserConfig cfg;
  DenoiserParams p = init_params(cfg, 1);
  const DenoiserParams before = p;
  ParamGradients g = ParamGradients::zeros_like(p);
  g.tensors[0].data[0] = 0.6;
  g.tensors[5].data[3] = 0.8;
  TrainConfig tc;
  tc.weight_decay = 0.0;
  tc.learning_rate = 1.0;
  const UpdateStats st = apply_update(p, g, tc, nullptr);
  EXPECT_NEAR(st.grad_norm, 1.0, 1e-15);
  EXPECT_NEAR(st.clip_scale, 0.01, 1e-15);
  EXPECT_NEAR(before.tensors[0].data[0] - p.tensors[0].data[0], 0.006, 1e-15);
  EXPECT_NEAR(before.tensors[5].data[3] - p.tensors[5].data[3], 0.008, 1e-15);
}

TEST(Update, WeightDecayIsDecoupled) {
  DenoiserConfig cfg;
  DenoiserParams p = init_params(cfg, 1);
  const double x = p.tensors[2].data[0];
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.weight_decay = 0.5;
  apply_update(p, ParamGradients::zeros_like(p), tc, nullptr);
  EXPECT_DOUBLE_EQ(p.tensors[2].data[0], x * (1.0 - 0.05));
}

TEST(Update, AccumulatedMicroBatchesEqualCombinedBatch) {
  DenoiserConfig cfg;
  const DenoiserParams start = init_params(cfg, 1);
  Rng rng(3);
  std::vector<ParamGradients> parts;
  for (int k = 0; k < 4; ++k) {
    ParamGradients g = ParamGradients::zeros_like(start);
    for (auto& t : g.tensors) {
      for (double& v : t.data) v = 0.01 * rng.normal();
    }
    parts.push_back(std::move(g));
  }
  TrainConfig tc;
  tc.learning_rate = 0.05;
  tc.max_grad_norm = 100.0;
  // Two micro-batches of two, accumulated.
  ParamGradients acc = ParamGradients::zeros_like(start);
  for (int half = 0; half < 2; ++half) {
    ParamGradients micro = ParamGradients::zeros_like(start);
    micro.add(parts[2 * half]);
    micro.add(parts[2 * half + 1]);
    micro.scale(0.5);
    acc.add(micro);
  }
  acc.scale(0.5);
  ParamGradients combined = ParamGradients::zeros_like(start);
  for (const auto& g : parts) combined.add(g);
  combined.scale(0.25);
  DenoiserParams a = start, b = start;
  apply_update(a, acc, tc, nullptr);
  apply_update(b, combined, tc, nullptr);
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    for (std::size_t e = 0; e < a.tensors[i].data.size(); ++e) {
      EXPECT_NEAR(a.tensors[i].data[e], b.tensors[i].data[e], 1e-12);
    }
  }
}

TEST(Update, NonFiniteGradientNamesParameter) {
  DenoiserConfig cfg;
  DenoiserParams p = init_params(cfg, 1);
  ParamGradients g = ParamGradients::zeros_like(p);
  g.tensors[p.index(1, DenoiserParams::kWv)].data[2] = std::numeric_limits<double>::infinity();
  try {
    apply_update(p, g, TrainConfig{}, nullptr);
    FAIL() << "expected a throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("layers.1.w_v"), std::string::npos);
  }
}

TEST(Update, EmaConvergesGeometrically) {
  DenoiserConfig cfg;
  const DenoiserParams target = init_params(cfg, 1);
  DenoiserParams ema = init_params(cfg, 2);
  const double d0 = ema.tensors[1].data[0] - target.tensors[1].data[0];
  for (int i = 0; i < 10; ++i) ema_update(ema, target, 0.995);
  EXPECT_NEAR(ema.tensors[1].data[0] - target.tensors[1].data[0], d0 * std::pow(0.995, 10), 1e-12);
}

TEST(TrainConfig, InvariantsAreEnforced) {
  TrainConfig tc;
  EXPECT_NO_THROW(tc.validate());
  tc.clip_range = 0.0;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.ema_decay = 1.0;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.adv_clip_max = -1.0;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
}

TEST(Trainer, WarmupIterationIsUniform) {
  const TrainerSetup s = small_setup();
  const DenoiserConfig cfg = s.effective_model();
  Trainer t(s, init_params(cfg, 1));
  const auto batch = prompts(cfg, 4);
  const IterationMetrics m = t.train_iteration(batch);
  EXPECT_TRUE(m.warmup);
  for (const auto& p : m.prompts) {
    EXPECT_EQ(p.rollouts, 4);
    EXPECT_EQ(p.tier, Tier::kUniform);
  }
  EXPECT_EQ(m.rollouts, 16);
  EXPECT_EQ(m.budget_deviation, 0);
  EXPECT_EQ(m.updates, 2);
}

TEST(Trainer, KlAndDeltaEntropyStartAtZero) {
  const TrainerSetup s = small_setup();
  const DenoiserConfig cfg = s.effective_model();
  Trainer t(s, init_params(cfg, 1));
  const IterationMetrics m = t.train_iteration(prompts(cfg, 2));
  EXPECT_EQ(m.kl_vs_base, 0.0);
  for (const auto& p : m.prompts) EXPECT_EQ(p.value, 0.0);
}

TEST(Trainer, FirstUpdateLossIsMinusMeanAdvantageAtUnitRatio) {
  TrainerSetup s = small_setup();
  s.train.grad_accum_steps = 8;
  const DenoiserConfig cfg = s.effective_model();
  Trainer t(s, init_params(cfg, 1));
  // With one window the loss is evaluated at theta = theta_old, so it equals -mean(A) = 0 per group.
  const IterationMetrics m = t.train_iteration(prompts(cfg, 3));
  EXPECT_NEAR(m.loss, 0.0, 1e-12);
  EXPECT_GT(m.grad_norm, 0.0);
}

TEST(Trainer, AdaptiveAllocationAfterWarmup) {
  const TrainerSetup s = small_setup();
  const DenoiserConfig cfg = s.effective_model();
  Trainer t(s, init_params(cfg, 1));
  const auto batch = prompts(cfg, 4);
  t.train_iteration(batch);
  const IterationMetrics m = t.train_iteration(batch);
  EXPECT_FALSE(m.warmup);
  int high = 0;
  for (const auto& p : m.prompts) {
    if (p.tier == Tier::kHigh) {
      ++high;
      EXPECT_EQ(p.rollouts, 5);
    }
    EXPECT_EQ(p.peaks.size(), p.rollouts > 1 ? 2u : 0u);
  }
  EXPECT_EQ(high, 2);
  EXPECT_EQ(m.rollouts, 16);
}

TEST(Trainer, SinglePromptBatchUsesAverageBudget) {
  const TrainerSetup s = small_setup();
  const DenoiserConfig cfg = s.effective_model();
  Trainer t(s, init_params(cfg, 1));
  const auto batch = prompts(cfg, 1);
  t.train_iteration(batch);
  const IterationMetrics m = t.train_iteration(batch);
  EXPECT_EQ(m.prompts[0].rollouts, 4);
}

TEST(Trainer, SeededRunsAreBitIdentical) {
  TrainerSetup s = small_setup();
  s.num_workers = 3;
  const DenoiserConfig cfg = s.effective_model();
  Trainer a(s, init_params(cfg, 1));
  s.num_workers = 1;
  Trainer b(s, init_params(cfg, 1));
  const auto batch = prompts(cfg, 4);
  for (int i = 0; i < 3; ++i) {
    const IterationMetrics ma = a.train_iteration(batch);
    const IterationMetrics mb = b.train_iteration(batch);
    EXPECT_EQ(ma.reward_mean, mb.reward_mean);
    EXPECT_EQ(ma.loss, mb.loss);
    EXPECT_EQ(ma.kl_vs_base, mb.kl_vs_base);
  }
  for (std::size_t i = 0; i < a.policy().tensors.size(); ++i) {
    EXPECT_EQ(a.policy().tensors[i].data, b.policy().tensors[i].data);
  }
}

TEST(Trainer, StratifiedModesSkipHalfAfterWarmup) {
  TrainerSetup s = small_setup();
  s.allocation = AllocationMode::kRandomHalf;
  const DenoiserConfig cfg = s.effective_model();
  Trainer t(s, init_params(cfg, 1));
  const auto batch = prompts(cfg, 4);
  t.train_iteration(batch);
  const IterationMetrics m = t.train_iteration(batch);
  int skipped = 0;
  for (const auto& p : m.prompts) skipped += p.tier == Tier::kSkipped;
  EXPECT_EQ(skipped, 2);
  EXPECT_EQ(m.rollouts, 8);
}

TEST(Trainer, BaseAndOldPolicyRoles) {
  const TrainerSetup s = small_setup();
  const DenoiserConfig cfg = s.effective_model();
  const DenoiserParams init = init_params(cfg, 1);
  Trainer t(s, init);
  t.train_iteration(prompts(cfg, 2));
  EXPECT_EQ(t.base().tensors[1].data, init.tensors[1].data);
  EXPECT_EQ(t.old_policy().tensors[1].data, init.tensors[1].data);
  EXPECT_NE(t.policy().tensors[1].data, init.tensors[1].data);
  ASSERT_TRUE(t.ema().has_value());
  EXPECT_NE(t.ema()->tensors[1].data, init.tensors[1].data);
}

TEST(ParallelFor, RethrowsWorkerErrors) {
  EXPECT_THROW(parallel_for(8, 3,
                            [](std::size_t i) {
                              if (i == 5) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
  std::vector<int> hit(10, 0);
  parallel_for(10, 4, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 10);
}
