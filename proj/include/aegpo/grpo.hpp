#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aegpo/allocation.hpp"
#include "aegpo/autodiff.hpp"
#include "aegpo/denoiser.hpp"
#include "aegpo/entropy.hpp"
#include "aegpo/exploration.hpp"
#include "aegpo/rewards.hpp"

namespace aegpo {

/// Optimization knobs. Defaults are the reference hyperparameters; desk-scale runs override
/// learning_rate, max_grad_norm and clip_range through the run config.
struct TrainConfig {
  double learning_rate = 1e-5;
  double weight_decay = 1e-4;
  double clip_range = 1e-4;
  double adv_clip_max = 5.0;
  double ema_decay = 0.995;
  bool use_ema = true;
  int grad_accum_steps = 12;
  double max_grad_norm = 0.01;
  /// Iterations of uniform allocation before the entropy signal is used.
  int warmup_iters = 20;
  /// Linear learning-rate ramp length in iterations; 0 disables it.
  int lr_warmup_iters = 0;
  int num_generations = 12;
  int k_peaks = 4;
  double eta = 0.3;
  int sampling_steps = 16;
  bool ignore_last_step = true;
  bool init_same_noise = true;
  std::uint64_t seed = 42;

  void validate() const;
};

/// Reward z-scores below this std contribute nothing.
inline constexpr double kStdEpsilon = 1e-8;

struct AdvantageSet {
  std::vector<double> advantages;  // clamped
  std::vector<double> raw;         // before clamping
  std::vector<double> means;       // per reward
  std::vector<double> stds;        // per reward, population
};

/// A_j = sum_k w_k (r_jk - mu_k) / sigma_k, clamped to +-adv_clip_max.
AdvantageSet group_advantages(const RewardMatrix& rewards, double adv_clip_max,
                              std::span<const double> weights = {});
AdvantageSet group_advantages(const RewardMatrix& rewards, const TrainConfig& cfg);

/// Mean over all (leaf, step) terms of -min(rho A, clip(rho, 1-eps, 1+eps) A), rho = exp(log_ratio).
/// log_ratios[j] holds leaf j's trained steps; nodes may be shared between leaves.
Var clipped_objective(Tape& tape, std::span<const double> advantages,
                      const std::vector<std::vector<Var>>& log_ratios, double clip_range);

/// Per-parameter gradient buffers matching a DenoiserParams layout.
struct ParamGradients {
  std::vector<Tensor> tensors;

  static ParamGradients zeros_like(const DenoiserParams& params);
  void add(const ParamGradients& other);
  void scale(double c);
  double global_norm() const;
};

struct UpdateStats {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

/// Global-norm clip, decoupled weight decay and an SGD step; then the EMA update when enabled.
/// Throws if any gradient entry is non-finite, naming the parameter.
UpdateStats apply_update(DenoiserParams& params, const ParamGradients& grads, const TrainConfig& cfg,
                         DenoiserParams* ema);

/// ema <- decay * ema + (1 - decay) * params.
void ema_update(DenoiserParams& ema, const DenoiserParams& params, double decay);

/// kHighOnly, kLowOnly and kRandomHalf train on half of the batch after warmup.
enum class AllocationMode { kAdaptive, kUniform, kHighOnly, kLowOnly, kRandomHalf };
enum class ExplorationMode { kEntropy, kFixed, kIndependent };
enum class BaseEntropyMode { kTeacherForced, kBaseRollout };

AllocationMode parse_allocation_mode(const std::string& s);
const char* allocation_mode_name(AllocationMode m);
const char* exploration_mode_name(ExplorationMode m);
BaseEntropyMode parse_base_entropy_mode(const std::string& s);
const char* base_entropy_mode_name(BaseEntropyMode m);

struct TrainerSetup {
  DenoiserConfig model;
  TrainConfig train;
  AllocationMode allocation = AllocationMode::kAdaptive;
  ExplorationMode exploration = ExplorationMode::kEntropy;
  std::vector<std::size_t> fixed_schedule;
  BaseEntropyMode base_entropy = BaseEntropyMode::kTeacherForced;
  std::vector<RewardSpec> rewards{{"target_match", RewardKind::kTargetMatch, 1.0}};
  int num_workers = 1;

  /// Denoiser config with the train-level eta and sampling_steps applied.
  DenoiserConfig effective_model() const;
  AllocationConfig allocation_config() const;
};

struct PromptMetrics {
  std::int64_t prompt_id = 0;
  double value = 0.0;  // v_i
  std::vector<double> delta_per_step;
  Tier tier = Tier::kUniform;
  int rollouts = 0;
  std::vector<std::size_t> peaks;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double mpd = 0.0;
  double kl_vs_base = 0.0;
};

struct IterationMetrics {
  int iteration = 0;
  bool warmup = false;
  double median = 0.0;
  std::vector<PromptMetrics> prompts;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double kl_vs_base = 0.0;
  double diversity = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  int updates = 0;
  long long rollouts = 0;
  long long forward_steps = 0;
  long long budget_deviation = 0;
  double wall_ms = 0.0;
};

/// Reference-trajectory quantities needed for allocation and logging.
struct ValueProbe {
  SampleValue value;
  EntropyTrajectory current;
  EntropyTrajectory base;
  double kl_vs_base = 0.0;
};

/// Entropy shift and KL-vs-base of one trajectory sampled from `current`.
ValueProbe probe_value(const DenoiserConfig& cfg, const DenoiserParams& base, const PromptSpec& prompt,
                       const Trajectory& traj, BaseEntropyMode mode, std::uint64_t base_seed);

/// Runs the entropy-guided GRPO loop. Owns the current, base, old and EMA parameter copies.
class Trainer {
 public:
  Trainer(TrainerSetup setup, DenoiserParams initial);

  /// One full iteration: snapshot, value probes, allocation, branching rollouts, rewards,
  /// advantages and clipped updates.
  IterationMetrics train_iteration(std::span<const PromptSpec> batch);

  const DenoiserParams& policy() const { return policy_; }
  const DenoiserParams& base() const { return base_; }
  const DenoiserParams& old_policy() const { return old_; }
  const std::optional<DenoiserParams>& ema() const { return ema_; }
  int iteration() const { return iteration_; }
  long long total_rollouts() const { return total_rollouts_; }
  long long total_forward_steps() const { return total_forward_steps_; }
  const TrainerSetup& setup() const { return setup_; }

  void set_policy(DenoiserParams p) { policy_ = std::move(p); }

 private:
  ParamGradients group_gradient(const PromptSpec& prompt, const RolloutTree& tree,
                                const AdvantageSet& adv, double* loss_out) const;

  TrainerSetup setup_;
  DenoiserConfig model_;
  AllocationConfig alloc_;
  DenoiserParams policy_;
  DenoiserParams base_;
  DenoiserParams old_;
  std::optional<DenoiserParams> ema_;
  int iteration_ = 0;
  long long total_rollouts_ = 0;
  long long total_forward_steps_ = 0;
};

/// Mean reward of plain rollouts of `params` over `prompts`, with noise fixed by `seed`.
double evaluate_policy(const DenoiserConfig& cfg, const DenoiserParams& params, std::span<const PromptSpec> prompts,
                       std::span<const RewardSpec> rewards, std::uint64_t seed);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. fn must only write slot i.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace aegpo
