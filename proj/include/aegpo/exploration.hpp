#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "aegpo/denoiser.hpp"
#include "aegpo/entropy.hpp"

namespace aegpo {

/// Branch timesteps in ascending step order (ascending denoising progress).
struct PeakSet {
  std::vector<std::size_t> steps;
};

/// Indices of the k largest Entropy(t) values, excluding the final (untrained) step.
/// Ties go to the earlier step. Result is sorted ascending.
PeakSet detect_peaks(const EntropyTrajectory& traj, std::size_t k);

/// Split arities a_1..a_k whose product is exactly g.
///
/// g's prime factors are merged smallest-first until at most k remain, sorted
/// ascending and padded with 1s: (16,4) -> [2,2,2,2], (12,4) -> [2,2,3,1].
std::vector<std::size_t> plan_arities(std::size_t g, std::size_t k);

/// A contiguous run of denoising steps owned by one branch.
struct TreeNode {
  std::int32_t parent = -1;
  std::size_t start_step = 0;
  std::size_t end_step = 0;
  std::uint64_t seed = 0;
  /// State after each owned step: states[i] is the output of step start_step + i.
  std::vector<Tensor> states;
  std::vector<double> log_probs;
  std::vector<AttentionRecord> attention;
  std::vector<std::int32_t> children;
};

/// Shared-prefix rollout tree. Node 0 is the trunk starting from the shared initial noise.
struct RolloutTree {
  std::vector<TreeNode> nodes;
  std::vector<std::size_t> split_steps;
  std::vector<std::size_t> arities;
  std::vector<Trajectory> leaves;
  /// step_owner[j][s]: node that sampled step s on leaf j's path.
  std::vector<std::vector<std::int32_t>> step_owner;

  /// Denoiser evaluations spent building the tree.
  std::size_t forward_steps() const;
};

/// Tree that forks at `peaks` with arities from plan_arities(g, |peaks|).
/// Every node draws its noise from Rng(Rng::derive(seed, node_id)), so the result does
/// not depend on evaluation order. With no peaks and g > 1 the root forks at step 0
/// into g independent rollouts.
RolloutTree branch_rollout(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                           const Tensor& init_noise, const PeakSet& peaks, std::size_t g, std::uint64_t seed);

/// Same tree construction with externally supplied branch steps (e.g. 0,2,4,8).
RolloutTree fixed_schedule_rollout(const DenoiserConfig& cfg, const DenoiserParams& params,
                                   const PromptSpec& prompt, const Tensor& init_noise,
                                   std::span<const std::size_t> schedule, std::size_t g, std::uint64_t seed);

/// g plain rollouts, each from its own initial noise, wrapped as a tree whose empty
/// root forks at step 0. Leaf j uses noises[j] and the stream Rng::derive(seed, j + 1).
RolloutTree independent_rollouts(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                                 std::span<const Tensor> noises, std::uint64_t seed);

}  // namespace aegpo
