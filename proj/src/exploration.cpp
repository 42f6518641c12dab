#include "aegpo/exploration.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace aegpo {

PeakSet detect_peaks(const EntropyTrajectory& traj, std::size_t k) {
  const std::size_t steps = traj.values.size();
  if (k < 1 || k >= steps) {
    throw std::invalid_argument("detect_peaks: k=" + std::to_string(k) + " must lie in [1, " +
                                std::to_string(steps) + ")");
  }
  // The final step is deterministic and never trained, so it cannot host a branch.
  std::vector<std::size_t> order(steps - 1);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return traj.values[a] > traj.values[b]; });
  PeakSet peaks;
  peaks.steps.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(peaks.steps.begin(), peaks.steps.end());
  return peaks;
}

std::vector<std::size_t> plan_arities(std::size_t g, std::size_t k) {
  if (g < 1) throw std::invalid_argument("plan_arities: leaf budget must be >= 1");
  if (k < 1) throw std::invalid_argument("plan_arities: need at least one split");
  std::vector<std::size_t> factors;
  std::size_t rest = g;
  for (std::size_t p = 2; p * p <= rest; ++p) {
    while (rest % p == 0) {
      factors.push_back(p);
      rest /= p;
    }
  }
  if (rest > 1) factors.push_back(rest);
  std::sort(factors.begin(), factors.end());
  while (factors.size() > k) {
    const std::size_t merged = factors[0] * factors[1];
    factors.erase(factors.begin(), factors.begin() + 2);
    factors.insert(std::upper_bound(factors.begin(), factors.end(), merged), merged);
  }
  factors.resize(k, 1);
  return factors;
}

std::size_t RolloutTree::forward_steps() const {
  std::size_t total = 0;
  for (const auto& n : nodes) total += n.end_step - n.start_step;
  return total;
}

namespace {

RolloutTree build_tree(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                       const Tensor& init_noise, std::vector<std::size_t> split_steps, std::size_t g,
                       std::uint64_t seed) {
  if (g < 1) throw std::invalid_argument("branch_rollout: g must be >= 1");
  const std::size_t steps = cfg.sampling_steps;
  std::sort(split_steps.begin(), split_steps.end());
  for (std::size_t i = 0; i < split_steps.size(); ++i) {
    // A split at the deterministic final step is legal; its siblings come out identical.
    if (split_steps[i] >= steps) {
      throw std::invalid_argument("branch_rollout: branch step " + std::to_string(split_steps[i]) +
                                  " is outside [0, " + std::to_string(steps) + ")");
    }
    if (i > 0 && split_steps[i] == split_steps[i - 1]) {
      throw std::invalid_argument("branch_rollout: duplicate branch step " + std::to_string(split_steps[i]));
    }
  }

  RolloutTree tree;
  tree.split_steps = split_steps;
  if (split_steps.empty()) {
    if (g > 1) {
      tree.split_steps = {0};
      tree.arities = {g};
    }
  } else {
    tree.arities = plan_arities(g, split_steps.size());
  }

  // Only forks with arity > 1 create node boundaries.
  std::vector<std::pair<std::size_t, std::size_t>> forks;
  for (std::size_t i = 0; i < tree.split_steps.size(); ++i) {
    if (tree.arities[i] > 1) forks.emplace_back(tree.split_steps[i], tree.arities[i]);
  }

  tree.nodes.push_back(TreeNode{});
  tree.nodes[0].start_step = 0;
  tree.nodes[0].end_step = forks.empty() ? steps : forks[0].first;
  std::vector<std::int32_t> frontier{0};
  for (std::size_t level = 0; level < forks.size(); ++level) {
    const std::size_t begin = forks[level].first;
    const std::size_t end = level + 1 < forks.size() ? forks[level + 1].first : steps;
    std::vector<std::int32_t> next;
    for (std::int32_t parent : frontier) {
      for (std::size_t c = 0; c < forks[level].second; ++c) {
        TreeNode child;
        child.parent = parent;
        child.start_step = begin;
        child.end_step = end;
        const auto id = static_cast<std::int32_t>(tree.nodes.size());
        tree.nodes[parent].children.push_back(id);
        tree.nodes.push_back(std::move(child));
        next.push_back(id);
      }
    }
    frontier = std::move(next);
  }

  // Nodes are stored parents-first, so a single forward sweep has every input state ready.
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    TreeNode& node = tree.nodes[id];
    node.seed = Rng::derive(seed, id);
    Rng rng(node.seed);
    // A fork at step 0 leaves the trunk empty, so start from the nearest ancestor holding a state.
    std::int32_t a = node.parent;
    while (a >= 0 && tree.nodes[a].states.empty()) a = tree.nodes[a].parent;
    Tensor x = a < 0 ? init_noise : tree.nodes[a].states.back();
    for (std::size_t s = node.start_step; s < node.end_step; ++s) {
      StepOutput out = forward_step(cfg, params, x, s, prompt);
      StepSample smp = sample_step(out.dist, rng);
      x = smp.next;
      node.states.push_back(std::move(smp.next));
      node.log_probs.push_back(smp.log_prob);
      node.attention.push_back(std::move(out.attention));
    }
  }

  for (std::int32_t leaf_id : frontier) {
    std::vector<std::int32_t> path;
    for (std::int32_t a = leaf_id; a >= 0; a = tree.nodes[a].parent) path.push_back(a);
    std::reverse(path.begin(), path.end());

    Trajectory traj;
    traj.prompt_id = prompt.prompt_id;
    traj.states.push_back(init_noise);
    std::vector<std::int32_t> owner;
    owner.reserve(steps);
    for (std::int32_t id : path) {
      const TreeNode& n = tree.nodes[id];
      traj.states.insert(traj.states.end(), n.states.begin(), n.states.end());
      traj.log_probs.insert(traj.log_probs.end(), n.log_probs.begin(), n.log_probs.end());
      traj.attention.insert(traj.attention.end(), n.attention.begin(), n.attention.end());
      owner.insert(owner.end(), n.end_step - n.start_step, id);
    }
    traj.final_sample = traj.states.back();
    tree.leaves.push_back(std::move(traj));
    tree.step_owner.push_back(std::move(owner));
  }
  return tree;
}

}  // namespace

RolloutTree branch_rollout(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                           const Tensor& init_noise, const PeakSet& peaks, std::size_t g, std::uint64_t seed) {
  return build_tree(cfg, params, prompt, init_noise, peaks.steps, g, seed);
}

RolloutTree fixed_schedule_rollout(const DenoiserConfig& cfg, const DenoiserParams& params,
                                   const PromptSpec& prompt, const Tensor& init_noise,
                                   std::span<const std::size_t> schedule, std::size_t g, std::uint64_t seed) {
  return build_tree(cfg, params, prompt, init_noise, std::vector<std::size_t>(schedule.begin(), schedule.end()), g,
                    seed);
}

RolloutTree independent_rollouts(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                                 std::span<const Tensor> noises, std::uint64_t seed) {
  if (noises.empty()) throw std::invalid_argument("independent_rollouts: need at least one noise tensor");
  const std::size_t steps = cfg.sampling_steps;
  RolloutTree tree;
  tree.split_steps = {0};
  tree.arities = {noises.size()};
  tree.nodes.push_back(TreeNode{});
  for (std::size_t j = 0; j < noises.size(); ++j) {
    TreeNode node;
    node.parent = 0;
    node.start_step = 0;
    node.end_step = steps;
    node.seed = Rng::derive(seed, j + 1);
    Rng rng(node.seed);
    Trajectory traj = rollout(cfg, params, prompt, noises[j], rng);
    node.states.assign(traj.states.begin() + 1, traj.states.end());
    node.log_probs = traj.log_probs;
    node.attention = traj.attention;
    const auto id = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes[0].children.push_back(id);
    tree.nodes.push_back(std::move(node));
    tree.leaves.push_back(std::move(traj));
    tree.step_owner.emplace_back(steps, id);
  }
  return tree;
}

}  // namespace aegpo
