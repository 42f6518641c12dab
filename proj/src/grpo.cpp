#include "aegpo/grpo.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "aegpo/diversity.hpp"

namespace aegpo {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("TrainConfig: " + msg); };
  if (!(clip_range > 0.0)) fail("clip_range must be > 0");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) fail("ema_decay must lie in (0, 1)");
  if (!(adv_clip_max > 0.0)) fail("adv_clip_max must be > 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and >= 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) fail("weight_decay must be finite and >= 0");
  if (!(max_grad_norm > 0.0)) fail("max_grad_norm must be > 0");
  if (grad_accum_steps < 1) fail("grad_accum_steps must be >= 1");
  if (warmup_iters < 0) fail("warmup_iters must be >= 0");
  if (lr_warmup_iters < 0) fail("lr_warmup_iters must be >= 0");
  if (num_generations < 1) fail("num_generations must be >= 1");
  if (sampling_steps < 2) fail("sampling_steps must be >= 2");
  if (k_peaks < 1 || k_peaks >= sampling_steps) fail("k_peaks must lie in [1, sampling_steps)");
  if (!(eta >= 0.0) || !std::isfinite(eta)) fail("eta must be finite and >= 0");
}

AdvantageSet group_advantages(const RewardMatrix& rewards, double adv_clip_max, std::span<const double> weights) {
  const std::size_t g = rewards.size();
  if (g < 2) throw std::invalid_argument("group_advantages: need at least 2 leaves, got " + std::to_string(g));
  if (!(adv_clip_max > 0.0)) throw std::invalid_argument("group_advantages: adv_clip_max must be > 0");
  const std::size_t k = rewards[0].size();
  if (k == 0) throw std::invalid_argument("group_advantages: no reward columns");
  for (const auto& row : rewards) {
    if (row.size() != k) throw std::invalid_argument("group_advantages: ragged reward matrix");
  }
  if (!weights.empty() && weights.size() != k) {
    throw std::invalid_argument("group_advantages: " + std::to_string(weights.size()) + " weights for " +
                                std::to_string(k) + " rewards");
  }

  AdvantageSet out;
  out.raw.assign(g, 0.0);
  out.means.assign(k, 0.0);
  out.stds.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double mu = 0.0;
    for (const auto& row : rewards) mu += row[c];
    mu /= static_cast<double>(g);
    double var = 0.0;
    for (const auto& row : rewards) var += (row[c] - mu) * (row[c] - mu);
    const double sigma = std::sqrt(var / static_cast<double>(g));
    out.means[c] = mu;
    out.stds[c] = sigma;
    if (sigma < kStdEpsilon) continue;
    const double w = weights.empty() ? 1.0 : weights[c];
    for (std::size_t j = 0; j < g; ++j) out.raw[j] += w * (rewards[j][c] - mu) / sigma;
  }
  out.advantages.resize(g);
  for (std::size_t j = 0; j < g; ++j) out.advantages[j] = std::clamp(out.raw[j], -adv_clip_max, adv_clip_max);
  return out;
}

AdvantageSet group_advantages(const RewardMatrix& rewards, const TrainConfig& cfg) {
  return group_advantages(rewards, cfg.adv_clip_max);
}

Var clipped_objective(Tape& tape, std::span<const double> advantages,
                      const std::vector<std::vector<Var>>& log_ratios, double clip_range) {
  if (advantages.size() != log_ratios.size()) {
    throw std::invalid_argument("clipped_objective: " + std::to_string(advantages.size()) + " advantages for " +
                                std::to_string(log_ratios.size()) + " leaves");
  }
  if (!(clip_range > 0.0)) throw std::invalid_argument("clipped_objective: clip_range must be > 0");
  std::vector<Var> terms;
  for (std::size_t j = 0; j < log_ratios.size(); ++j) {
    const double a = advantages[j];
    for (std::size_t s = 0; s < log_ratios[j].size(); ++s) {
      Var lr = log_ratios[j][s];
      tape.check(lr, "clipped_objective");
      const double v = lr.value().item();
      if (!std::isfinite(v)) {
        throw std::runtime_error("clipped_objective: non-finite log ratio " + std::to_string(v) + " at leaf " +
                                 std::to_string(j) + " term " + std::to_string(s) +
                                 " (advantage " + std::to_string(a) + ")");
      }
      Var rho = exp(lr);
      Var unclipped = scale(rho, a);
      Var clipped = scale(clamp(rho, 1.0 - clip_range, 1.0 + clip_range), a);
      terms.push_back(minimum(unclipped, clipped));
    }
  }
  if (terms.empty()) throw std::invalid_argument("clipped_objective: no trained steps");
  return scale(mean(concat_scalars(terms)), -1.0);
}

ParamGradients ParamGradients::zeros_like(const DenoiserParams& params) {
  ParamGradients g;
  g.tensors.reserve(params.tensors.size());
  for (const auto& t : params.tensors) g.tensors.emplace_back(t.shape);
  return g;
}

void ParamGradients::add(const ParamGradients& other) {
  if (other.tensors.size() != tensors.size()) throw DimensionError("ParamGradients::add: layout mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    require_same_shape(tensors[i], other.tensors[i], "ParamGradients::add");
    for (std::size_t e = 0; e < tensors[i].data.size(); ++e) tensors[i].data[e] += other.tensors[i].data[e];
  }
}

void ParamGradients::scale(double c) {
  for (auto& t : tensors) {
    for (double& v : t.data) v *= c;
  }
}

double ParamGradients::global_norm() const {
  double sq = 0.0;
  for (const auto& t : tensors) {
    for (double v : t.data) sq += v * v;
  }
  return std::sqrt(sq);
}

UpdateStats apply_update(DenoiserParams& params, const ParamGradients& grads, const TrainConfig& cfg,
                         DenoiserParams* ema) {
  if (grads.tensors.size() != params.tensors.size()) throw DimensionError("apply_update: layout mismatch");
  for (std::size_t i = 0; i < grads.tensors.size(); ++i) {
    require_same_shape(params.tensors[i], grads.tensors[i], "apply_update");
    if (!grads.tensors[i].all_finite()) {
      throw std::runtime_error("apply_update: non-finite gradient in parameter '" + params.names[i] + "'");
    }
  }
  UpdateStats stats;
  stats.grad_norm = grads.global_norm();
  if (stats.grad_norm > cfg.max_grad_norm) stats.clip_scale = cfg.max_grad_norm / stats.grad_norm;
  const double decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
  const double step = cfg.learning_rate * stats.clip_scale;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& p = params.tensors[i].data;
    const auto& g = grads.tensors[i].data;
    for (std::size_t e = 0; e < p.size(); ++e) p[e] = p[e] * decay - step * g[e];
  }
  if (ema != nullptr && cfg.use_ema) ema_update(*ema, params, cfg.ema_decay);
  return stats;
}

void ema_update(DenoiserParams& ema, const DenoiserParams& params, double decay) {
  if (!ema.same_layout(params)) throw DimensionError("ema_update: layout mismatch");
  for (std::size_t i = 0; i < ema.tensors.size(); ++i) {
    auto& e = ema.tensors[i].data;
    const auto& p = params.tensors[i].data;
    for (std::size_t k = 0; k < e.size(); ++k) e[k] = decay * e[k] + (1.0 - decay) * p[k];
  }
}

AllocationMode parse_allocation_mode(const std::string& s) {
  if (s == "adaptive") return AllocationMode::kAdaptive;
  if (s == "uniform") return AllocationMode::kUniform;
  if (s == "high_only") return AllocationMode::kHighOnly;
  if (s == "low_only") return AllocationMode::kLowOnly;
  if (s == "random_half") return AllocationMode::kRandomHalf;
  throw std::invalid_argument("unknown allocation mode '" + s +
                              "' (expected adaptive, uniform, high_only, low_only or random_half)");
}

const char* allocation_mode_name(AllocationMode m) {
  switch (m) {
    case AllocationMode::kAdaptive: return "adaptive";
    case AllocationMode::kUniform: return "uniform";
    case AllocationMode::kHighOnly: return "high_only";
    case AllocationMode::kLowOnly: return "low_only";
    case AllocationMode::kRandomHalf: return "random_half";
  }
  return "?";
}

const char* exploration_mode_name(ExplorationMode m) {
  switch (m) {
    case ExplorationMode::kEntropy: return "entropy";
    case ExplorationMode::kFixed: return "fixed";
    case ExplorationMode::kIndependent: return "independent";
  }
  return "?";
}

BaseEntropyMode parse_base_entropy_mode(const std::string& s) {
  if (s == "teacher_forced") return BaseEntropyMode::kTeacherForced;
  if (s == "base_rollout") return BaseEntropyMode::kBaseRollout;
  throw std::invalid_argument("unknown base entropy mode '" + s + "' (expected teacher_forced or base_rollout)");
}

const char* base_entropy_mode_name(BaseEntropyMode m) {
  return m == BaseEntropyMode::kTeacherForced ? "teacher_forced" : "base_rollout";
}

DenoiserConfig TrainerSetup::effective_model() const {
  DenoiserConfig m = model;
  m.eta = train.eta;
  m.sampling_steps = static_cast<std::size_t>(train.sampling_steps);
  return m;
}

AllocationConfig TrainerSetup::allocation_config() const {
  return AllocationConfig::from_average(train.num_generations, train.warmup_iters);
}

ValueProbe probe_value(const DenoiserConfig& cfg, const DenoiserParams& base, const PromptSpec& prompt,
                       const Trajectory& traj, BaseEntropyMode mode, std::uint64_t base_seed) {
  const std::size_t steps = cfg.sampling_steps;
  if (traj.states.size() != steps + 1) throw std::invalid_argument("probe_value: incomplete trajectory");
  ValueProbe out;
  out.current = entropy_trajectory(traj);

  // One base pass over the visited states yields both the base attention and base log-densities.
  std::vector<AttentionRecord> forced;
  forced.reserve(steps);
  double kl = 0.0;
  std::size_t stochastic = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    StepOutput o = forward_step(cfg, base, traj.states[s], s, prompt);
    if (o.dist.std > 0.0) {
      kl += traj.log_probs[s] - gaussian_log_density(o.dist.mean.data, traj.states[s + 1].data, o.dist.std);
      ++stochastic;
    }
    forced.push_back(std::move(o.attention));
  }
  out.kl_vs_base = stochastic > 0 ? kl / static_cast<double>(stochastic) : 0.0;

  if (mode == BaseEntropyMode::kTeacherForced) {
    out.base = entropy_trajectory(forced);
  } else {
    Rng rng(base_seed);
    out.base = entropy_trajectory(rollout(cfg, base, prompt, traj.states[0], rng));
  }
  out.value = delta_entropy(out.current, out.base, prompt.prompt_id);
  return out;
}

Trainer::Trainer(TrainerSetup setup, DenoiserParams initial)
    : setup_(std::move(setup)), model_(setup_.effective_model()), alloc_(setup_.allocation_config()) {
  setup_.train.validate();
  model_.validate();
  alloc_.validate();
  if (setup_.rewards.empty()) throw std::invalid_argument("Trainer: at least one reward is required");
  if (setup_.exploration == ExplorationMode::kFixed && setup_.fixed_schedule.empty()) {
    throw std::invalid_argument("Trainer: fixed exploration needs a non-empty schedule");
  }
  if (initial.num_layers != model_.num_layers || !initial.all_finite()) {
    throw std::invalid_argument("Trainer: initial parameters do not match the model config");
  }
  policy_ = initial;
  base_ = initial;
  old_ = initial;
  if (setup_.train.use_ema) ema_ = std::move(initial);
}

namespace {

// Substreams of a prompt's per-iteration seed.
constexpr std::uint64_t kNoiseStream = 1;
constexpr std::uint64_t kProbeStream = 2;
constexpr std::uint64_t kTreeStream = 3;
constexpr std::uint64_t kBaseStream = 4;
constexpr std::uint64_t kSelectStream = 5;
constexpr std::uint64_t kExtraNoiseStream = 1000;

struct PromptWork {
  ValueProbe probe;
  RolloutTree tree;
  std::size_t probe_steps = 0;
  std::optional<AdvantageSet> adv;
  std::vector<double> combined;
};

}  // namespace

ParamGradients Trainer::group_gradient(const PromptSpec& prompt, const RolloutTree& tree, const AdvantageSet& adv,
                                       double* loss_out) const {
  const std::size_t steps = model_.sampling_steps;
  const std::size_t trained = setup_.train.ignore_last_step ? steps - 1 : steps;
  Tape tape;
  ParamVars pv = ParamVars::load(tape, policy_, true);
  // Steps owned by a shared node are identical transitions on every leaf below it.
  std::unordered_map<std::size_t, Var> cache;
  std::vector<std::vector<Var>> log_ratios(tree.leaves.size());
  for (std::size_t j = 0; j < tree.leaves.size(); ++j) {
    const Trajectory& leaf = tree.leaves[j];
    log_ratios[j].reserve(trained);
    for (std::size_t s = 0; s < trained; ++s) {
      const std::size_t key = static_cast<std::size_t>(tree.step_owner[j][s]) * steps + s;
      auto it = cache.find(key);
      if (it == cache.end()) {
        Var lp = log_prob_on_tape(tape, model_, policy_, pv, prompt, leaf, s);
        it = cache.emplace(key, add_scalar(lp, -leaf.log_probs[s])).first;
      }
      log_ratios[j].push_back(it->second);
    }
  }
  Var loss = clipped_objective(tape, adv.advantages, log_ratios, setup_.train.clip_range);
  tape.backward(loss);
  if (loss_out != nullptr) *loss_out = loss.value().item();
  ParamGradients g;
  g.tensors.reserve(pv.vars.size());
  for (Var v : pv.vars) g.tensors.push_back(tape.grad(v));
  return g;
}

IterationMetrics Trainer::train_iteration(std::span<const PromptSpec> batch) {
  if (batch.empty()) throw std::invalid_argument("train_iteration: empty batch");
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& tc = setup_.train;
  const std::size_t b = batch.size();
  const std::uint64_t iter_seed = Rng::derive(tc.seed, static_cast<std::uint64_t>(iteration_));

  old_ = policy_;

  std::vector<std::uint64_t> prompt_seeds(b);
  std::vector<Tensor> noises(b);
  for (std::size_t i = 0; i < b; ++i) {
    prompt_seeds[i] = Rng::derive(iter_seed, i);
    Rng rng(Rng::derive(prompt_seeds[i], kNoiseStream));
    noises[i] = sample_noise(model_, rng);
  }

  std::vector<PromptWork> work(b);
  parallel_for(b, setup_.num_workers, [&](std::size_t i) {
    Rng rng(Rng::derive(prompt_seeds[i], kProbeStream));
    Trajectory ref = rollout(model_, old_, batch[i], noises[i], rng);
    work[i].probe = probe_value(model_, base_, batch[i], ref, setup_.base_entropy,
                                Rng::derive(prompt_seeds[i], kBaseStream));
    work[i].probe_steps = model_.sampling_steps * (setup_.base_entropy == BaseEntropyMode::kBaseRollout ? 3 : 2);
  });

  std::vector<SampleValue> values(b);
  for (std::size_t i = 0; i < b; ++i) values[i] = work[i].probe.value;

  const int r_avg = tc.num_generations;
  const bool warm = iteration_ < alloc_.warmup_iters;
  BudgetAssignment budget;
  switch (setup_.allocation) {
    case AllocationMode::kAdaptive:
      budget = allocate(values, alloc_, iteration_);
      break;
    case AllocationMode::kUniform:
      budget.rollouts.assign(b, r_avg);
      budget.tiers.assign(b, Tier::kUniform);
      budget.median = median_of([&] {
        std::vector<double> v;
        for (const auto& s : values) v.push_back(s.delta_entropy);
        return v;
      }());
      budget.warmup = warm;
      break;
    case AllocationMode::kHighOnly:
    case AllocationMode::kLowOnly:
    case AllocationMode::kRandomHalf:
      if (warm || b < 2) {
        budget = allocate(values, alloc_, iteration_);
      } else if (setup_.allocation == AllocationMode::kRandomHalf) {
        std::vector<std::size_t> order(b);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(Rng::derive(iter_seed, kSelectStream));
        for (std::size_t i = b - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        budget.rollouts.assign(b, 0);
        budget.tiers.assign(b, Tier::kSkipped);
        for (std::size_t i = 0; i < b / 2; ++i) {
          budget.rollouts[order[i]] = r_avg;
          budget.tiers[order[i]] = Tier::kUniform;
        }
      } else {
        budget = allocate_stratified(values, r_avg, setup_.allocation == AllocationMode::kHighOnly);
      }
      break;
  }

  parallel_for(b, setup_.num_workers, [&](std::size_t i) {
    const auto g = static_cast<std::size_t>(budget.rollouts[i]);
    if (g == 0) return;
    const std::uint64_t tree_seed = Rng::derive(prompt_seeds[i], kTreeStream);
    PromptWork& w = work[i];
    switch (setup_.exploration) {
      case ExplorationMode::kEntropy: {
        const PeakSet peaks = detect_peaks(w.probe.current, static_cast<std::size_t>(tc.k_peaks));
        w.tree = branch_rollout(model_, old_, batch[i], noises[i], peaks, g, tree_seed);
        break;
      }
      case ExplorationMode::kFixed:
        w.tree = fixed_schedule_rollout(model_, old_, batch[i], noises[i], setup_.fixed_schedule, g, tree_seed);
        break;
      case ExplorationMode::kIndependent:
        if (tc.init_same_noise) {
          w.tree = branch_rollout(model_, old_, batch[i], noises[i], PeakSet{}, g, tree_seed);
        } else {
          std::vector<Tensor> leaf_noise;
          for (std::size_t j = 0; j < g; ++j) {
            Rng rng(Rng::derive(prompt_seeds[i], kExtraNoiseStream + j));
            leaf_noise.push_back(sample_noise(model_, rng));
          }
          w.tree = independent_rollouts(model_, old_, batch[i], leaf_noise, tree_seed);
        }
        break;
    }
    RewardMatrix r = reward_vector(setup_.rewards, w.tree.leaves, batch[i]);
    for (const auto& row : r) w.combined.push_back(combined_reward(setup_.rewards, row));
    if (w.tree.leaves.size() >= 2) {
      std::vector<double> weights;
      for (const auto& spec : setup_.rewards) weights.push_back(spec.weight);
      w.adv = group_advantages(r, tc.adv_clip_max, weights);
    }
  });

  // Update phase: windows of grad_accum_steps groups, each window averaged into one step.
  std::vector<std::size_t> groups;
  for (std::size_t i = 0; i < b; ++i) {
    if (work[i].adv) groups.push_back(i);
  }
  TrainConfig step_cfg = tc;
  if (tc.lr_warmup_iters > 0 && iteration_ < tc.lr_warmup_iters) {
    step_cfg.learning_rate *= static_cast<double>(iteration_ + 1) / static_cast<double>(tc.lr_warmup_iters);
  }
  IterationMetrics m;
  const auto window = static_cast<std::size_t>(tc.grad_accum_steps);
  double loss_total = 0.0;
  double norm_total = 0.0;
  for (std::size_t start = 0; start < groups.size(); start += window) {
    const std::size_t end = std::min(groups.size(), start + window);
    std::vector<ParamGradients> grads(end - start);
    std::vector<double> losses(end - start, 0.0);
    parallel_for(end - start, setup_.num_workers, [&](std::size_t k) {
      const std::size_t i = groups[start + k];
      grads[k] = group_gradient(batch[i], work[i].tree, *work[i].adv, &losses[k]);
    });
    ParamGradients total = ParamGradients::zeros_like(policy_);
    for (const auto& g : grads) total.add(g);
    total.scale(1.0 / static_cast<double>(end - start));
    const UpdateStats st = apply_update(policy_, total, step_cfg, ema_ ? &*ema_ : nullptr);
    for (double l : losses) loss_total += l;
    norm_total += st.grad_norm;
    ++m.updates;
  }

  m.iteration = iteration_;
  m.warmup = budget.warmup;
  m.median = budget.median;
  m.loss = groups.empty() ? 0.0 : loss_total / static_cast<double>(groups.size());
  m.grad_norm = m.updates > 0 ? norm_total / m.updates : 0.0;
  double reward_sum = 0.0;
  std::size_t reward_count = 0;
  double std_sum = 0.0;
  double mpd_sum = 0.0;
  std::size_t diverse = 0;
  double kl_sum = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const PromptWork& w = work[i];
    PromptMetrics pm;
    pm.prompt_id = batch[i].prompt_id;
    pm.value = w.probe.value.delta_entropy;
    pm.delta_per_step = w.probe.value.per_step;
    pm.tier = budget.tiers[i];
    pm.rollouts = budget.rollouts[i];
    pm.peaks = w.tree.split_steps;
    pm.kl_vs_base = w.probe.kl_vs_base;
    if (!w.combined.empty()) {
      for (double r : w.combined) pm.reward_mean += r;
      pm.reward_mean /= static_cast<double>(w.combined.size());
      pm.reward_std = population_std(w.combined);
      reward_sum += pm.reward_mean * static_cast<double>(w.combined.size());
      reward_count += w.combined.size();
    }
    if (w.tree.leaves.size() >= 2) {
      pm.mpd = mean_pairwise_distance(w.tree.leaves);
      std_sum += pm.reward_std;
      mpd_sum += pm.mpd;
      ++diverse;
    }
    kl_sum += pm.kl_vs_base;
    m.rollouts += static_cast<long long>(w.tree.leaves.size());
    m.forward_steps += static_cast<long long>(w.tree.forward_steps() + w.probe_steps);
    m.prompts.push_back(std::move(pm));
  }
  m.reward_mean = reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0.0;
  m.reward_std = diverse > 0 ? std_sum / static_cast<double>(diverse) : 0.0;
  m.diversity = diverse > 0 ? mpd_sum / static_cast<double>(diverse) : 0.0;
  m.kl_vs_base = kl_sum / static_cast<double>(b);
  m.budget_deviation = budget.total() - static_cast<long long>(b) * r_avg;

  total_rollouts_ += m.rollouts;
  total_forward_steps_ += m.forward_steps;
  ++iteration_;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

double evaluate_policy(const DenoiserConfig& cfg, const DenoiserParams& params, std::span<const PromptSpec> prompts,
                       std::span<const RewardSpec> rewards, std::uint64_t seed) {
  if (prompts.empty()) throw std::invalid_argument("evaluate_policy: no prompts");
  double total = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::uint64_t s = Rng::derive(seed, i);
    Rng noise_rng(Rng::derive(s, kNoiseStream));
    Rng step_rng(Rng::derive(s, kProbeStream));
    Trajectory traj = rollout(cfg, params, prompts[i], sample_noise(cfg, noise_rng), step_rng);
    std::vector<double> row;
    for (const auto& spec : rewards) row.push_back(evaluate(spec, traj.final_sample, prompts[i]));
    total += combined_reward(rewards, row);
  }
  return total / static_cast<double>(prompts.size());
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace aegpo
