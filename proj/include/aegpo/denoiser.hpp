#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aegpo/attention.hpp"
#include "aegpo/autodiff.hpp"
#include "aegpo/rng.hpp"
#include "aegpo/tensor.hpp"

namespace aegpo {

/// Shape and sampler settings of the toy cross-attention flow denoiser.
struct DenoiserConfig {
  std::size_t num_features = 16;  // N image features
  std::size_t dim = 8;            // d
  std::size_t num_tokens = 6;     // T_tok
  std::size_t num_layers = 3;     // L
  std::size_t mlp_hidden = 16;
  std::size_t sampling_steps = 16;
  double eta = 0.3;
  double shift = 3.0;
  /// Layers averaged for the entropy signal; empty means all layers.
  std::vector<std::size_t> selected_layers;

  // Structured initialization of the "pretrained" base model.
  std::uint64_t task_seed = 1223627;
  double query_gain = 1.0;
  double layout_scale = 1.0;
  double base_layout_strength = 0.5;
  double value_gain = 1.0;
  double init_noise = 0.05;

  void validate() const;
  std::vector<std::size_t> effective_layers() const;
};

/// A conditioning prompt: token embeddings plus the synthetic ground truth rewards compare against.
struct PromptSpec {
  std::int64_t prompt_id = 0;
  Tensor token_embeddings;  // T_tok x d
  Tensor target;            // N x d
};

/// Named parameter tensors in a fixed order: pos_embed, then per layer
/// w_q, w_k, w_v, w_out, mlp_in, mlp_out, time_q.
struct DenoiserParams {
  std::size_t num_layers = 0;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  static constexpr std::size_t kPerLayer = 7;
  enum Slot : std::size_t { kWq = 0, kWk, kWv, kWout, kMlpIn, kMlpOut, kTimeQ };

  std::size_t index(std::size_t layer, Slot slot) const { return 1 + layer * kPerLayer + slot; }
  const Tensor& pos_embed() const { return tensors[0]; }
  const Tensor& at(std::size_t layer, Slot slot) const { return tensors[index(layer, slot)]; }
  Tensor& at(std::size_t layer, Slot slot) { return tensors[index(layer, slot)]; }

  std::size_t total_size() const;
  bool all_finite() const;
  bool same_layout(const DenoiserParams& other) const;
};

/// Per-step Gaussian policy. std == 0 marks the deterministic final step.
struct StepDistribution {
  Tensor mean;
  double std = 0.0;
};

/// One complete denoising rollout. states[0] is the initial noise; step s maps states[s] to states[s+1].
struct Trajectory {
  std::int64_t prompt_id = 0;
  std::vector<Tensor> states;
  std::vector<double> log_probs;
  std::vector<AttentionRecord> attention;
  Tensor final_sample;
};

/// Noise level before each step, length sampling_steps + 1, from 1 down to 0, shift-warped.
std::vector<double> noise_schedule(const DenoiserConfig& cfg);
/// Sampler std for step s; zero on the final step.
double step_std(const DenoiserConfig& cfg, std::size_t step);

/// Fixed task layout that defines every prompt's target.
Tensor task_layout(const DenoiserConfig& cfg);
PromptSpec make_prompt(const DenoiserConfig& cfg, std::int64_t prompt_id);
/// Structured base ("pretrained") parameters with seeded perturbation.
DenoiserParams init_params(const DenoiserConfig& cfg, std::uint64_t seed);
Tensor sample_noise(const DenoiserConfig& cfg, Rng& rng);

/// Parameters loaded onto a tape, either as trainable leaves or as constants.
struct ParamVars {
  std::vector<Var> vars;
  static ParamVars load(Tape& tape, const DenoiserParams& params, bool trainable);
};

struct TapeStep {
  Var mean;
  std::vector<Var> attention;
};

/// Differentiable forward pass for one step. The shared code path for sampling and scoring.
TapeStep forward_on_tape(Tape& tape, const DenoiserConfig& cfg, const DenoiserParams& params,
                         const ParamVars& pv, Var x, std::size_t step, const PromptSpec& prompt);

struct StepOutput {
  StepDistribution dist;
  AttentionRecord attention;
};

StepOutput forward_step(const DenoiserConfig& cfg, const DenoiserParams& params, const Tensor& x,
                        std::size_t step, const PromptSpec& prompt);

struct StepSample {
  Tensor next;
  double log_prob = 0.0;
};

/// Draws x_{s+1} = mean + std * eps. A deterministic step (std == 0) returns the mean with log_prob 0.
StepSample sample_step(const StepDistribution& dist, Rng& rng);
/// Same as sample_step with an explicit noise tensor (used to force eps = 0 in tests).
StepSample sample_step_with_noise(const StepDistribution& dist, const Tensor& eps);

/// Teacher-forced log density of the recorded transition at `step` under `params`.
double log_prob_of(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                   const Trajectory& traj, std::size_t step);
/// Differentiable variant. Returns a constant zero node for the deterministic final step.
Var log_prob_on_tape(Tape& tape, const DenoiserConfig& cfg, const DenoiserParams& params,
                     const ParamVars& pv, const PromptSpec& prompt, const Trajectory& traj,
                     std::size_t step);

Trajectory rollout(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                   const Tensor& init_noise, Rng& rng);

/// Attention records of `params` evaluated on another trajectory's visited states.
std::vector<AttentionRecord> teacher_forced_attention(const DenoiserConfig& cfg, const DenoiserParams& params,
                                                      const PromptSpec& prompt, const Trajectory& traj);

// Checkpoint file: one JSON manifest line, then the raw little-endian float64 payload in manifest order.
void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params);
DenoiserParams load_checkpoint(const std::filesystem::path& path);

}  // namespace aegpo
