#include "aegpo/denoiser.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace aegpo {

namespace {

constexpr std::uint64_t kLayoutStream = 0x4c41594f5554ULL;
constexpr std::uint64_t kPromptStream = 0x50524f4d5054ULL;

const char* slot_name(DenoiserParams::Slot slot) {
  switch (slot) {
    case DenoiserParams::kWq: return "w_q";
    case DenoiserParams::kWk: return "w_k";
    case DenoiserParams::kWv: return "w_v";
    case DenoiserParams::kWout: return "w_out";
    case DenoiserParams::kMlpIn: return "mlp_in";
    case DenoiserParams::kMlpOut: return "mlp_out";
    case DenoiserParams::kTimeQ: return "time_q";
  }
  return "?";
}

std::vector<std::string> param_names(std::size_t layers) {
  std::vector<std::string> names{"pos_embed"};
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t s = 0; s < DenoiserParams::kPerLayer; ++s) {
      names.push_back("layers." + std::to_string(l) + "." + slot_name(static_cast<DenoiserParams::Slot>(s)));
    }
  }
  return names;
}

Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data) v = stddev * rng.normal();
  return t;
}

void check_state(const DenoiserConfig& cfg, const Tensor& x, const char* op) {
  if (x.shape != Shape{cfg.num_features, cfg.dim}) {
    throw DimensionError(std::string(op) + ": state shape " + shape_to_string(x.shape) + " does not match model " +
                         shape_to_string(Shape{cfg.num_features, cfg.dim}));
  }
}

void check_prompt(const DenoiserConfig& cfg, const PromptSpec& prompt, const char* op) {
  const Tensor& e = prompt.token_embeddings;
  if (e.rank() != 2 || e.rows() == 0 || e.cols() != cfg.dim) {
    throw DimensionError(std::string(op) + ": token embeddings " + shape_to_string(e.shape) +
                         " incompatible with model dim " + std::to_string(cfg.dim));
  }
}

void write_u64_le(std::ostream& os, std::uint64_t bits) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

std::uint64_t read_u64_le(const char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  return bits;
}

}  // namespace

void DenoiserConfig::validate() const {
  if (num_features == 0 || dim == 0 || num_tokens == 0 || num_layers == 0 || mlp_hidden == 0) {
    throw std::invalid_argument("denoiser config: all dimensions must be positive");
  }
  if (sampling_steps < 2) throw std::invalid_argument("denoiser config: sampling_steps must be >= 2");
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw std::invalid_argument("denoiser config: eta must be finite and >= 0");
  if (!(shift > 0.0)) throw std::invalid_argument("denoiser config: shift must be positive");
  for (std::size_t l : selected_layers) {
    if (l >= num_layers) throw std::invalid_argument("denoiser config: selected layer " + std::to_string(l) + " out of range");
  }
}

std::vector<std::size_t> DenoiserConfig::effective_layers() const {
  if (!selected_layers.empty()) return selected_layers;
  std::vector<std::size_t> all(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) all[l] = l;
  return all;
}

std::size_t DenoiserParams::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

bool DenoiserParams::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const Tensor& t) { return t.all_finite(); });
}

bool DenoiserParams::same_layout(const DenoiserParams& other) const {
  if (names != other.names || tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].shape != other.tensors[i].shape) return false;
  }
  return true;
}

std::vector<double> noise_schedule(const DenoiserConfig& cfg) {
  const std::size_t steps = cfg.sampling_steps;
  std::vector<double> sigmas(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) {
    const double u = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
    sigmas[k] = cfg.shift * u / (1.0 + (cfg.shift - 1.0) * u);
  }
  sigmas[steps] = 0.0;
  return sigmas;
}

double step_std(const DenoiserConfig& cfg, std::size_t step) {
  if (step >= cfg.sampling_steps) throw std::out_of_range("step_std: step " + std::to_string(step) + " out of range");
  if (step + 1 == cfg.sampling_steps) return 0.0;
  const auto sigmas = noise_schedule(cfg);
  return cfg.eta * std::sqrt(sigmas[step]) * std::sqrt(sigmas[step] - sigmas[step + 1]);
}

Tensor task_layout(const DenoiserConfig& cfg) {
  Rng rng(Rng::derive(cfg.task_seed, kLayoutStream));
  return normal_matrix(cfg.num_features, cfg.dim, cfg.layout_scale, rng);
}

PromptSpec make_prompt(const DenoiserConfig& cfg, std::int64_t prompt_id) {
  Rng rng(Rng::derive(Rng::derive(cfg.task_seed, kPromptStream), static_cast<std::uint64_t>(prompt_id)));
  PromptSpec p;
  p.prompt_id = prompt_id;
  p.token_embeddings = normal_matrix(cfg.num_tokens, cfg.dim, 1.0, rng);

  // Each feature's ground truth is the token its layout slot aligns with best.
  const Tensor layout = task_layout(cfg);
  p.target = Tensor::matrix(cfg.num_features, cfg.dim);
  for (std::size_t i = 0; i < cfg.num_features; ++i) {
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t tok = 0; tok < cfg.num_tokens; ++tok) {
      double s = 0.0;
      for (std::size_t j = 0; j < cfg.dim; ++j) s += layout.at(i, j) * p.token_embeddings.at(tok, j);
      if (s > best_score) {
        best_score = s;
        best = tok;
      }
    }
    for (std::size_t j = 0; j < cfg.dim; ++j) p.target.at(i, j) = p.token_embeddings.at(best, j);
  }
  return p;
}

DenoiserParams init_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.dim;
  const double noise = cfg.init_noise;

  DenoiserParams p;
  p.num_layers = cfg.num_layers;
  p.names = param_names(cfg.num_layers);

  Tensor pos = task_layout(cfg);
  for (double& v : pos.data) v = cfg.base_layout_strength * v + noise * rng.normal();
  p.tensors.push_back(std::move(pos));

  auto near_identity = [&](double gain) {
    Tensor t = normal_matrix(d, d, noise, rng);
    for (std::size_t i = 0; i < d; ++i) t.at(i, i) += gain;
    return t;
  };
  const double out_gain = 1.0 / static_cast<double>(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    p.tensors.push_back(near_identity(cfg.query_gain));
    p.tensors.push_back(near_identity(1.0));
    p.tensors.push_back(near_identity(cfg.value_gain));
    p.tensors.push_back(near_identity(out_gain));
    p.tensors.push_back(normal_matrix(d, cfg.mlp_hidden, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    p.tensors.push_back(normal_matrix(cfg.mlp_hidden, d, noise, rng));
    p.tensors.push_back(normal_matrix(cfg.sampling_steps, d, noise, rng));
  }
  return p;
}

Tensor sample_noise(const DenoiserConfig& cfg, Rng& rng) {
  return normal_matrix(cfg.num_features, cfg.dim, 1.0, rng);
}

ParamVars ParamVars::load(Tape& tape, const DenoiserParams& params, bool trainable) {
  ParamVars pv;
  pv.vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) pv.vars.push_back(trainable ? tape.parameter(t) : tape.constant(t));
  return pv;
}

TapeStep forward_on_tape(Tape& tape, const DenoiserConfig& cfg, const DenoiserParams& params,
                         const ParamVars& pv, Var x, std::size_t step, const PromptSpec& prompt) {
  if (step >= cfg.sampling_steps) {
    throw std::out_of_range("forward_step: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(cfg.sampling_steps) + ")");
  }
  check_state(cfg, x.value(), "forward_step");
  check_prompt(cfg, prompt, "forward_step");
  if (params.num_layers != cfg.num_layers || pv.vars.size() != params.tensors.size()) {
    throw DimensionError("forward_step: parameter layout does not match the config");
  }

  const auto sigmas = noise_schedule(cfg);
  const double sigma = sigmas[step];
  const double ratio = (sigma - sigmas[step + 1]) / sigma;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));

  Var tokens = tape.constant(prompt.token_embeddings);
  Var h0 = add(x, pv.vars[0]);
  Var h = h0;
  TapeStep out;
  out.attention.reserve(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto w = [&](DenoiserParams::Slot s) { return pv.vars[params.index(l, s)]; };
    Var q = matmul(add_row(h, row(w(DenoiserParams::kTimeQ), step)), w(DenoiserParams::kWq));
    Var k = matmul(tokens, w(DenoiserParams::kWk));
    Var v = matmul(tokens, w(DenoiserParams::kWv));
    Var attn = softmax_rows(matmul_bt(q, k), attn_scale);
    out.attention.push_back(attn);
    h = add(h, matmul(matmul(attn, v), w(DenoiserParams::kWout)));
    h = add(h, matmul(tanh(matmul(h, w(DenoiserParams::kMlpIn))), w(DenoiserParams::kMlpOut)));
  }
  // The residual updates form the clean-sample estimate; the flow step moves x toward it.
  Var x0_hat = sub(h, h0);
  out.mean = add(scale(x, 1.0 - ratio), scale(x0_hat, ratio));
  return out;
}

StepOutput forward_step(const DenoiserConfig& cfg, const DenoiserParams& params, const Tensor& x,
                        std::size_t step, const PromptSpec& prompt) {
  Tape tape;
  ParamVars pv = ParamVars::load(tape, params, false);
  Var xv = tape.constant(x);
  TapeStep ts = forward_on_tape(tape, cfg, params, pv, xv, step, prompt);
  StepOutput out;
  out.dist.mean = ts.mean.value();
  out.dist.std = step_std(cfg, step);
  out.attention.step = step;
  out.attention.selected_layers = cfg.effective_layers();
  for (Var a : ts.attention) out.attention.maps.push_back(a.value());
  return out;
}

StepSample sample_step_with_noise(const StepDistribution& dist, const Tensor& eps) {
  require_same_shape(dist.mean, eps, "sample_step");
  StepSample s;
  s.next = dist.mean;
  if (dist.std == 0.0) return s;
  for (std::size_t i = 0; i < s.next.data.size(); ++i) s.next.data[i] += dist.std * eps.data[i];
  s.log_prob = gaussian_log_density(dist.mean.data, s.next.data, dist.std);
  return s;
}

StepSample sample_step(const StepDistribution& dist, Rng& rng) {
  if (dist.std == 0.0) return sample_step_with_noise(dist, Tensor(dist.mean.shape));
  Tensor eps(dist.mean.shape);
  for (double& v : eps.data) v = rng.normal();
  return sample_step_with_noise(dist, eps);
}

Var log_prob_on_tape(Tape& tape, const DenoiserConfig& cfg, const DenoiserParams& params,
                     const ParamVars& pv, const PromptSpec& prompt, const Trajectory& traj,
                     std::size_t step) {
  if (step >= cfg.sampling_steps || step + 1 >= traj.states.size()) {
    throw std::out_of_range("log_prob_of: step " + std::to_string(step) + " out of range");
  }
  const double std_dev = step_std(cfg, step);
  if (std_dev == 0.0) return tape.constant(Tensor::scalar(0.0));
  Var x = tape.constant(traj.states[step]);
  TapeStep ts = forward_on_tape(tape, cfg, params, pv, x, step, prompt);
  Var next = tape.constant(traj.states[step + 1]);
  return gaussian_log_prob(ts.mean, next, std_dev);
}

double log_prob_of(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                   const Trajectory& traj, std::size_t step) {
  Tape tape;
  ParamVars pv = ParamVars::load(tape, params, false);
  return log_prob_on_tape(tape, cfg, params, pv, prompt, traj, step).value().item();
}

Trajectory rollout(const DenoiserConfig& cfg, const DenoiserParams& params, const PromptSpec& prompt,
                   const Tensor& init_noise, Rng& rng) {
  check_state(cfg, init_noise, "rollout");
  Trajectory traj;
  traj.prompt_id = prompt.prompt_id;
  traj.states.reserve(cfg.sampling_steps + 1);
  traj.states.push_back(init_noise);
  for (std::size_t s = 0; s < cfg.sampling_steps; ++s) {
    StepOutput out = forward_step(cfg, params, traj.states.back(), s, prompt);
    StepSample smp = sample_step(out.dist, rng);
    traj.states.push_back(std::move(smp.next));
    traj.log_probs.push_back(smp.log_prob);
    traj.attention.push_back(std::move(out.attention));
  }
  traj.final_sample = traj.states.back();
  return traj;
}

std::vector<AttentionRecord> teacher_forced_attention(const DenoiserConfig& cfg, const DenoiserParams& params,
                                                      const PromptSpec& prompt, const Trajectory& traj) {
  if (traj.states.size() < cfg.sampling_steps) {
    throw std::invalid_argument("teacher_forced_attention: trajectory has too few states");
  }
  std::vector<AttentionRecord> records;
  records.reserve(cfg.sampling_steps);
  for (std::size_t s = 0; s < cfg.sampling_steps; ++s) {
    records.push_back(forward_step(cfg, params, traj.states[s], s, prompt).attention);
  }
  return records;
}

void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params) {
  nlohmann::json manifest;
  manifest["format"] = "aegpo-checkpoint";
  manifest["version"] = 1;
  manifest["num_layers"] = params.num_layers;
  manifest["dtype"] = "float64-le";
  auto& entries = manifest["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    entries.push_back({{"name", params.names[i]}, {"shape", params.tensors[i].shape}});
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  os << manifest.dump() << '\n';
  for (const auto& t : params.tensors) {
    for (double v : t.data) write_u64_le(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

DenoiserParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("load_checkpoint: missing manifest in " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: bad manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "aegpo-checkpoint" || manifest.value("version", 0) != 1) {
    throw std::runtime_error("load_checkpoint: unsupported checkpoint format in " + path.string());
  }
  DenoiserParams p;
  p.num_layers = manifest.at("num_layers").get<std::size_t>();
  const auto expected_names = param_names(p.num_layers);
  std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::size_t offset = 0;
  for (const auto& entry : manifest.at("params")) {
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    if (offset + 8 * t.numel() > payload.size()) throw std::runtime_error("load_checkpoint: truncated payload");
    for (double& v : t.data) {
      v = std::bit_cast<double>(read_u64_le(payload.data() + offset));
      offset += 8;
    }
    p.names.push_back(entry.at("name").get<std::string>());
    p.tensors.push_back(std::move(t));
  }
  if (offset != payload.size()) throw std::runtime_error("load_checkpoint: trailing bytes after payload");
  if (p.names != expected_names) throw std::runtime_error("load_checkpoint: parameter names do not match the layout");
  return p;
}

}  // namespace aegpo
