#include "aegpo/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "aegpo/diversity.hpp"

namespace aegpo {

using nlohmann::json;

namespace {

constexpr std::int64_t kEvalPromptOffset = 1'000'000;
constexpr std::uint64_t kBatchStream = 0xba7c4;

template <typename T>
void read(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename T>
T required_positive(T v, const char* name) {
  if (v <= 0) throw std::invalid_argument(std::string("config: ") + name + " must be positive");
  return v;
}

}  // namespace

void RunConfig::validate() const {
  required_positive(iterations, "iterations");
  required_positive(batch_size, "Train batch size");
  required_positive(checkpoint_steps, "Checkpoint steps");
  required_positive(metrics_flush_interval, "metrics_flush_interval");
  required_positive(train_prompts, "train_prompts");
  required_positive(eval_prompts, "eval_prompts");
  required_positive(eval_interval, "eval_interval");
  if (batch_size > train_prompts) throw std::invalid_argument("config: Train batch size exceeds train_prompts");
  if (setup.num_workers < 1) throw std::invalid_argument("config: Dataloader workers must be >= 1");
  if (setup.rewards.empty()) throw std::invalid_argument("config: at least one reward is required");
  setup.train.validate();
  setup.effective_model().validate();
  setup.allocation_config().validate();
  if (setup.exploration == ExplorationMode::kFixed) {
    if (setup.fixed_schedule.empty()) throw std::invalid_argument("config: fixed exploration needs a schedule");
    for (std::size_t s : setup.fixed_schedule) {
      if (s >= static_cast<std::size_t>(setup.train.sampling_steps)) {
        throw std::invalid_argument("config: fixed schedule step " + std::to_string(s) + " is out of range");
      }
    }
  }
}

std::filesystem::path RunConfig::resolved_output_dir() const {
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  return output_dir;
}

RunConfig desk_config() {
  RunConfig c;
  c.setup.train.learning_rate = 0.02;
  c.setup.train.max_grad_norm = 1.0;
  c.setup.train.clip_range = 0.2;
  c.setup.train.grad_accum_steps = 4;
  return c;
}

std::string exploration_spec(ExplorationMode mode, const std::vector<std::size_t>& schedule) {
  if (mode != ExplorationMode::kFixed) return exploration_mode_name(mode);
  std::string s = "fixed:";
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (i > 0) s += ',';
    s += std::to_string(schedule[i]);
  }
  return s;
}

void parse_exploration_spec(const std::string& spec, ExplorationMode& mode, std::vector<std::size_t>& schedule) {
  schedule.clear();
  if (spec == "entropy") {
    mode = ExplorationMode::kEntropy;
    return;
  }
  if (spec == "independent") {
    mode = ExplorationMode::kIndependent;
    return;
  }
  const std::string prefix = "fixed:";
  if (spec.rfind(prefix, 0) != 0) {
    throw std::invalid_argument("unknown exploration mode '" + spec + "' (expected entropy, independent or fixed:a,b,...)");
  }
  mode = ExplorationMode::kFixed;
  std::stringstream ss(spec.substr(prefix.size()));
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (item.empty() || pos != item.size()) throw std::invalid_argument("bad fixed schedule entry '" + item + "'");
    schedule.push_back(v);
  }
  if (schedule.empty()) throw std::invalid_argument("fixed schedule is empty");
  std::set<std::size_t> unique(schedule.begin(), schedule.end());
  if (unique.size() != schedule.size()) throw std::invalid_argument("fixed schedule has duplicate steps");
}

json to_json(const RunConfig& c) {
  const TrainConfig& t = c.setup.train;
  const DenoiserConfig& m = c.setup.model;
  json rewards = json::array();
  for (const auto& r : c.setup.rewards) {
    rewards.push_back({{"name", r.name}, {"kind", reward_kind_name(r.kind)}, {"weight", r.weight}});
  }
  json j;
  j["experiment"] = c.experiment;
  j["output_dir"] = c.output_dir.string();
  j["iterations"] = c.iterations;
  j["metrics_flush_interval"] = c.metrics_flush_interval;
  j["train_prompts"] = c.train_prompts;
  j["eval_prompts"] = c.eval_prompts;
  j["eval_interval"] = c.eval_interval;
  j["eval_seed"] = c.eval_seed;
  j["base_seed"] = c.base_seed;
  j["Random seed"] = t.seed;
  j["Train batch size"] = c.batch_size;
  j["Dataloader workers"] = c.setup.num_workers;
  j["Learning rate"] = t.learning_rate;
  j["Weight decay"] = t.weight_decay;
  j["Max grad norm"] = t.max_grad_norm;
  j["Grad. accum. steps"] = t.grad_accum_steps;
  j["Warmup steps"] = t.lr_warmup_iters;
  j["Checkpoint steps"] = c.checkpoint_steps;
  j["Sampling steps"] = t.sampling_steps;
  j["Eta"] = t.eta;
  j["Sampler seed"] = m.task_seed;
  j["Num. generations"] = t.num_generations;
  j["Shift"] = m.shift;
  j["Use group reward"] = true;
  j["Ignore last step"] = t.ignore_last_step;
  j["Clip range"] = t.clip_range;
  j["Adv. clip max"] = t.adv_clip_max;
  j["Use EMA"] = t.use_ema;
  j["EMA decay"] = t.ema_decay;
  j["Init same noise"] = t.init_same_noise;
  j["allocation"] = allocation_mode_name(c.setup.allocation);
  j["allocation_warmup"] = t.warmup_iters;
  j["exploration"] = exploration_spec(c.setup.exploration, c.setup.fixed_schedule);
  j["base_entropy"] = base_entropy_mode_name(c.setup.base_entropy);
  j["k_peaks"] = t.k_peaks;
  j["rewards"] = rewards;
  j["model"] = {{"num_features", m.num_features},
                {"dim", m.dim},
                {"num_tokens", m.num_tokens},
                {"num_layers", m.num_layers},
                {"mlp_hidden", m.mlp_hidden},
                {"selected_layers", m.selected_layers},
                {"query_gain", m.query_gain},
                {"layout_scale", m.layout_scale},
                {"base_layout_strength", m.base_layout_strength},
                {"value_gain", m.value_gain},
                {"init_noise", m.init_noise}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  static const std::set<std::string> known{
      "experiment", "output_dir", "iterations", "metrics_flush_interval", "train_prompts", "eval_prompts",
      "eval_interval", "eval_seed", "base_seed", "Random seed", "Train batch size", "Dataloader workers",
      "Learning rate", "Weight decay", "Max grad norm", "Grad. accum. steps", "Warmup steps", "Checkpoint steps",
      "Sampling steps", "Eta", "Sampler seed", "Num. generations", "Shift", "Use group reward", "Ignore last step",
      "Clip range", "Adv. clip max", "Use EMA", "EMA decay", "Init same noise", "allocation", "allocation_warmup",
      "exploration", "base_entropy", "k_peaks", "rewards", "model"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }

  RunConfig c = desk_config();
  TrainConfig& t = c.setup.train;
  DenoiserConfig& m = c.setup.model;
  std::string out_dir = c.output_dir.string();
  read(j, "experiment", c.experiment);
  read(j, "output_dir", out_dir);
  c.output_dir = out_dir;
  read(j, "iterations", c.iterations);
  read(j, "metrics_flush_interval", c.metrics_flush_interval);
  read(j, "train_prompts", c.train_prompts);
  read(j, "eval_prompts", c.eval_prompts);
  read(j, "eval_interval", c.eval_interval);
  read(j, "eval_seed", c.eval_seed);
  read(j, "base_seed", c.base_seed);
  read(j, "Random seed", t.seed);
  read(j, "Train batch size", c.batch_size);
  read(j, "Dataloader workers", c.setup.num_workers);
  read(j, "Learning rate", t.learning_rate);
  read(j, "Weight decay", t.weight_decay);
  read(j, "Max grad norm", t.max_grad_norm);
  read(j, "Grad. accum. steps", t.grad_accum_steps);
  read(j, "Warmup steps", t.lr_warmup_iters);
  read(j, "Checkpoint steps", c.checkpoint_steps);
  read(j, "Sampling steps", t.sampling_steps);
  read(j, "Eta", t.eta);
  read(j, "Sampler seed", m.task_seed);
  read(j, "Num. generations", t.num_generations);
  read(j, "Shift", m.shift);
  bool group_reward = true;
  read(j, "Use group reward", group_reward);
  if (!group_reward) throw std::invalid_argument("config: only group-relative rewards are supported");
  read(j, "Ignore last step", t.ignore_last_step);
  read(j, "Clip range", t.clip_range);
  read(j, "Adv. clip max", t.adv_clip_max);
  read(j, "Use EMA", t.use_ema);
  read(j, "EMA decay", t.ema_decay);
  read(j, "Init same noise", t.init_same_noise);
  std::string s;
  if (j.contains("allocation")) {
    read(j, "allocation", s);
    c.setup.allocation = parse_allocation_mode(s);
  }
  read(j, "allocation_warmup", t.warmup_iters);
  if (j.contains("exploration")) {
    read(j, "exploration", s);
    parse_exploration_spec(s, c.setup.exploration, c.setup.fixed_schedule);
  }
  if (j.contains("base_entropy")) {
    read(j, "base_entropy", s);
    c.setup.base_entropy = parse_base_entropy_mode(s);
  }
  read(j, "k_peaks", t.k_peaks);
  if (j.contains("rewards")) {
    const json& rs = j.at("rewards");
    if (!rs.is_array()) throw std::invalid_argument("config: rewards must be an array");
    c.setup.rewards.clear();
    for (const auto& r : rs) {
      RewardSpec spec;
      std::string kind;
      read(r, "kind", kind);
      spec.kind = parse_reward_kind(kind);
      spec.name = kind;
      read(r, "name", spec.name);
      read(r, "weight", spec.weight);
      if (!std::isfinite(spec.weight)) throw std::invalid_argument("config: reward weight must be finite");
      c.setup.rewards.push_back(std::move(spec));
    }
  }
  if (j.contains("model")) {
    const json& mj = j.at("model");
    static const std::set<std::string> model_keys{"num_features", "dim", "num_tokens", "num_layers",
                                                  "mlp_hidden", "selected_layers", "query_gain", "layout_scale",
                                                  "base_layout_strength", "value_gain", "init_noise"};
    for (const auto& [key, _] : mj.items()) {
      if (!model_keys.contains(key)) throw std::invalid_argument("config: unknown model key '" + key + "'");
    }
    read(mj, "num_features", m.num_features);
    read(mj, "dim", m.dim);
    read(mj, "num_tokens", m.num_tokens);
    read(mj, "num_layers", m.num_layers);
    read(mj, "mlp_hidden", m.mlp_hidden);
    read(mj, "selected_layers", m.selected_layers);
    read(mj, "query_gain", m.query_gain);
    read(mj, "layout_scale", m.layout_scale);
    read(mj, "base_layout_strength", m.base_layout_strength);
    read(mj, "value_gain", m.value_gain);
    read(mj, "init_noise", m.init_noise);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

std::vector<PromptSpec> train_prompt_pool(const RunConfig& cfg) {
  const DenoiserConfig model = cfg.setup.effective_model();
  std::vector<PromptSpec> pool;
  pool.reserve(static_cast<std::size_t>(cfg.train_prompts));
  for (int i = 0; i < cfg.train_prompts; ++i) pool.push_back(make_prompt(model, i));
  return pool;
}

std::vector<PromptSpec> eval_prompt_set(const DenoiserConfig& model, int count) {
  std::vector<PromptSpec> set;
  for (int i = 0; i < count; ++i) set.push_back(make_prompt(model, kEvalPromptOffset + i));
  return set;
}

std::vector<std::size_t> sample_batch(std::size_t pool_size, std::size_t batch_size, std::uint64_t seed,
                                      int iteration) {
  if (batch_size > pool_size) throw std::invalid_argument("sample_batch: batch larger than pool");
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(Rng::derive(Rng::derive(seed, kBatchStream), static_cast<std::uint64_t>(iteration)));
  for (std::size_t i = 0; i < batch_size; ++i) std::swap(idx[i], idx[i + rng.below(pool_size - i)]);
  idx.resize(batch_size);
  return idx;
}

json metrics_record(const IterationMetrics& m, long long cumulative_rollouts, std::optional<double> eval_reward) {
  json prompts = json::array();
  for (const auto& p : m.prompts) {
    prompts.push_back({{"prompt_id", p.prompt_id},
                       {"value", p.value},
                       {"tier", tier_name(p.tier)},
                       {"rollouts", p.rollouts},
                       {"peaks", p.peaks},
                       {"reward_mean", p.reward_mean},
                       {"reward_std", p.reward_std},
                       {"mpd", p.mpd},
                       {"kl_vs_base", p.kl_vs_base}});
  }
  json j;
  j["iteration"] = m.iteration;
  j["warmup"] = m.warmup;
  j["median"] = m.median;
  j["reward_mean"] = m.reward_mean;
  j["reward_std"] = m.reward_std;
  j["kl_vs_base"] = m.kl_vs_base;
  j["diversity"] = m.diversity;
  j["loss"] = m.loss;
  j["grad_norm"] = m.grad_norm;
  j["updates"] = m.updates;
  j["rollouts"] = m.rollouts;
  j["cumulative_rollouts"] = cumulative_rollouts;
  j["forward_steps"] = m.forward_steps;
  j["budget_deviation"] = m.budget_deviation;
  j["eval_reward"] = eval_reward ? json(*eval_reward) : json(nullptr);
  j["prompts"] = prompts;
  return j;
}

std::size_t validate_metrics_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics file " + path.string() + " cannot be opened");
  static const char* const required[] = {"iteration", "warmup", "median", "reward_mean", "reward_std",
                                         "kl_vs_base", "diversity", "loss", "grad_norm", "updates",
                                         "rollouts", "cumulative_rollouts", "forward_steps",
                                         "budget_deviation", "eval_reward", "prompts"};
  static const char* const prompt_fields[] = {"prompt_id", "value", "tier", "rollouts", "peaks",
                                              "reward_mean", "reward_std", "mpd", "kl_vs_base"};
  std::string line;
  std::size_t count = 0;
  long long last = -1;
  while (std::getline(in, line)) {
    const std::string where = path.string() + ":" + std::to_string(count + 1);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(where + ": not JSON: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(where + ": record is not an object");
    for (const char* key : required) {
      if (!j.contains(key)) throw std::runtime_error(where + ": missing field '" + key + "'");
    }
    if (!j["iteration"].is_number_integer()) throw std::runtime_error(where + ": iteration is not an integer");
    const auto it = j["iteration"].get<long long>();
    if (it <= last) throw std::runtime_error(where + ": iteration " + std::to_string(it) + " is not increasing");
    last = it;
    if (!j["prompts"].is_array()) throw std::runtime_error(where + ": prompts is not an array");
    for (const auto& p : j["prompts"]) {
      for (const char* key : prompt_fields) {
        if (!p.contains(key)) throw std::runtime_error(where + ": prompt record missing '" + key + "'");
      }
    }
    ++count;
  }
  return count;
}

RunResult run_training(const RunConfig& cfg, const std::function<void(const IterationMetrics&)>& on_iteration) {
  cfg.validate();
  const DenoiserConfig model = cfg.setup.effective_model();
  const std::vector<PromptSpec> pool = train_prompt_pool(cfg);
  const std::vector<PromptSpec> eval_set = eval_prompt_set(model, cfg.eval_prompts);

  Trainer trainer(cfg.setup, init_params(model, cfg.base_seed));
  RunResult result;

  const std::filesystem::path dir = cfg.resolved_output_dir();
  std::ofstream metrics_out;
  std::ofstream timing_out;
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << '\n';
    metrics_out.open(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    timing_out.open(dir / "timing.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics_out || !timing_out) throw std::runtime_error("cannot write to output directory " + dir.string());
  }

  auto evaluate_now = [&] {
    const DenoiserParams& p = trainer.policy();
    return evaluate_policy(model, p, eval_set, cfg.setup.rewards, cfg.eval_seed);
  };
  result.evals.push_back({0, 0, evaluate_now()});

  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<PromptSpec> batch;
    for (std::size_t i : sample_batch(pool.size(), static_cast<std::size_t>(cfg.batch_size), cfg.setup.train.seed, it)) {
      batch.push_back(pool[i]);
    }
    IterationMetrics m = trainer.train_iteration(batch);
    const int done = it + 1;
    std::optional<double> eval;
    if (done % cfg.eval_interval == 0 || done == cfg.iterations) {
      eval = evaluate_now();
      result.evals.push_back({done, trainer.total_rollouts(), *eval});
    }
    if (metrics_out.is_open()) {
      metrics_out << metrics_record(m, trainer.total_rollouts(), eval).dump() << '\n';
      timing_out << json{{"iteration", m.iteration}, {"wall_ms", m.wall_ms}}.dump() << '\n';
      if (done % cfg.metrics_flush_interval == 0) {
        metrics_out.flush();
        timing_out.flush();
      }
      if (done % cfg.checkpoint_steps == 0) {
        char name[32];
        std::snprintf(name, sizeof(name), "checkpoint-%06d.bin", done);
        save_checkpoint(dir / name, trainer.policy());
      }
    }
    if (on_iteration) on_iteration(m);
    result.metrics.push_back(std::move(m));
  }
  if (metrics_out.is_open()) {
    save_checkpoint(dir / "final.bin", trainer.policy());
    if (trainer.ema()) save_checkpoint(dir / "ema.bin", *trainer.ema());
  }
  result.policy = trainer.policy();
  result.ema = trainer.ema();
  result.base = trainer.base();
  result.total_rollouts = trainer.total_rollouts();
  return result;
}

std::vector<StrategyStats> compare_schedules(const DenoiserConfig& model, const DenoiserParams& params,
                                             const std::vector<RewardSpec>& rewards, std::size_t num_prompts,
                                             std::size_t g, std::size_t k, std::uint64_t seed) {
  if (num_prompts == 0) throw std::invalid_argument("compare_schedules: need at least one prompt");
  if (g < 2) throw std::invalid_argument("compare_schedules: need at least two leaves per group");
  std::vector<StrategyStats> rows;
  rows.push_back({"entropy-guided", {}, 0.0, 0.0});
  for (const auto& s : kFixedSchedules) rows.push_back({exploration_spec(ExplorationMode::kFixed, s), s, 0.0, 0.0});

  for (std::size_t i = 0; i < num_prompts; ++i) {
    const std::uint64_t ps = Rng::derive(seed, i);
    const PromptSpec prompt = make_prompt(model, static_cast<std::int64_t>(ps >> 2));
    Rng noise_rng(Rng::derive(ps, 1));
    const Tensor noise = sample_noise(model, noise_rng);
    Rng probe_rng(Rng::derive(ps, 2));
    const Trajectory probe = rollout(model, params, prompt, noise, probe_rng);
    const PeakSet peaks = detect_peaks(entropy_trajectory(probe), k);
    const std::uint64_t tree_seed = Rng::derive(ps, 3);
    for (auto& row : rows) {
      const RolloutTree tree =
          row.schedule.empty() ? branch_rollout(model, params, prompt, noise, peaks, g, tree_seed)
                               : fixed_schedule_rollout(model, params, prompt, noise, row.schedule, g, tree_seed);
      const RewardMatrix r = reward_vector(rewards, tree.leaves, prompt);
      std::vector<double> combined;
      for (const auto& rr : r) combined.push_back(combined_reward(rewards, rr));
      const DiversityMetrics d = diversity_metrics(tree.leaves, combined);
      row.reward_std += d.group_std;
      row.mpd += d.mpd;
    }
  }
  for (auto& row : rows) {
    row.reward_std /= static_cast<double>(num_prompts);
    row.mpd /= static_cast<double>(num_prompts);
  }
  return rows;
}

std::vector<ProfileRow> entropy_profile(const DenoiserConfig& model, const DenoiserParams& current,
                                        const DenoiserParams& base, const std::vector<PromptSpec>& prompts,
                                        BaseEntropyMode mode, std::uint64_t seed) {
  std::vector<ProfileRow> rows;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::uint64_t ps = Rng::derive(seed, i);
    Rng noise_rng(Rng::derive(ps, 1));
    Rng step_rng(Rng::derive(ps, 2));
    const Trajectory traj = rollout(model, current, prompts[i], sample_noise(model, noise_rng), step_rng);
    const ValueProbe probe = probe_value(model, base, prompts[i], traj, mode, Rng::derive(ps, 4));
    for (std::size_t s = 0; s < probe.current.values.size(); ++s) {
      rows.push_back({prompts[i].prompt_id, s, probe.current.values[s], probe.value.per_step[s]});
    }
  }
  return rows;
}

double early_mass_fraction(const std::vector<ProfileRow>& rows, std::size_t steps) {
  double early = 0.0;
  double total = 0.0;
  for (const auto& r : rows) {
    total += r.delta_entropy;
    if (r.step < steps / 2) early += r.delta_entropy;
  }
  return total > 0.0 ? early / total : 0.0;
}

double sign_test_p(int wins, int n) {
  if (n < 0 || wins < 0 || wins > n) throw std::invalid_argument("sign_test_p: need 0 <= wins <= n");
  double p = 0.0;
  for (int x = wins; x <= n; ++x) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(x + 1.0) - std::lgamma(n - x + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

std::optional<EvalPoint> first_reaching(const std::vector<EvalPoint>& curve, double target) {
  for (const auto& p : curve) {
    if (p.reward >= target) return p;
  }
  return std::nullopt;
}

}  // namespace aegpo
