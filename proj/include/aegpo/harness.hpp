#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aegpo/grpo.hpp"

namespace aegpo {

/// Environment variable that replaces the configured output directory.
inline constexpr const char* kOutputDirEnv = "AEGPO_OUTPUT_DIR";

/// The four fixed branching schedules used as baselines for entropy-guided branching.
inline const std::vector<std::vector<std::size_t>> kFixedSchedules{
    {0, 2, 4, 8}, {0, 3, 6, 9}, {0, 4, 8, 12}, {0, 5, 10, 15}};

/// Everything one training run needs. Serialized as a flat JSON object whose optimizer and
/// sampler keys use the reference hyperparameter names ("Learning rate", "Eta", ...).
struct RunConfig {
  std::string experiment = "default";
  std::filesystem::path output_dir;
  int iterations = 200;
  int batch_size = 8;
  int checkpoint_steps = 40;
  int metrics_flush_interval = 1;
  /// Training prompts are drawn from ids [0, train_prompts).
  int train_prompts = 64;
  int eval_prompts = 32;
  int eval_interval = 10;
  std::uint64_t eval_seed = 7;
  /// Seed of the structured base ("pretrained") parameters.
  std::uint64_t base_seed = 7;
  TrainerSetup setup;

  void validate() const;
  /// output_dir, unless kOutputDirEnv is set.
  std::filesystem::path resolved_output_dir() const;
};

/// Desk-scale defaults: batch 8, 200 iterations, checkpoints every 40, r_avg 12, K 4.
RunConfig desk_config();

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys and invalid values throw std::invalid_argument.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// "entropy", "independent" or "fixed:0,2,4,8".
std::string exploration_spec(ExplorationMode mode, const std::vector<std::size_t>& schedule);
void parse_exploration_spec(const std::string& spec, ExplorationMode& mode, std::vector<std::size_t>& schedule);

std::vector<PromptSpec> train_prompt_pool(const RunConfig& cfg);
std::vector<PromptSpec> eval_prompt_set(const DenoiserConfig& model, int count);
/// Batch of distinct pool indices for one iteration; depends only on (seed, iteration).
std::vector<std::size_t> sample_batch(std::size_t pool_size, std::size_t batch_size, std::uint64_t seed,
                                      int iteration);

/// One metrics.jsonl line. wall_ms is deliberately absent so identical runs write identical bytes.
nlohmann::json metrics_record(const IterationMetrics& m, long long cumulative_rollouts,
                              std::optional<double> eval_reward);

/// Checks that every line is a JSON object with the required fields and strictly increasing
/// iteration numbers. Returns the record count; throws std::runtime_error naming the bad line.
std::size_t validate_metrics_file(const std::filesystem::path& path);

struct EvalPoint {
  int iteration = 0;  // completed iterations
  long long rollouts = 0;  // cumulative
  double reward = 0.0;
};

struct RunResult {
  std::vector<IterationMetrics> metrics;
  std::vector<EvalPoint> evals;
  DenoiserParams policy;
  std::optional<DenoiserParams> ema;
  DenoiserParams base;
  long long total_rollouts = 0;
};

/// Trains for cfg.iterations. When the resolved output directory is non-empty it receives
/// config.json, metrics.jsonl, timing.jsonl, periodic checkpoints and final.bin.
RunResult run_training(const RunConfig& cfg, const std::function<void(const IterationMetrics&)>& on_iteration = {});

struct StrategyStats {
  std::string name;
  std::vector<std::size_t> schedule;  // empty for entropy-guided
  double reward_std = 0.0;
  double mpd = 0.0;
};

/// Exploration value of entropy-guided branching against kFixedSchedules. Every strategy sees the
/// same prompts, initial noise and per-node seeds; only the branch steps differ.
std::vector<StrategyStats> compare_schedules(const DenoiserConfig& model, const DenoiserParams& params,
                                             const std::vector<RewardSpec>& rewards, std::size_t num_prompts,
                                             std::size_t g, std::size_t k, std::uint64_t seed);

struct ProfileRow {
  std::int64_t prompt_id = 0;
  std::size_t step = 0;
  double entropy = 0.0;
  double delta_entropy = 0.0;
};

/// Entropy(t) and delta entropy per step of one rollout of `current` per prompt.
std::vector<ProfileRow> entropy_profile(const DenoiserConfig& model, const DenoiserParams& current,
                                        const DenoiserParams& base, const std::vector<PromptSpec>& prompts,
                                        BaseEntropyMode mode, std::uint64_t seed);

/// Share of the summed delta entropy that falls in the first half of the steps.
double early_mass_fraction(const std::vector<ProfileRow>& rows, std::size_t steps);

/// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
double sign_test_p(int wins, int n);

/// First completed iteration whose eval reward reaches `target`, if any.
std::optional<EvalPoint> first_reaching(const std::vector<EvalPoint>& curve, double target);

}  // namespace aegpo
