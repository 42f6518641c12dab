#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "aegpo/gradcheck.hpp"
#include "aegpo/harness.hpp"

using namespace aegpo;

namespace {

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? desk_config() : load_run_config(path);
}

DenoiserParams params_for(const RunConfig& cfg, const std::string& checkpoint) {
  const DenoiserConfig model = cfg.setup.effective_model();
  if (checkpoint.empty()) return init_params(model, cfg.base_seed);
  DenoiserParams p = load_checkpoint(checkpoint);
  if (p.num_layers != model.num_layers) throw std::invalid_argument("checkpoint does not match the config's model");
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy-guided GRPO on a toy cross-attention flow denoiser"};
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::string output;
  int prompts = 64;
  int generations = 16;
  int peaks = 4;
  std::uint64_t data_seed = 7;

  auto* train = app.add_subcommand("train", "Run the training loop described by a config");
  train->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override \"Random seed\"");
  train->add_option("--iterations", iterations, "Override the iteration count");
  train->add_option("--output", output, "Override the output directory");

  auto* eval = app.add_subcommand("eval", "Mean reward of a checkpoint on the eval prompts");
  eval->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file (default: base model)")->check(CLI::ExistingFile);
  eval->add_option("--prompts", prompts, "Number of eval prompts")->check(CLI::PositiveNumber);
  eval->add_option("--seed", data_seed, "Noise seed");

  auto* profile = app.add_subcommand("entropy-profile", "Tab-separated Entropy(t) and delta entropy per step");
  profile->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  profile->add_option("--checkpoint", checkpoint, "Current policy (default: base model)")->check(CLI::ExistingFile);
  profile->add_option("--prompts", prompts, "Number of prompts")->check(CLI::PositiveNumber);
  profile->add_option("--seed", data_seed, "Noise seed");

  auto* compare = app.add_subcommand("compare-schedules", "Entropy-guided branching against fixed schedules");
  compare->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  compare->add_option("--checkpoint", checkpoint, "Policy to branch (default: base model)")->check(CLI::ExistingFile);
  compare->add_option("--prompts", prompts, "Number of prompts")->check(CLI::PositiveNumber);
  compare->add_option("--generations", generations, "Leaves per tree")->check(CLI::Range(2, 1024));
  compare->add_option("--peaks", peaks, "Branch points per tree")->check(CLI::PositiveNumber);
  compare->add_option("--seed", data_seed, "Prompt and noise seed");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  gradcheck->add_option("--seed", data_seed, "Input seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      RunConfig cfg = config_or_default(config_path);
      if (seed) cfg.setup.train.seed = *seed;
      if (iterations) cfg.iterations = *iterations;
      if (!output.empty()) cfg.output_dir = output;
      cfg.validate();
      const RunResult r = run_training(cfg, [&](const IterationMetrics& m) {
        std::fprintf(stderr, "iter %d reward %.5f std %.5f kl %.3g rollouts %lld\n", m.iteration, m.reward_mean,
                     m.reward_std, m.kl_vs_base, m.rollouts);
      });
      std::printf("final_eval_reward\t%.9g\ntotal_rollouts\t%lld\n", r.evals.back().reward, r.total_rollouts);
      const auto dir = cfg.resolved_output_dir();
      if (!dir.empty()) std::printf("output\t%s\n", dir.string().c_str());
    } else if (*eval) {
      const RunConfig cfg = config_or_default(config_path);
      const DenoiserConfig model = cfg.setup.effective_model();
      const DenoiserParams p = params_for(cfg, checkpoint);
      const auto set = eval_prompt_set(model, prompts);
      std::printf("mean_reward\t%.9g\n", evaluate_policy(model, p, set, cfg.setup.rewards, data_seed));
    } else if (*profile) {
      const RunConfig cfg = config_or_default(config_path);
      const DenoiserConfig model = cfg.setup.effective_model();
      const DenoiserParams current = params_for(cfg, checkpoint);
      const DenoiserParams base = init_params(model, cfg.base_seed);
      std::printf("prompt_id\tstep\tentropy\tdelta_entropy\n");
      for (const auto& row :
           entropy_profile(model, current, base, eval_prompt_set(model, prompts), cfg.setup.base_entropy, data_seed)) {
        std::printf("%lld\t%zu\t%.9g\t%.9g\n", static_cast<long long>(row.prompt_id), row.step, row.entropy,
                    row.delta_entropy);
      }
    } else if (*compare) {
      const RunConfig cfg = config_or_default(config_path);
      const DenoiserConfig model = cfg.setup.effective_model();
      const DenoiserParams p = params_for(cfg, checkpoint);
      std::printf("strategy\treward_std\tmpd\n");
      for (const auto& row : compare_schedules(model, p, cfg.setup.rewards, static_cast<std::size_t>(prompts),
                                               static_cast<std::size_t>(generations),
                                               static_cast<std::size_t>(peaks), data_seed)) {
        std::printf("%s\t%.9g\t%.9g\n", row.name.c_str(), row.reward_std, row.mpd);
      }
    } else if (*gradcheck) {
      double worst = 0.0;
      for (const auto& r : run_gradcheck_suite(data_seed)) {
        std::printf("%-22s entries %4zu  max_rel_error %.3e\n", r.name.c_str(), r.entries, r.max_rel_error);
        worst = std::max(worst, r.max_rel_error);
      }
      std::printf("max_rel_error\t%.3e\n", worst);
      return worst < 1e-4 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
