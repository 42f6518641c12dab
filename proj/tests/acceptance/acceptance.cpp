// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Exit status is non-zero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aegpo/allocation.hpp"
#include "aegpo/entropy.hpp"
#include "aegpo/exploration.hpp"
#include "aegpo/gradcheck.hpp"
#include "aegpo/grpo.hpp"
#include "aegpo/harness.hpp"

using namespace aegpo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  double limit_s;  // 0 means no runtime bound
  std::function<Outcome()> run;
};

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

RunConfig seeded(RunConfig c, std::uint64_t seed) {
  c.setup.train.seed = seed;
  c.output_dir.clear();
  return c;
}

Outcome entropy_suite() {
  bool ok = true;
  std::ostringstream why;
  const DenoiserConfig cfg;
  AttentionRecord uniform;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    uniform.maps.push_back(Tensor::matrix(cfg.num_features, cfg.num_tokens, 1.0 / static_cast<double>(cfg.num_tokens)));
    uniform.selected_layers.push_back(l);
  }
  const double eu = entropy_t(uniform);
  if (std::abs(eu - std::log2(static_cast<double>(cfg.num_tokens))) > 1e-9) {
    ok = false;
    why << " uniform=" << eu;
  }
  AttentionRecord onehot = uniform;
  for (auto& m : onehot.maps) {
    m = Tensor::matrix(cfg.num_features, cfg.num_tokens);
    for (std::size_t i = 0; i < cfg.num_features; ++i) m.at(i, i % cfg.num_tokens) = 1.0;
  }
  if (entropy_t(onehot) != 0.0) {
    ok = false;
    why << " one-hot=" << entropy_t(onehot);
  }
  const DenoiserParams params = init_params(cfg, 7);
  const double hi = std::log2(static_cast<double>(cfg.num_tokens));
  std::size_t checked = 0;
  for (int i = 0; i < 100; ++i) {
    Rng rng(Rng::derive(11, static_cast<std::uint64_t>(i)));
    const Trajectory t = rollout(cfg, params, make_prompt(cfg, i), sample_noise(cfg, rng), rng);
    const EntropyTrajectory e = entropy_trajectory(t);
    if (delta_entropy(e, e).delta_entropy != 0.0) {
      ok = false;
      why << " delta(a,a)!=0";
    }
    for (double v : e.values) {
      ++checked;
      if (!(v >= 0.0 && v <= hi + 1e-12)) {
        ok = false;
        why << " out-of-bounds " << v;
      }
    }
  }
  return {ok, "uniform=" + fmt("%.12f", eu) + " log2(T_tok)=" + fmt("%.12f", hi) + ", " + std::to_string(checked) +
                  " step entropies in bounds" + why.str()};
}

Outcome gradient_checks() {
  double worst = 0.0;
  std::string worst_name;
  const auto results = run_gradcheck_suite(42);
  for (const auto& r : results) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  return {worst < 1e-4, std::to_string(results.size()) + " checks, max rel error " + fmt("%.3e", worst) + " (" +
                            worst_name + ")"};
}

Outcome budget_conservation() {
  const AllocationConfig ac = AllocationConfig::from_average(12);
  bool ok = ac.r_low == 8 && ac.r_high == 16;
  Rng rng(3);
  int bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b = 2 * (1 + rng.below(32));
    std::vector<SampleValue> v(b);
    for (std::size_t i = 0; i < b; ++i) {
      // Coarse quantization forces frequent median ties.
      v[i] = {static_cast<std::int64_t>(i), std::floor(rng.uniform() * 6.0) / 6.0, {}};
    }
    if (allocate(v, ac, ac.warmup_iters).total() != static_cast<long long>(b) * 12) ++bad;
  }
  ok = ok && bad == 0;
  return {ok, "(r_low, r_high)=(" + std::to_string(ac.r_low) + "," + std::to_string(ac.r_high) + "), " +
                  std::to_string(1000 - bad) + "/1000 batches conserve b*r_avg"};
}

Outcome branching_correctness() {
  const DenoiserConfig cfg;
  const DenoiserParams params = init_params(cfg, 7);
  int trees = 0, bad = 0;
  for (std::size_t g = 1; g <= 32; ++g) {
    for (std::size_t k = 1; k <= 4; ++k) {
      const PromptSpec prompt = make_prompt(cfg, static_cast<std::int64_t>(100 * g + k));
      Rng rng(Rng::derive(g, k));
      const Tensor noise = sample_noise(cfg, rng);
      const Trajectory probe = rollout(cfg, params, prompt, noise, rng);
      const PeakSet peaks = detect_peaks(entropy_trajectory(probe), k);
      const std::set<std::size_t> allowed(peaks.steps.begin(), peaks.steps.end());
      const RolloutTree t = branch_rollout(cfg, params, prompt, noise, peaks, g, Rng::derive(99, g * 8 + k));
      ++trees;
      bool ok = t.leaves.size() == g;
      for (std::size_t s : t.split_steps) ok = ok && allowed.contains(s);
      for (std::size_t a = 0; ok && a < t.leaves.size(); ++a) {
        for (std::size_t b = a + 1; ok && b < t.leaves.size(); ++b) {
          std::size_t s = 0;
          while (s < cfg.sampling_steps && t.step_owner[a][s] == t.step_owner[b][s]) {
            ok = ok && t.leaves[a].states[s + 1].data == t.leaves[b].states[s + 1].data;
            ++s;
          }
          ok = ok && s < cfg.sampling_steps && allowed.contains(s);
          ok = ok && t.leaves[a].states[0].data == t.leaves[b].states[0].data;
        }
      }
      bad += !ok;
    }
  }
  return {bad == 0, std::to_string(trees - bad) + "/" + std::to_string(trees) +
                        " trees with exact leaf count, peak-only branch points and identical shared prefixes"};
}

Outcome advantage_oracle() {
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t g = 2 + rng.below(31);
    const std::size_t m = 1 + rng.below(3);
    RewardMatrix r(g, std::vector<double>(m));
    for (auto& row : r) {
      for (double& x : row) x = rng.normal() * 3.0;
    }
    const AdvantageSet a = group_advantages(r, 1e300);
    for (std::size_t j = 0; j < g; ++j) {
      double expected = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        double mu = 0.0;
        for (std::size_t i = 0; i < g; ++i) mu += r[i][k];
        mu /= static_cast<double>(g);
        double var = 0.0;
        for (std::size_t i = 0; i < g; ++i) var += (r[i][k] - mu) * (r[i][k] - mu);
        expected += (r[j][k] - mu) / std::sqrt(var / static_cast<double>(g));
      }
      worst = std::max(worst, std::abs(expected - a.advantages[j]));
    }
  }
  const AdvantageSet flat = group_advantages(RewardMatrix(6, std::vector<double>{0.25}), 5.0);
  const bool guard = std::all_of(flat.advantages.begin(), flat.advantages.end(), [](double v) { return v == 0.0; });
  return {worst <= 1e-9 && guard,
          "max |diff| " + fmt("%.3e", worst) + " over 1000 groups, zero-variance guard " + (guard ? "ok" : "BROKEN")};
}

Outcome clipped_objective_oracle() {
  Rng rng(6);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double lr = (rng.uniform() - 0.5) * 1.5;
    const double a = rng.normal() * 2.0;
    const double eps = 1e-4 + 0.5 * rng.uniform();
    const double rho = std::exp(lr);
    const double direct = -std::min(rho * a, std::clamp(rho, 1.0 - eps, 1.0 + eps) * a);
    Tape tape;
    const std::vector<std::vector<Var>> ratios{{tape.constant(Tensor::scalar(lr))}};
    const std::vector<double> adv{a};
    mismatches += clipped_objective(tape, adv, ratios, eps).value().item() != direct;
  }
  Tape tape;
  const std::vector<double> adv{1.5, -0.5, 0.25, -2.0};
  std::vector<std::vector<Var>> ratios(adv.size());
  for (auto& leaf : ratios) {
    for (int s = 0; s < 3; ++s) leaf.push_back(tape.constant(Tensor::scalar(0.0)));
  }
  const double at_one = clipped_objective(tape, adv, ratios, 1e-4).value().item();
  const double neg_mean = -std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(adv.size());
  return {mismatches == 0 && at_one == neg_mean, std::to_string(1000 - mismatches) +
                                                     "/1000 exact matches, loss at rho=1 " + fmt("%.6f", at_one) +
                                                     " vs -mean(A) " + fmt("%.6f", neg_mean)};
}

Outcome high_entropy_subset() {
  constexpr int kN = 150;
  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed : kSeeds) {
    RunConfig base = desk_config();
    base.iterations = kN;
    RunConfig hi = seeded(base, seed);
    hi.setup.allocation = AllocationMode::kHighOnly;
    RunConfig rnd = seeded(base, seed);
    rnd.setup.allocation = AllocationMode::kRandomHalf;
    RunConfig lo = seeded(base, seed);
    lo.setup.allocation = AllocationMode::kLowOnly;
    const RunResult rh = run_training(hi);
    const RunResult rr = run_training(rnd);
    const RunResult rl = run_training(lo);
    const double target = rr.evals.back().reward;
    const auto reach = first_reaching(rh.evals, target);
    const bool win = reach.has_value() && reach->iteration <= kN;
    wins += win;
    detail << " s" << seed << ":hi=" << fmt("%.4f", rh.evals.back().reward) << "/rand=" << fmt("%.4f", target)
           << "/lo=" << fmt("%.4f", rl.evals.back().reward) << "@" << (reach ? std::to_string(reach->iteration) : "-");
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds high-only reaches random-half iter-" + std::to_string(kN) +
                         " reward within " + std::to_string(kN) + " iters;" + detail.str()};
}

Outcome schedule_comparison() {
  const RunConfig c = desk_config();
  const DenoiserConfig model = c.setup.effective_model();
  const DenoiserParams params = init_params(model, c.base_seed);
  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed : kSeeds) {
    const auto rows = compare_schedules(model, params, c.setup.rewards, 64, 16, 4, seed);
    double best_std = 0.0, best_mpd = 0.0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      best_std = std::max(best_std, rows[i].reward_std);
      best_mpd = std::max(best_mpd, rows[i].mpd);
    }
    const bool win = rows[0].reward_std >= best_std && rows[0].mpd >= best_mpd;
    wins += win;
    detail << " s" << seed << ":std " << fmt("%.4f", rows[0].reward_std) << " vs " << fmt("%.4f", best_std) << ", mpd "
           << fmt("%.3f", rows[0].mpd) << " vs " << fmt("%.3f", best_mpd);
  }
  return {wins >= 3, std::to_string(wins) + "/5 seeds entropy-guided >= best fixed schedule on both;" + detail.str()};
}

Outcome convergence_speed() {
  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed : kSeeds) {
    RunConfig baseline = seeded(desk_config(), seed);
    baseline.setup.allocation = AllocationMode::kUniform;
    baseline.setup.exploration = ExplorationMode::kFixed;
    baseline.setup.fixed_schedule = kFixedSchedules[2];
    RunConfig full = seeded(desk_config(), seed);
    full.setup.allocation = AllocationMode::kAdaptive;
    full.setup.exploration = ExplorationMode::kEntropy;
    const RunResult b = run_training(baseline);
    const RunResult a = run_training(full);
    const double target = b.evals.back().reward;
    const auto reach = first_reaching(a.evals, target);
    const double frac = reach ? static_cast<double>(reach->rollouts) / static_cast<double>(b.total_rollouts) : INFINITY;
    wins += frac <= 0.75;
    detail << " s" << seed << ":target " << fmt("%.4f", target) << " aegpo-final " << fmt("%.4f", a.evals.back().reward)
           << " rollout-frac " << (reach ? fmt("%.3f", frac) : std::string("never"));
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds reach baseline final reward with <= 0.75x rollouts;" +
                         detail.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "aegpo_acceptance_determinism";
  fs::remove_all(root);
  RunConfig c = desk_config();
  c.iterations = 40;
  c.setup.train.seed = 42;
  for (const char* run : {"a", "b"}) {
    c.output_dir = root / run;
    run_training(c);
  }
  std::vector<std::string> compared;
  bool ok = true;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    const std::string name = entry.path().filename().string();
    if (name != "metrics.jsonl" && entry.path().extension() != ".bin") continue;
    compared.push_back(name);
    ok = ok && fs::exists(root / "b" / name) && slurp(entry.path()) == slurp(root / "b" / name);
  }
  std::sort(compared.begin(), compared.end());
  ok = ok && compared.size() >= 3;
  std::string names;
  for (const auto& n : compared) names += " " + n;
  fs::remove_all(root);
  return {ok, "byte-identical across two seed-42 runs:" + names};
}

Outcome profile_separation() {
  constexpr int kIters = 100;
  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed : kSeeds) {
    double frac[2] = {0.0, 0.0};
    const RewardKind kinds[2] = {RewardKind::kStructure, RewardKind::kSmoothness};
    for (int r = 0; r < 2; ++r) {
      RunConfig c = seeded(desk_config(), seed);
      c.iterations = kIters;
      c.eval_interval = kIters;
      c.setup.rewards = {{reward_kind_name(kinds[r]), kinds[r], 1.0}};
      const RunResult res = run_training(c);
      const DenoiserConfig model = c.setup.effective_model();
      const auto rows = entropy_profile(model, res.policy, res.base, eval_prompt_set(model, c.eval_prompts),
                                        c.setup.base_entropy, Rng::derive(seed, 11));
      frac[r] = early_mass_fraction(rows, model.sampling_steps);
    }
    wins += frac[0] > frac[1];
    detail << " s" << seed << ":" << fmt("%.4f", frac[0]) << " vs " << fmt("%.4f", frac[1]);
  }
  const double p = sign_test_p(wins, static_cast<int>(kSeeds.size()));
  return {p < 0.1, "structure early-mass > smoothness in " + std::to_string(wins) + "/5 seeds, sign-test p=" +
                       fmt("%.4f", p) + ";" + detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria runner"};
  std::vector<int> only;
  app.add_option("--only", only, "criterion ids to run (default: all)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, 1.0, entropy_suite},          {2, 30.0, gradient_checks},        {3, 1.0, budget_conservation},
      {4, 10.0, branching_correctness}, {5, 0.0, advantage_oracle},        {6, 0.0, clipped_objective_oracle},
      {7, 600.0, high_entropy_subset},  {8, 600.0, schedule_comparison},   {9, 900.0, convergence_speed},
      {10, 0.0, determinism},           {11, 0.0, profile_separation},
  };
  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0.0 || secs < c.limit_s;
    if (!in_time) o.detail += "; runtime limit exceeded";
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::string timing = fmt("%.2f s", secs);
    if (c.limit_s > 0.0) timing += ", limit " + fmt("%.0f s", c.limit_s);
    std::printf("criterion %d: %s  %s (%s)\n", c.id, pass ? "PASS" : "FAIL", o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
