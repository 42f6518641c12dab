#include "aegpo/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "aegpo/denoiser.hpp"
#include "aegpo/exploration.hpp"
#include "aegpo/grpo.hpp"
#include "aegpo/rng.hpp"

namespace aegpo {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradient(const std::string& name, const std::vector<Tensor>& inputs, const ScalarFn& fn,
                               double h, std::size_t max_entries) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.parameter(t));
    Var out = fn(tape, vars);
    tape.backward(out);
    for (Var v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : xs) vars.push_back(tape.constant(t));
    return fn(tape, vars).value().item();
  };

  GradCheckResult res;
  res.name = name;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].data.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
    for (std::size_t e = 0; e < n; e += stride) {
      const double x = inputs[i].data[e];
      probe[i].data[e] = x + h;
      const double up = eval(probe);
      probe[i].data[e] = x - h;
      const double down = eval(probe);
      probe[i].data[e] = x;
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[i].data[e], numeric));
      ++res.entries;
    }
  }
  return res;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Contracts a tensor-valued node with fixed random weights so every output entry matters.
Var weighted_sum(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  Var w = tape.constant(random_tensor(out.value().shape, rng));
  return sum(mul(out, w));
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  const std::uint64_t ws = Rng::derive(seed, 99);
  std::vector<GradCheckResult> out;
  auto unary = [&](const std::string& name, Tensor x, const std::function<Var(Var)>& op) {
    out.push_back(check_gradient(name, {std::move(x)}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, op(v[0]), ws);
    }));
  };
  auto binary = [&](const std::string& name, Tensor a, Tensor b, const std::function<Var(Var, Var)>& op) {
    out.push_back(check_gradient(name, {std::move(a), std::move(b)}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, op(v[0], v[1]), ws);
    }));
  };

  binary("matmul", random_tensor({3, 4}, rng), random_tensor({4, 5}, rng), [](Var a, Var b) { return matmul(a, b); });
  binary("matmul_bt", random_tensor({3, 4}, rng), random_tensor({5, 4}, rng),
         [](Var a, Var b) { return matmul_bt(a, b); });
  binary("add", random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), [](Var a, Var b) { return add(a, b); });
  binary("sub", random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), [](Var a, Var b) { return sub(a, b); });
  binary("mul", random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), [](Var a, Var b) { return mul(a, b); });
  binary("add_row", random_tensor({3, 4}, rng), random_tensor({1, 4}, rng),
         [](Var a, Var b) { return add_row(a, b); });
  unary("scale", random_tensor({3, 4}, rng), [](Var a) { return scale(a, -1.7); });
  unary("add_scalar", random_tensor({3, 4}, rng), [](Var a) { return add_scalar(a, 0.3); });
  unary("tanh", random_tensor({3, 4}, rng, -2.0, 2.0), [](Var a) { return tanh(a); });
  unary("exp", random_tensor({3, 4}, rng), [](Var a) { return exp(a); });
  unary("log", random_tensor({3, 4}, rng, 0.5, 2.0), [](Var a) { return log(a); });
  unary("square", random_tensor({3, 4}, rng), [](Var a) { return square(a); });
  unary("softmax_rows", random_tensor({3, 5}, rng, -2.0, 2.0), [](Var a) { return softmax_rows(a, 0.7); });
  unary("sum", random_tensor({3, 4}, rng), [](Var a) { return sum(a); });
  unary("mean", random_tensor({3, 4}, rng), [](Var a) { return mean(a); });
  // Inputs stay at least 0.05 away from the clamp bounds, where the derivative jumps.
  {
    Tensor x = random_tensor({4, 4}, rng, -1.0, 1.0);
    for (double& v : x.data) {
      if (std::abs(std::abs(v) - 0.5) < 0.05) v += 0.1;
    }
    unary("clamp", x, [](Var a) { return clamp(a, -0.5, 0.5); });
  }
  {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = a;
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] += (i % 2 == 0 ? 0.3 : -0.3);
    binary("minimum", a, b, [](Var x, Var y) { return minimum(x, y); });
  }
  unary("row", random_tensor({3, 4}, rng), [](Var a) { return row(a, 1); });
  unary("pick", random_tensor({3, 4}, rng), [](Var a) { return pick(a, 2, 3); });
  out.push_back(check_gradient("concat_scalars", {random_tensor({1, 1}, rng), random_tensor({1, 1}, rng)},
                               [&](Tape& t, const std::vector<Var>& v) {
                                 const Var parts[] = {v[0], square(v[1]), v[0]};
                                 return weighted_sum(t, concat_scalars(parts), ws);
                               }));
  {
    Tensor mean_t = random_tensor({4, 3}, rng);
    Tensor x = random_tensor({4, 3}, rng);
    out.push_back(check_gradient("gaussian_log_prob", {mean_t}, [&](Tape& t, const std::vector<Var>& v) {
      return gaussian_log_prob(v[0], t.constant(x), 0.4);
    }));
  }

  DenoiserConfig cfg;
  const DenoiserParams params = init_params(cfg, seed);
  const PromptSpec prompt = make_prompt(cfg, 3);
  Rng noise_rng(Rng::derive(seed, 1));
  const Tensor noise = sample_noise(cfg, noise_rng);
  auto param_fn = [&](const std::function<Var(Tape&, const ParamVars&)>& body) {
    return [&, body](Tape& t, const std::vector<Var>& v) {
      ParamVars pv{v};
      return body(t, pv);
    };
  };

  out.push_back(check_gradient("denoiser_step", params.tensors, param_fn([&](Tape& t, const ParamVars& pv) {
                                 TapeStep ts = forward_on_tape(t, cfg, params, pv, t.constant(noise), 5, prompt);
                                 return weighted_sum(t, ts.mean, ws);
                               }),
                               1e-5, 8));
  out.push_back(check_gradient("denoiser_state", {noise}, [&](Tape& t, const std::vector<Var>& v) {
    ParamVars pv = ParamVars::load(t, params, false);
    return weighted_sum(t, forward_on_tape(t, cfg, params, pv, v[0], 2, prompt).mean, ws);
  }));

  Rng traj_rng(Rng::derive(seed, 2));
  const Trajectory traj = rollout(cfg, params, prompt, noise, traj_rng);
  out.push_back(check_gradient("transition_log_prob", params.tensors, param_fn([&](Tape& t, const ParamVars& pv) {
                                 return log_prob_on_tape(t, cfg, params, pv, prompt, traj, 7);
                               }),
                               1e-5, 8));

  // Full objective: rollouts from a perturbed old policy so ratios differ from 1, some beyond the clip.
  DenoiserParams old = params;
  Rng perturb(Rng::derive(seed, 3));
  for (auto& t : old.tensors) {
    for (double& v : t.data) v += 0.002 * perturb.normal();
  }
  const PeakSet peaks = detect_peaks(entropy_trajectory(traj), 2);
  const RolloutTree tree = branch_rollout(cfg, old, prompt, noise, peaks, 4, Rng::derive(seed, 4));
  const std::vector<double> adv{1.3, -0.4, 0.6, -1.5};
  const double clip = 0.05;
  out.push_back(check_gradient("clipped_objective", params.tensors, param_fn([&](Tape& t, const ParamVars& pv) {
                                 std::vector<std::vector<Var>> ratios(tree.leaves.size());
                                 for (std::size_t j = 0; j < tree.leaves.size(); ++j) {
                                   for (std::size_t s = 0; s + 1 < cfg.sampling_steps; ++s) {
                                     Var lp = log_prob_on_tape(t, cfg, params, pv, prompt, tree.leaves[j], s);
                                     ratios[j].push_back(add_scalar(lp, -tree.leaves[j].log_probs[s]));
                                   }
                                 }
                                 return clipped_objective(t, adv, ratios, clip);
                               }),
                               1e-6, 4));
  return out;
}

}  // namespace aegpo
