#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aegpo/autodiff.hpp"

namespace aegpo {

/// Relative error with a floor on the denominator: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

/// Builds a scalar from leaves placed on the given tape.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares reverse-mode gradients of fn at `inputs` with central differences of step h.
/// At most `max_entries` entries per input are probed, evenly spaced.
GradCheckResult check_gradient(const std::string& name, const std::vector<Tensor>& inputs, const ScalarFn& fn,
                               double h = 1e-5, std::size_t max_entries = 64);

/// Every differentiable primitive, the denoiser step, the transition log density and the full
/// clipped objective over a branching tree.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 42);

}  // namespace aegpo
