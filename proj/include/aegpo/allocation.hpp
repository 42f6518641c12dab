#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aegpo/entropy.hpp"

namespace aegpo {

struct AllocationConfig {
  int r_avg = 12;
  int r_high = 16;
  int r_low = 8;
  int warmup_iters = 20;

  /// Symmetric tiers around r_avg with a spread of round(r_avg / 3): 12 -> (8, 16).
  static AllocationConfig from_average(int r_avg, int warmup_iters = 20);
  void validate() const;
};

enum class Tier { kUniform, kHigh, kLow, kSkipped };

const char* tier_name(Tier tier);

struct BudgetAssignment {
  std::vector<int> rollouts;
  std::vector<Tier> tiers;
  double median = 0.0;
  bool warmup = false;

  long long total() const;
};

/// Midpoint of the two central values for even sizes.
double median_of(std::span<const double> values);

/// Two-tier median split of a batch by delta entropy.
///
/// During warmup, or when the split is undefined (a single prompt or all values
/// equal), every prompt gets r_avg. Otherwise the top floor(B/2) prompts by value
/// get r_high and the rest r_low; with distinct values this is exactly v_i > median.
/// Ties straddling the median are broken toward the earlier batch position so even
/// batches always conserve B * r_avg.
BudgetAssignment allocate(std::span<const SampleValue> values, const AllocationConfig& cfg, int iteration);

/// Selects half of the batch (rounded down) for training at r_avg rollouts each; the
/// other half is skipped. `keep_high` keeps the high-value half, otherwise the low half.
BudgetAssignment allocate_stratified(std::span<const SampleValue> values, int r_avg, bool keep_high);

}  // namespace aegpo
