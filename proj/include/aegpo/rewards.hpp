#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aegpo/denoiser.hpp"

namespace aegpo {

enum class RewardKind { kTargetMatch, kStructure, kSmoothness };

RewardKind parse_reward_kind(std::string_view name);
const char* reward_kind_name(RewardKind kind);

/// A synthetic reward. All kinds are negated losses: higher is better, 0 is the optimum.
struct RewardSpec {
  std::string name;
  RewardKind kind = RewardKind::kTargetMatch;
  /// Multiplies this reward's z-scored contribution to the advantage.
  double weight = 1.0;
};

/// Rows averaged per block by the structure reward's low-frequency projection.
inline constexpr std::size_t kStructurePool = 4;

Tensor pool_rows(const Tensor& x, std::size_t factor);

/// target_match: -MSE to the prompt target.
/// structure:    -MSE between row-pooled sample and row-pooled target (global layout).
/// smoothness:   -mean |x[i+1][j] - x[i][j]| over adjacent feature rows (fine detail).
double evaluate(const RewardSpec& spec, const Tensor& final_sample, const PromptSpec& prompt);

/// rows[j][k] = evaluate(specs[k], leaves[j].final_sample, prompt).
using RewardMatrix = std::vector<std::vector<double>>;
RewardMatrix reward_vector(std::span<const RewardSpec> specs, std::span<const Trajectory> leaves,
                           const PromptSpec& prompt);

/// Weighted sum of one row, the scalar logged as "reward".
double combined_reward(std::span<const RewardSpec> specs, std::span<const double> row);

}  // namespace aegpo
