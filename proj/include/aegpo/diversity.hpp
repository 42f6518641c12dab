#pragma once

#include <span>

#include "aegpo/denoiser.hpp"

namespace aegpo {

struct DiversityMetrics {
  /// Mean pairwise Euclidean distance between final samples.
  double mpd = 0.0;
  /// Population std of the leaves' rewards.
  double group_std = 0.0;
};

/// Intra-group diversity of a rollout group. Needs at least two leaves.
DiversityMetrics diversity_metrics(std::span<const Trajectory> leaves, std::span<const double> rewards);

double mean_pairwise_distance(std::span<const Trajectory> leaves);
double population_std(std::span<const double> values);

}  // namespace aegpo
