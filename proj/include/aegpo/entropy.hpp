#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "aegpo/attention.hpp"
#include "aegpo/denoiser.hpp"

namespace aegpo {

/// Entropy(t) in bits for every denoising step of one rollout, in step order.
struct EntropyTrajectory {
  std::vector<double> values;
};

/// Sample-level entropy shift against the base policy.
struct SampleValue {
  std::int64_t prompt_id = 0;
  double delta_entropy = 0.0;
  std::vector<double> per_step;
};

/// Averages the selected layers' maps and renormalizes each feature row into a distribution.
Tensor feature_prob(const AttentionRecord& record);

/// Shannon entropy (base 2) of each feature's distribution, averaged over features. 0 log 0 = 0.
double entropy_t(const AttentionRecord& record);

/// Same quantity for an already-normalized N x T_tok probability matrix.
double mean_row_entropy_bits(const Tensor& prob);

EntropyTrajectory entropy_trajectory(std::span<const AttentionRecord> records);
EntropyTrajectory entropy_trajectory(const Trajectory& traj);

/// per_step[t] = |current[t] - base[t]|, delta_entropy = mean(per_step).
SampleValue delta_entropy(const EntropyTrajectory& current, const EntropyTrajectory& base,
                          std::int64_t prompt_id = 0);

}  // namespace aegpo
