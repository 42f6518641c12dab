#include "aegpo/entropy.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace aegpo {

Tensor feature_prob(const AttentionRecord& record) {
  if (record.selected_layers.empty()) throw std::invalid_argument("feature_prob: no layers selected");
  const Tensor* first = nullptr;
  for (std::size_t l : record.selected_layers) {
    if (l >= record.maps.size()) {
      throw std::out_of_range("feature_prob: selected layer " + std::to_string(l) + " not recorded");
    }
    if (first == nullptr) first = &record.maps[l];
    else require_same_shape(*first, record.maps[l], "feature_prob");
  }
  require_matrix(*first, "feature_prob");

  Tensor avg(first->shape);
  for (std::size_t l : record.selected_layers) {
    const Tensor& m = record.maps[l];
    for (std::size_t i = 0; i < avg.data.size(); ++i) avg.data[i] += m.data[i];
  }
  const double inv_layers = 1.0 / static_cast<double>(record.selected_layers.size());
  for (double& v : avg.data) v *= inv_layers;

  const std::size_t cols = avg.cols();
  for (std::size_t i = 0; i < avg.rows(); ++i) {
    auto r = avg.row(i);
    double total = 0.0;
    for (double v : r) total += v;
    if (total <= 0.0) throw std::invalid_argument("feature_prob: attention row " + std::to_string(i) + " has zero mass");
    for (std::size_t j = 0; j < cols; ++j) r[j] /= total;
  }
  return avg;
}

double mean_row_entropy_bits(const Tensor& prob) {
  require_matrix(prob, "entropy_t");
  if (prob.rows() == 0) throw std::invalid_argument("entropy_t: no image features");
  double total = 0.0;
  for (std::size_t i = 0; i < prob.rows(); ++i) {
    double h = 0.0;
    for (double p : prob.row(i)) {
      if (p > 0.0) h -= p * std::log2(p);
    }
    total += h;
  }
  return total / static_cast<double>(prob.rows());
}

double entropy_t(const AttentionRecord& record) { return mean_row_entropy_bits(feature_prob(record)); }

EntropyTrajectory entropy_trajectory(std::span<const AttentionRecord> records) {
  EntropyTrajectory out;
  out.values.reserve(records.size());
  for (std::size_t s = 0; s < records.size(); ++s) {
    if (records[s].maps.empty()) {
      throw std::invalid_argument("entropy_trajectory: missing attention record at step " + std::to_string(s));
    }
    out.values.push_back(entropy_t(records[s]));
  }
  return out;
}

EntropyTrajectory entropy_trajectory(const Trajectory& traj) {
  if (traj.attention.size() + 1 != traj.states.size()) {
    throw std::invalid_argument("entropy_trajectory: trajectory has " + std::to_string(traj.attention.size()) +
                                " attention records for " + std::to_string(traj.states.size()) + " states");
  }
  return entropy_trajectory(std::span<const AttentionRecord>(traj.attention));
}

SampleValue delta_entropy(const EntropyTrajectory& current, const EntropyTrajectory& base, std::int64_t prompt_id) {
  if (current.values.size() != base.values.size()) {
    throw std::invalid_argument("delta_entropy: length mismatch " + std::to_string(current.values.size()) + " vs " +
                                std::to_string(base.values.size()));
  }
  if (current.values.empty()) throw std::invalid_argument("delta_entropy: empty trajectories");
  SampleValue out;
  out.prompt_id = prompt_id;
  out.per_step.resize(current.values.size());
  double total = 0.0;
  for (std::size_t t = 0; t < current.values.size(); ++t) {
    out.per_step[t] = std::abs(current.values[t] - base.values[t]);
    total += out.per_step[t];
  }
  out.delta_entropy = total / static_cast<double>(out.per_step.size());
  return out;
}

}  // namespace aegpo
