#include "aegpo/diversity.hpp"

#include <cmath>
#include <stdexcept>

namespace aegpo {

double mean_pairwise_distance(std::span<const Trajectory> leaves) {
  if (leaves.size() < 2) throw std::invalid_argument("diversity: need at least two leaves");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < leaves.size(); ++a) {
    for (std::size_t b = a + 1; b < leaves.size(); ++b) {
      const Tensor& x = leaves[a].final_sample;
      const Tensor& y = leaves[b].final_sample;
      require_same_shape(x, y, "diversity");
      double sq = 0.0;
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double d = x.data[i] - y.data[i];
        sq += d * d;
      }
      total += std::sqrt(sq);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

double population_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("population_std: empty input");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(values.size()));
}

DiversityMetrics diversity_metrics(std::span<const Trajectory> leaves, std::span<const double> rewards) {
  if (leaves.size() < 2) throw std::invalid_argument("diversity: need at least two leaves");
  if (rewards.size() != leaves.size()) throw std::invalid_argument("diversity: one reward per leaf required");
  return {mean_pairwise_distance(leaves), population_std(rewards)};
}

}  // namespace aegpo
