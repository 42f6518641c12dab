#include "aegpo/rewards.hpp"

#include <cmath>
#include <stdexcept>

namespace aegpo {

RewardKind parse_reward_kind(std::string_view name) {
  if (name == "target_match") return RewardKind::kTargetMatch;
  if (name == "structure") return RewardKind::kStructure;
  if (name == "smoothness") return RewardKind::kSmoothness;
  throw std::invalid_argument("unknown reward kind '" + std::string(name) + "'");
}

const char* reward_kind_name(RewardKind kind) {
  switch (kind) {
    case RewardKind::kTargetMatch: return "target_match";
    case RewardKind::kStructure: return "structure";
    case RewardKind::kSmoothness: return "smoothness";
  }
  return "?";
}

Tensor pool_rows(const Tensor& x, std::size_t factor) {
  require_matrix(x, "pool_rows");
  if (factor == 0) throw std::invalid_argument("pool_rows: factor must be positive");
  const std::size_t blocks = (x.rows() + factor - 1) / factor;
  Tensor out = Tensor::matrix(blocks, x.cols());
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * factor;
    const std::size_t hi = std::min(x.rows(), lo + factor);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out.at(b, j) += x.at(i, j);
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(b, j) *= inv;
  }
  return out;
}

namespace {

double mse(const Tensor& a, const Tensor& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    total += d * d;
  }
  return total / static_cast<double>(a.data.size());
}

}  // namespace

double evaluate(const RewardSpec& spec, const Tensor& final_sample, const PromptSpec& prompt) {
  require_matrix(final_sample, "evaluate");
  switch (spec.kind) {
    case RewardKind::kTargetMatch:
      require_same_shape(final_sample, prompt.target, "evaluate");
      return -mse(final_sample, prompt.target);
    case RewardKind::kStructure:
      require_same_shape(final_sample, prompt.target, "evaluate");
      return -mse(pool_rows(final_sample, kStructurePool), pool_rows(prompt.target, kStructurePool));
    case RewardKind::kSmoothness: {
      const std::size_t n = final_sample.rows(), c = final_sample.cols();
      if (n < 2) return 0.0;
      double tv = 0.0;
      for (std::size_t i = 0; i + 1 < n; ++i)
        for (std::size_t j = 0; j < c; ++j) tv += std::abs(final_sample.at(i + 1, j) - final_sample.at(i, j));
      return -tv / static_cast<double>((n - 1) * c);
    }
  }
  throw std::logic_error("evaluate: unhandled reward kind");
}

RewardMatrix reward_vector(std::span<const RewardSpec> specs, std::span<const Trajectory> leaves,
                           const PromptSpec& prompt) {
  if (specs.empty() || leaves.empty()) throw std::invalid_argument("reward_vector: empty specs or leaves");
  RewardMatrix out(leaves.size(), std::vector<double>(specs.size()));
  for (std::size_t j = 0; j < leaves.size(); ++j)
    for (std::size_t k = 0; k < specs.size(); ++k) out[j][k] = evaluate(specs[k], leaves[j].final_sample, prompt);
  return out;
}

double combined_reward(std::span<const RewardSpec> specs, std::span<const double> row) {
  if (specs.size() != row.size()) throw std::invalid_argument("combined_reward: size mismatch");
  double total = 0.0;
  for (std::size_t k = 0; k < specs.size(); ++k) total += specs[k].weight * row[k];
  return total;
}

}  // namespace aegpo
