#include "aegpo/allocation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace aegpo {

namespace {

// Indices sorted by value descending, earlier position first on ties.
std::vector<std::size_t> rank_descending(std::span<const SampleValue> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values[a].delta_entropy > values[b].delta_entropy;
  });
  return order;
}

std::vector<double> raw_values(std::span<const SampleValue> values) {
  std::vector<double> v;
  v.reserve(values.size());
  for (const auto& s : values) v.push_back(s.delta_entropy);
  return v;
}

}  // namespace

AllocationConfig AllocationConfig::from_average(int r_avg, int warmup_iters) {
  AllocationConfig cfg;
  cfg.r_avg = r_avg;
  const int spread = std::max(1, static_cast<int>(std::lround(r_avg / 3.0)));
  cfg.r_high = r_avg + spread;
  cfg.r_low = r_avg - spread;
  cfg.warmup_iters = warmup_iters;
  cfg.validate();
  return cfg;
}

void AllocationConfig::validate() const {
  if (r_avg < 1) throw std::invalid_argument("allocation: r_avg must be >= 1");
  if (!(r_high > r_low && r_low >= 1)) throw std::invalid_argument("allocation: need r_high > r_low >= 1");
  if (r_high + r_low != 2 * r_avg) throw std::invalid_argument("allocation: r_high + r_low must equal 2 * r_avg");
  if (warmup_iters < 0) throw std::invalid_argument("allocation: warmup_iters must be >= 0");
}

const char* tier_name(Tier tier) {
  switch (tier) {
    case Tier::kUniform: return "uniform";
    case Tier::kHigh: return "high";
    case Tier::kLow: return "low";
    case Tier::kSkipped: return "skipped";
  }
  return "?";
}

long long BudgetAssignment::total() const {
  return std::accumulate(rollouts.begin(), rollouts.end(), 0LL);
}

double median_of(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("median_of: empty input");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  if (n % 2 == 1) return sorted[n / 2];
  return 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

BudgetAssignment allocate(std::span<const SampleValue> values, const AllocationConfig& cfg, int iteration) {
  if (values.empty()) throw std::invalid_argument("allocate: empty batch");
  cfg.validate();
  const std::size_t batch = values.size();
  const auto raw = raw_values(values);

  BudgetAssignment out;
  out.median = median_of(raw);
  out.warmup = iteration < cfg.warmup_iters;
  const bool all_equal = std::all_of(raw.begin(), raw.end(), [&](double v) { return v == raw.front(); });
  if (out.warmup || batch == 1 || all_equal) {
    out.rollouts.assign(batch, cfg.r_avg);
    out.tiers.assign(batch, Tier::kUniform);
    return out;
  }

  out.rollouts.assign(batch, cfg.r_low);
  out.tiers.assign(batch, Tier::kLow);
  const auto order = rank_descending(values);
  for (std::size_t r = 0; r < batch / 2; ++r) {
    out.rollouts[order[r]] = cfg.r_high;
    out.tiers[order[r]] = Tier::kHigh;
  }
  return out;
}

BudgetAssignment allocate_stratified(std::span<const SampleValue> values, int r_avg, bool keep_high) {
  if (values.empty()) throw std::invalid_argument("allocate_stratified: empty batch");
  if (r_avg < 1) throw std::invalid_argument("allocate_stratified: r_avg must be >= 1");
  const std::size_t batch = values.size();
  BudgetAssignment out;
  out.median = median_of(raw_values(values));
  out.rollouts.assign(batch, 0);
  out.tiers.assign(batch, Tier::kSkipped);
  const auto order = rank_descending(values);
  const std::size_t keep = std::max<std::size_t>(1, batch / 2);
  for (std::size_t r = 0; r < keep; ++r) {
    const std::size_t idx = keep_high ? order[r] : order[batch - 1 - r];
    out.rollouts[idx] = r_avg;
    out.tiers[idx] = keep_high ? Tier::kHigh : Tier::kLow;
  }
  return out;
}

}  // namespace aegpo
