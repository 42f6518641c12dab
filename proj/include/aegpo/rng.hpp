#pragma once

#include <cstdint>
#include <random>

namespace aegpo {

/// Seeded generator with platform-stable normal draws.
///
/// std::normal_distribution is implementation-defined, so normals come from a
/// Box-Muller transform over mt19937_64 bits instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Derives an independent stream seed from (seed, stream) with a splitmix64 finalizer.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace aegpo
