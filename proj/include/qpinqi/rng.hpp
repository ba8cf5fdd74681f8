#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace qpinqi {

/// Counter-based pseudo-random generator. Every draw is a pure function of
/// (seed, counter), so streams are reproducible across platforms and can be
/// split per sample index for parallel generation.
struct Rng {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  static constexpr const char* algorithm = "splitmix64-counter";

  Rng() = default;
  explicit Rng(std::uint64_t s) : seed(s) {}

  static std::uint64_t mix(std::uint64_t seed, std::uint64_t ctr) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (ctr + 0x632BE59BD9B4E019ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return mix(seed, counter++); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes exactly two counter values.
  double normal() {
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n). Modulo bias is negligible for n << 2^64 and
  /// keeps the draw a single counter increment.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  /// Independent child stream; used to key per-sample generators.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed ^ 0xD6E8FEB86659FD93ULL, stream));
  }
};

}  // namespace qpinqi
