// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace nlos {

/// Counter-based RNG: a splitmix64 stream whose state is derived by
/// hashing (seed, counters). Streams keyed by distinct counters are
/// independent, so parallel consumers stay deterministic regardless of
/// scheduling.
class CounterRng {
 public:
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static CounterRng keyed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                          std::uint64_t c = 0) {
    CounterRng r;
    r.state_ = mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double next_range(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t next_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  /// Standard normal via Box-Muller.
  double next_gauss() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Poisson draw: Knuth's product method for small means, normal
  /// approximation above (the usual simulation compromise).
  std::uint64_t next_poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda <= 30.0) {
      const double limit = std::exp(-lambda);
      std::uint64_t k = 0;
      double prod = next_double();
      while (prod > limit) {
        ++k;
        prod *= next_double();
      }
      return k;
    }
    const double v = lambda + std::sqrt(lambda) * next_gauss();
    return v <= 0.0 ? 0 : static_cast<std::uint64_t>(std::llround(v));
  }

 private:
  std::uint64_t state_ = 0;
};

}  // namespace nlos
