#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dior {

using Rng = std::mt19937_64;

/// Derives an independent generator for a named stream so that consumers
/// (e.g. posterior sampling vs. diffusion noise) never share draws.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x9e3779b9u};
  return Rng(seq);
}

inline double standard_normal(Rng& rng) {
  // Box-Muller keeps draws identical across standard library implementations.
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u1 = unit(rng);
  while (u1 <= 0.0) u1 = unit(rng);
  const double u2 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace dior
