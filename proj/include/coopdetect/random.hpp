#pragma once

#include <cstdint>
#include <random>

#include <boost/random/normal_distribution.hpp>

namespace coopdetect {

/// Engine used by every simulation. Streams are always seeded explicitly.
using Rng = std::mt19937_64;

/// Standard normal sampler (ziggurat); several times faster than the
/// polar method in libstdc++, which matters for the LMS regressor draws.
using StandardNormal = boost::random::normal_distribution<double>;

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Stable child seed for stream `index` under `parent`.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(parent) ^ (index * 0xD1B54A32D192ED03ULL + 1));
}

inline constexpr const char* kSeedDerivationRule =
    "trial_seed = splitmix64(splitmix64(master) ^ (trial * 0xD1B54A32D192ED03 + 1)); "
    "sub-streams derive from trial_seed with the same rule";

inline Rng make_stream(std::uint64_t parent, std::uint64_t index) {
  return Rng{derive_seed(parent, index)};
}

}  // namespace coopdetect
