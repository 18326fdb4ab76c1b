#pragma once

#include <cstdint>

namespace gcp::detail {

// Named sub-streams derived from a single seed.
inline constexpr std::uint64_t kDataStream = 0xDA7A;
inline constexpr std::uint64_t kInitStream = 0x1717;
inline constexpr std::uint64_t kDropoutStream = 0xD40;
inline constexpr std::uint64_t kSamplingStream = 0x5A3;

/// splitmix64 finaliser over (a, b).
inline std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Counter-based uniform in [0,1): depends only on (key, index).
inline double counter_uniform(std::uint64_t key, std::uint64_t index) {
  return static_cast<double>(mix_key(key, index) >> 11) * 0x1.0p-53;
}

}  // namespace gcp::detail
