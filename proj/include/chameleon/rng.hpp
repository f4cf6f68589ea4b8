#pragma once

#include <cstdint>
#include <random>

namespace chameleon {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; derives independent seeds for named RNG streams so
// that e.g. data order and dropout never share a generator.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) { return Rng(mix_seed(seed, stream)); }

namespace stream {
inline constexpr std::uint64_t kBackboneInit = 1;
inline constexpr std::uint64_t kAdapterInit = 2;
inline constexpr std::uint64_t kDropout = 3;
inline constexpr std::uint64_t kSplit = 4;
inline constexpr std::uint64_t kKmeans = 5;
inline constexpr std::uint64_t kSchedule = 6;
inline constexpr std::uint64_t kSynthetic = 7;
}  // namespace stream

}  // namespace chameleon
