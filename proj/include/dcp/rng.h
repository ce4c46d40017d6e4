#pragma once

#include <cstdint>
#include <random>

namespace dcp {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for (seed, purpose, index) so that parallel and serial
// consumers draw identical numbers.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream,
                                std::uint64_t index = 0) {
  const std::uint64_t a = splitmix64(seed ^ splitmix64(stream));
  return std::mt19937_64(splitmix64(a ^ splitmix64(index + 0x51ed27aULL)));
}

// Stream tags.
namespace streams {
inline constexpr std::uint64_t kWorld = 1;
inline constexpr std::uint64_t kSample = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kRandomSelection = 5;
inline constexpr std::uint64_t kMessages = 6;
}  // namespace streams

}  // namespace dcp
