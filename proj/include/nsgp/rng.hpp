#pragma once

#include <cstdint>
#include <random>

namespace nsgp {

/// Named sub-streams so every random component can be re-run on its own.
enum class Stream : std::uint64_t {
  simulation = 0x51u,
  covariate = 0xC0u,
  probes = 0x9Bu,
  shuffle = 0x5Fu,
  replicate = 0x7Eu,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Key derived from (seed, stream, index); distinct keys give unrelated
/// generators, so adding a process never perturbs earlier draws.
inline std::uint64_t stream_key(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(stream))) + splitmix64(index + 1));
}

inline std::mt19937_64 stream_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  return std::mt19937_64(stream_key(seed, stream, index));
}

}  // namespace nsgp
