#pragma once

#include <cstdint>
#include <random>

namespace cbp {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent streams from (master seed, task id).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return mix_seed(mix_seed(master) ^ (stream * 0xD1B54A32D192ED03ULL + 1));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(master, a), b);
}

}  // namespace cbp
