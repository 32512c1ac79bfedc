#pragma once

// Portable random helpers. std::*_distribution output differs between
// standard libraries, so everything seeded goes through these instead.

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "mtn/tensor.hpp"

namespace mtn {

/// SplitMix64 finaliser, for deriving independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(seed ^ mix_seed(a)) ^ mix_seed(b + 0x632be59bd9b4e019ULL));
}

/// Integer uniformly drawn from [lo, hi].
inline std::int64_t uniform_int(std::mt19937_64 &rng, std::int64_t lo, std::int64_t hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(rng() % span);
}

inline double uniform_real(std::mt19937_64 &rng, double lo, double hi) {
  return lo + (hi - lo) * unit_uniform(rng);
}

template <typename T>
void shuffle(std::vector<T> &v, std::mt19937_64 &rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

} // namespace mtn
