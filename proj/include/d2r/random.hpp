#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "d2r/tensor.hpp"

namespace d2r {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Seed splitting: every consumer of randomness derives its own stream from the
/// run seed and a stable stream name, so adding a consumer never perturbs the
/// others. derive_seed(s, "init") != derive_seed(s, "data").
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return splitmix64(seed ^ splitmix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  return splitmix64(derive_seed(seed, stream) + splitmix64(index + 1));
}

inline Tensor random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

inline Tensor random_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> ud(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = ud(rng);
  return t;
}

}  // namespace d2r
