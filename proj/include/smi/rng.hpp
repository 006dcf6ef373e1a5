#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "smi/tensor/tensor.hpp"

namespace smi {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives independent, named random streams from one root seed
/// ("init", "data", "inversion", "transfer", ...).
class SeedSplitter {
 public:
  explicit SeedSplitter(std::uint64_t root) : root_(root) {}

  std::uint64_t seed(std::string_view stream, std::uint64_t index = 0) const {
    return splitmix64(splitmix64(root_ ^ fnv1a64(stream)) + index);
  }
  Rng stream(std::string_view name, std::uint64_t index = 0) const { return Rng(seed(name, index)); }
  std::uint64_t root() const { return root_; }

 private:
  std::uint64_t root_;
};

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

/// Normal samples resampled until they fall inside ±2σ.
inline Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.values()) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    v = z * stddev;
  }
  return t;
}

}  // namespace smi
