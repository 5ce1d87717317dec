#pragma once

// Named random streams derived from one root seed, so that e.g. the
// reparameterization noise can be frozen without touching initialization.

#include <cstdint>
#include <random>
#include <string_view>

#include "sgpa/linalg.hpp"

namespace sgpa {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  return splitmix64(root ^ fnv1a64(stream));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                 std::uint64_t index) {
  return splitmix64(derive_seed(root, stream) + splitmix64(index));
}

namespace streams {
inline constexpr std::string_view kInit = "init";
inline constexpr std::string_view kElboNoise = "elbo-noise";
inline constexpr std::string_view kData = "data";
inline constexpr std::string_view kPredict = "predict";
inline constexpr std::string_view kShuffle = "shuffle";
} // namespace streams

inline Matrix standard_normal(std::mt19937_64 &rng, Eigen::Index rows,
                              Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      m(i, j) = n(rng);
    }
  }
  return m;
}

inline Matrix uniform_matrix(std::mt19937_64 &rng, Eigen::Index rows,
                             Eigen::Index cols, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      m(i, j) = u(rng);
    }
  }
  return m;
}

} // namespace sgpa
