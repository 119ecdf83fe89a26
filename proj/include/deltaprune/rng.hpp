#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "deltaprune/matrix.hpp"

namespace dp {

// SplitMix64 mixing step; used to derive independent per-trial seeds from a
// base seed plus a counter, so each trial owns its own stream.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(splitmix64(seed)); }

// Counter-based split: stream for trial `index` under base `seed`.
inline std::mt19937_64 trial_rng(uint64_t seed, uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ (0x51ed2701a9d4c2b5ULL + index)));
}

inline double randn(std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  return d(rng);
}

inline double randu(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

inline Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double sd = 1.0) {
  Matrix m(rows, cols);
  std::normal_distribution<double> d(0.0, sd);
  for (double& v : m.data) v = d(rng);
  return m;
}

// Haar-ish random orthogonal matrix: QR of a Gaussian with the sign convention
// R_ii > 0. Declared here, defined in linalg.cpp (needs the QR factorization).
Matrix random_orthogonal(std::mt19937_64& rng, int n);

}  // namespace dp
