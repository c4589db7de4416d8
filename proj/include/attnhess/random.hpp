#pragma once

#include "attnhess/tensor_ops.hpp"

#include <cstdint>
#include <random>

// Deterministic substreams: every (seed, purpose, cell) combination owns an
// independent generator, so parallel experiment cells reproduce bit-identical
// results regardless of scheduling.

namespace attnhess {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t purpose,
                                 std::uint64_t cell = 0) {
  std::uint64_t s = splitmix64(seed);
  s = splitmix64(s ^ splitmix64(purpose));
  s = splitmix64(s ^ splitmix64(cell));
  return std::mt19937_64(s);
}

inline Mat gaussian(Index rows, Index cols, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Mat out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      out(i, j) = normal(rng);
    }
  }
  return out;
}

}  // namespace attnhess
