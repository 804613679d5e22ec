#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>

#include "shiftdiff/errors.hpp"

namespace shiftdiff {

/// n samples by d dimensions, one sample per row.
using StateBatch = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline void check_batch(const StateBatch& x, const char* name) {
  if (x.rows() < 1 || x.cols() < 1) {
    throw ArgumentError(std::string(name) + ": batch must have at least one row and one column");
  }
  if (!x.allFinite()) {
    throw ArgumentError(std::string(name) + ": batch contains non-finite entries");
  }
}

inline void check_same_shape(const StateBatch& a, const StateBatch& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ArgumentError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
  }
}

/// Source points are either one row shared by every sample or one row per
/// sample. Returns an n-row copy either way.
inline StateBatch broadcast_rows(const StateBatch& xhat0, Eigen::Index n, const char* what) {
  if (xhat0.rows() == n) return xhat0;
  if (xhat0.rows() == 1) return xhat0.replicate(n, 1);
  throw ArgumentError(std::string(what) + ": source batch must have 1 or " + std::to_string(n) +
                      " rows, got " + std::to_string(xhat0.rows()));
}

inline StateBatch row_batch(const Vector& v) { return StateBatch(v.transpose()); }

/// Seeded Gaussian source. Streams for independent rows or runs are derived
/// from (seed, index) with a splitmix64 scramble.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng stream(std::uint64_t seed, std::uint64_t index) { return Rng(mix(seed, index)); }

  double normal() { return normal_(engine_); }

  double uniform() { return uniform_(engine_); }

  std::uint64_t next_u64() { return engine_(); }

  StateBatch standard_normal(Eigen::Index n, Eigen::Index d) {
    StateBatch z(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) z(i, j) = normal_(engine_);
    return z;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace shiftdiff
