#pragma once

#include <algorithm>
#include <cmath>

#include "shiftdiff/state.hpp"

namespace shiftdiff {

namespace detail {

inline double mean_pair_distance(const StateBatch& a, const StateBatch& b, bool same) {
  double acc = 0.0;
  const Eigen::Index n = a.rows();
  const Eigen::Index m = b.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j0 = same ? i + 1 : 0;
    for (Eigen::Index j = j0; j < m; ++j) acc += (a.row(i) - b.row(j)).norm();
  }
  if (same) return n > 1 ? 2.0 * acc / (static_cast<double>(n) * (n - 1)) : 0.0;
  return acc / (static_cast<double>(n) * m);
}

}  // namespace detail

/// Energy distance 2 E|X - Y| - E|X - X'| - E|Y - Y'| with unbiased
/// within-sample terms. Only the first `max_rows` rows of each sample enter.
inline double energy_distance(const StateBatch& x, const StateBatch& y, Eigen::Index max_rows = 10000) {
  check_batch(x, "energy_distance x");
  check_batch(y, "energy_distance y");
  if (x.cols() != y.cols()) throw ArgumentError("energy_distance: dimension mismatch");
  const StateBatch a = x.topRows(std::min(x.rows(), max_rows));
  const StateBatch b = y.topRows(std::min(y.rows(), max_rows));
  return 2.0 * detail::mean_pair_distance(a, b, false) - detail::mean_pair_distance(a, a, true) -
         detail::mean_pair_distance(b, b, true);
}

struct SampleMoments {
  Vector mean;
  Vector var;  // unbiased
};

inline SampleMoments sample_moments(const StateBatch& x) {
  check_batch(x, "sample_moments");
  const Vector mean = x.colwise().mean().transpose();
  const double denom = std::max<double>(1.0, static_cast<double>(x.rows() - 1));
  StateBatch centered = x.rowwise() - mean.transpose();
  const Vector var = centered.colwise().squaredNorm().transpose() / denom;
  return {mean, var};
}

struct MomentError {
  double mean_rel;  // max_j |mean_j - mu_j| / max(|mu_j|, sqrt(v_j))
  double var_rel;   // max_j |var_j - v_j| / v_j
};

inline MomentError moment_error(const StateBatch& x, const Vector& mu, const Vector& var) {
  if (x.cols() != mu.size() || mu.size() != var.size()) throw ArgumentError("moment_error: dimension mismatch");
  const SampleMoments m = sample_moments(x);
  MomentError e{0.0, 0.0};
  for (Eigen::Index j = 0; j < mu.size(); ++j) {
    const double scale = std::max(std::abs(mu[j]), std::sqrt(var[j]));
    e.mean_rel = std::max(e.mean_rel, std::abs(m.mean[j] - mu[j]) / scale);
    e.var_rel = std::max(e.var_rel, std::abs(m.var[j] - var[j]) / var[j]);
  }
  return e;
}

}  // namespace shiftdiff
