#pragma once

// Forward domain-shift process:
//   x_t = alpha_t (eta_t xhat0 + (1 - eta_t) x0) + sigma_t eps,
// its one-step transition, an Euler-Maruyama simulator of the forward SDE and
// closed-form moments for diagonal Gaussian targets.

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "shiftdiff/schedule.hpp"
#include "shiftdiff/state.hpp"

namespace shiftdiff {

/// Diagonal Gaussian over the target domain.
struct GaussianSpec {
  Vector mean;
  Vector cov_diag;

  GaussianSpec(Vector m, Vector c) : mean(std::move(m)), cov_diag(std::move(c)) {
    if (mean.size() < 1 || mean.size() != cov_diag.size()) {
      throw ArgumentError("GaussianSpec: mean and cov_diag must have equal nonzero length");
    }
    if (!(cov_diag.array() > 0.0).all()) throw ArgumentError("GaussianSpec: cov_diag must be positive");
  }

  Eigen::Index dim() const { return mean.size(); }

  StateBatch sample(Eigen::Index n, Rng& rng) const {
    StateBatch z = rng.standard_normal(n, dim());
    z.array().rowwise() *= cov_diag.array().sqrt().transpose();
    z.rowwise() += mean.transpose();
    return z;
  }
};

inline StateBatch domain_shift_mean(const StateBatch& x0, const StateBatch& xhat0, double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ArgumentError("domain_shift_mean: eta must lie in [0, 1]");
  check_same_shape(x0, xhat0, "domain_shift_mean");
  // Exact at both endpoints.
  if (eta == 0.0) return x0;
  if (eta == 1.0) return xhat0;
  return eta * xhat0 + (1.0 - eta) * x0;
}

struct MarginalDraw {
  StateBatch x_t;
  StateBatch eps;
};

/// Deterministic part of the marginal, alpha_t D(xhat0, x0), for a given t.
inline StateBatch marginal_mean_part(const StateBatch& x0, const StateBatch& xhat0, double t,
                                     const DoSSchedule& s) {
  const StateBatch src = broadcast_rows(xhat0, x0.rows(), "marginal");
  const double a = s.target_scale(t);
  const double b = s.source_scale(t);
  if (a == 0.0) return b * src;
  return a * x0 + b * src;
}

inline MarginalDraw sample_marginal(const StateBatch& x0, const StateBatch& xhat0, double t,
                                    const DoSSchedule& s, Rng& rng) {
  check_batch(x0, "sample_marginal x0");
  StateBatch eps = rng.standard_normal(x0.rows(), x0.cols());
  StateBatch x_t = marginal_mean_part(x0, xhat0, t, s) + s.sigma(t) * eps;
  return {std::move(x_t), std::move(eps)};
}

/// Training pairs use exactly the marginal draw; the regression target is eps.
inline MarginalDraw training_pair(const StateBatch& x0, const StateBatch& xhat0, double t,
                                  const DoSSchedule& s, Rng& rng) {
  return sample_marginal(x0, xhat0, t, s, rng);
}

/// One forward transition from t_prev to t > t_prev. When t == t_prev the
/// state is returned unchanged.
inline StateBatch sample_transition(const StateBatch& x_prev, const StateBatch& x0, const StateBatch& xhat0,
                                    double t_prev, double t, const DoSSchedule& s, Rng& rng) {
  if (t == t_prev) return x_prev;
  if (!(t > t_prev)) throw ArgumentError("sample_transition: need t > t_prev");
  check_same_shape(x_prev, x0, "sample_transition");
  const StateBatch src = broadcast_rows(xhat0, x0.rows(), "sample_transition");
  const double ratio = s.alpha(t) / s.alpha(t_prev);
  const double shift = s.alpha(t) * (s.eta(t) - s.eta(t_prev));
  const double std_dev = std::sqrt(std::max(0.0, (1.0 - ratio) * (1.0 + ratio)));
  StateBatch out = ratio * x_prev;
  if (shift != 0.0) out += shift * (src - x0);
  out += std_dev * rng.standard_normal(x_prev.rows(), x_prev.cols());
  return out;
}

struct Moments {
  Vector mean;
  Vector var;
};

/// Mean and variance after composing transitions along an increasing grid,
/// starting from x0 ~ q0 at grid[0]. Used to check that transitions compose
/// into the marginal.
inline Moments transition_chain_moments(const GaussianSpec& q0, const Vector& xhat0, std::span<const double> grid,
                                        const DoSSchedule& s) {
  const double a0 = s.target_scale(grid[0]);
  const double b0 = s.source_scale(grid[0]);
  const double sig0 = s.sigma(grid[0]);
  // Track the x0 loading separately: x = c x0 + m + noise with variance v.
  double c = a0;
  Vector m = b0 * xhat0;
  Vector v = Vector::Constant(q0.dim(), sig0 * sig0);
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const double ratio = s.alpha(grid[k]) / s.alpha(grid[k - 1]);
    const double shift = s.alpha(grid[k]) * (s.eta(grid[k]) - s.eta(grid[k - 1]));
    c = ratio * c - shift;
    m = ratio * m + shift * xhat0;
    v = ratio * ratio * v + Vector::Constant(q0.dim(), (1.0 - ratio) * (1.0 + ratio));
  }
  return {c * q0.mean + m, (c * c) * q0.cov_diag + v};
}

/// mean = alpha_t (eta_t xhat0 + (1 - eta_t) mu0), var = (alpha_t (1 - eta_t))^2 cov + sigma_t^2.
inline Moments marginal_moments(const GaussianSpec& q0, const Vector& xhat0, double t, const DoSSchedule& s) {
  if (xhat0.size() != q0.dim()) throw ArgumentError("marginal_moments: dimension mismatch");
  const double a = s.target_scale(t);
  const double b = s.source_scale(t);
  const double sig = s.sigma(t);
  return {a * q0.mean + b * xhat0, (a * a) * q0.cov_diag + Vector::Constant(q0.dim(), sig * sig)};
}

struct ForwardOptions {
  double noise_scale = 1.0;  // 0 integrates the mean ODE
};

/// Euler-Maruyama on dx = [f x + h xhat0] dt + g dw over a strictly
/// increasing grid that stays below t1. Returns the state at every grid time.
inline std::vector<StateBatch> euler_maruyama_forward(const StateBatch& x0, const StateBatch& xhat0,
                                                      std::span<const double> grid, const DoSSchedule& s,
                                                      Rng& rng, ForwardOptions opts = {}) {
  if (grid.size() < 2) throw ArgumentError("euler_maruyama_forward: grid needs two or more times");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (k > 0 && !(grid[k] > grid[k - 1])) {
      throw ArgumentError("euler_maruyama_forward: grid must be strictly increasing");
    }
    if (s.shift().saturated(grid[k])) {
      throw DomainError("euler_maruyama_forward: grid touches t >= t1 where coefficients diverge");
    }
  }
  const StateBatch src = broadcast_rows(xhat0, x0.rows(), "euler_maruyama_forward");
  std::vector<StateBatch> traj;
  traj.reserve(grid.size());
  StateBatch x = marginal_mean_part(x0, src, grid[0], s) +
                 opts.noise_scale * s.sigma(grid[0]) * rng.standard_normal(x0.rows(), x0.cols());
  traj.push_back(x);
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double dt = grid[k + 1] - grid[k];
    const SdeCoefficients c = s.sde_coefficients(grid[k]);
    StateBatch next = x + dt * (c.f * x + c.h * src);
    if (opts.noise_scale != 0.0) {
      next += (opts.noise_scale * c.g * std::sqrt(dt)) * rng.standard_normal(x.rows(), x.cols());
    }
    x = std::move(next);
    traj.push_back(x);
  }
  return traj;
}

}  // namespace shiftdiff
