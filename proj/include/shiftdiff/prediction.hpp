#pragma once

// Prediction interfaces and the closed-form conversions between noise, data
// and score predictions:
//   x_data = (x_t - alpha eta xhat0 - sigma eps) / (alpha (1 - eta))
//   score  = -(x_t - alpha (1 - eta) x_data - alpha eta xhat0) / sigma^2 = -eps / sigma
// plus Bayes-optimal oracles for Gaussian and Gaussian-mixture targets.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "shiftdiff/forward.hpp"
#include "shiftdiff/schedule.hpp"
#include "shiftdiff/state.hpp"

namespace shiftdiff {

inline StateBatch noise_to_data(const StateBatch& eps_hat, const StateBatch& x_t, const StateBatch& xhat0, double t,
                                const DoSSchedule& s) {
  check_same_shape(eps_hat, x_t, "noise_to_data");
  if (s.shift().saturated(t)) {
    throw SingularityError("noise_to_data: alpha (1 - eta) vanishes for t >= t1");
  }
  const StateBatch src = broadcast_rows(xhat0, x_t.rows(), "noise_to_data");
  return (x_t - s.source_scale(t) * src - s.sigma(t) * eps_hat) / s.target_scale(t);
}

inline StateBatch data_to_noise(const StateBatch& x_pred, const StateBatch& x_t, const StateBatch& xhat0, double t,
                                const DoSSchedule& s) {
  check_same_shape(x_pred, x_t, "data_to_noise");
  const double sig = s.sigma(t);
  if (sig == 0.0) throw SingularityError("data_to_noise: sigma_t is zero");
  const StateBatch src = broadcast_rows(xhat0, x_t.rows(), "data_to_noise");
  return (x_t - s.target_scale(t) * x_pred - s.source_scale(t) * src) / sig;
}

inline StateBatch data_to_score(const StateBatch& x_pred, const StateBatch& x_t, const StateBatch& xhat0, double t,
                                const DoSSchedule& s) {
  check_same_shape(x_pred, x_t, "data_to_score");
  const double sig = s.sigma(t);
  if (sig == 0.0) throw SingularityError("data_to_score: sigma_t is zero");
  const StateBatch src = broadcast_rows(xhat0, x_t.rows(), "data_to_score");
  return -(x_t - s.target_scale(t) * x_pred - s.source_scale(t) * src) / (sig * sig);
}

inline StateBatch noise_to_score(const StateBatch& eps_hat, double t, const DoSSchedule& s) {
  const double sig = s.sigma(t);
  if (sig == 0.0) throw SingularityError("noise_to_score: sigma_t is zero");
  return -eps_hat / sig;
}

/// Conditional predictor of the target sample. Implementations are immutable
/// and safe to call concurrently.
class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual const DoSSchedule& schedule() const = 0;

  /// eps_hat(x_t, xhat0, t); same shape as x_t.
  virtual StateBatch predict_noise(const StateBatch& x_t, const StateBatch& xhat0, double t) const = 0;

  /// x_data(x_t, xhat0, t). Data-native predictors are defined at t1 itself.
  virtual StateBatch predict_data(const StateBatch& x_t, const StateBatch& xhat0, double t) const = 0;

  StateBatch predict_score(const StateBatch& x_t, const StateBatch& xhat0, double t) const {
    return data_to_score(predict_data(x_t, xhat0, t), x_t, xhat0, t, schedule());
  }
};

/// Predictors whose native output is noise; data predictions go through the
/// conversion and therefore do not exist at t >= t1.
class NoisePredictor : public Predictor {
 public:
  explicit NoisePredictor(DoSSchedule s) : schedule_(std::move(s)) {}
  const DoSSchedule& schedule() const override { return schedule_; }

  StateBatch predict_data(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    return noise_to_data(predict_noise(x_t, xhat0, t), x_t, xhat0, t, schedule_);
  }

 private:
  DoSSchedule schedule_;
};

class DataPredictor : public Predictor {
 public:
  explicit DataPredictor(DoSSchedule s) : schedule_(std::move(s)) {}
  const DoSSchedule& schedule() const override { return schedule_; }

  StateBatch predict_noise(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    return data_to_noise(predict_data(x_t, xhat0, t), x_t, xhat0, t, schedule_);
  }

 private:
  DoSSchedule schedule_;
};

/// Wraps a predictor and counts evaluations (one per predict_* call).
class CountingPredictor : public Predictor {
 public:
  explicit CountingPredictor(const Predictor& inner) : inner_(inner) {}

  const DoSSchedule& schedule() const override { return inner_.schedule(); }

  StateBatch predict_noise(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    ++calls_;
    return inner_.predict_noise(x_t, xhat0, t);
  }

  StateBatch predict_data(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    ++calls_;
    return inner_.predict_data(x_t, xhat0, t);
  }

  long calls() const { return calls_.load(); }
  void reset() { calls_ = 0; }

 private:
  const Predictor& inner_;
  mutable std::atomic<long> calls_{0};
};

/// Closed-form test problem: target q0 and one source point.
struct GaussianTask {
  GaussianSpec q0;
  Vector xhat0;
  DoSSchedule schedule;
};

/// Coordinatewise posterior mean E[x0 | x_t] for a Gaussian prior with
/// x_t = a x0 + b + sigma eps:
///   mu0 + cov a (a^2 cov + sigma^2)^-1 (x_t - b - a mu0).
/// Rows of xhat0 may be one shared row or one per sample.
inline StateBatch gaussian_posterior_mean(const GaussianSpec& q0, const StateBatch& x_t, const StateBatch& xhat0,
                                          double t, const DoSSchedule& s) {
  if (x_t.cols() != q0.dim()) throw ArgumentError("gaussian posterior: dimension mismatch");
  const StateBatch src = broadcast_rows(xhat0, x_t.rows(), "gaussian posterior");
  const double a = s.target_scale(t);
  const double b = s.source_scale(t);
  const double sig2 = s.sigma(t) * s.sigma(t);
  const Eigen::RowVectorXd mu = q0.mean.transpose();
  const Eigen::RowVectorXd gain = (q0.cov_diag.array() * a / (a * a * q0.cov_diag.array() + sig2)).matrix().transpose();
  StateBatch resid = x_t - b * src;
  resid.rowwise() -= a * mu;
  StateBatch out = resid.array().rowwise() * gain.array();
  out.rowwise() += mu;
  return out;
}

/// Oracle data prediction for a GaussianTask; defined for t < t1. At the
/// pivot the limit a -> 0 gives mu0, which GaussianOracle uses.
inline StateBatch oracle_data_prediction(const GaussianTask& task, const StateBatch& x_t, double t) {
  if (task.schedule.shift().saturated(t)) {
    throw SingularityError("oracle_data_prediction: t >= t1");
  }
  return gaussian_posterior_mean(task.q0, x_t, row_batch(task.xhat0), t, task.schedule);
}

class GaussianOracle : public DataPredictor {
 public:
  GaussianOracle(GaussianSpec q0, DoSSchedule s) : DataPredictor(std::move(s)), q0_(std::move(q0)) {}
  explicit GaussianOracle(const GaussianTask& task) : GaussianOracle(task.q0, task.schedule) {}

  StateBatch predict_data(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    return gaussian_posterior_mean(q0_, x_t, xhat0, t, schedule());
  }

  const GaussianSpec& target() const { return q0_; }

 private:
  GaussianSpec q0_;
};

/// Analytic score of the Gaussian marginal q_t for a fixed source point.
inline StateBatch gaussian_marginal_score(const GaussianSpec& q0, const Vector& xhat0, const StateBatch& x_t,
                                          double t, const DoSSchedule& s) {
  const Moments m = marginal_moments(q0, xhat0, t, s);
  StateBatch out = x_t;
  out.rowwise() -= m.mean.transpose();
  out.array().rowwise() /= -m.var.array().transpose();
  return out;
}

struct GaussianMixture {
  std::vector<double> weights;
  std::vector<GaussianSpec> components;

  GaussianMixture(std::vector<double> w, std::vector<GaussianSpec> c) : weights(std::move(w)), components(std::move(c)) {
    if (weights.empty() || weights.size() != components.size()) {
      throw ArgumentError("GaussianMixture: need matching nonempty weights and components");
    }
    double total = 0.0;
    for (double v : weights) {
      if (!(v > 0.0)) throw ArgumentError("GaussianMixture: weights must be positive");
      total += v;
    }
    for (double& v : weights) v /= total;
    for (const auto& comp : components) {
      if (comp.dim() != components.front().dim()) throw ArgumentError("GaussianMixture: dimension mismatch");
    }
  }

  Eigen::Index dim() const { return components.front().dim(); }

  Vector mean() const {
    Vector m = Vector::Zero(dim());
    for (std::size_t k = 0; k < weights.size(); ++k) m += weights[k] * components[k].mean;
    return m;
  }

  Vector variance() const {
    const Vector mu = mean();
    Vector v = Vector::Zero(dim());
    for (std::size_t k = 0; k < weights.size(); ++k) {
      v += weights[k] * (components[k].cov_diag + (components[k].mean - mu).cwiseAbs2());
    }
    return v;
  }

  StateBatch sample(Eigen::Index n, Rng& rng) const {
    StateBatch out(n, dim());
    for (Eigen::Index i = 0; i < n; ++i) {
      double u = rng.uniform();
      std::size_t k = 0;
      while (k + 1 < weights.size() && u >= weights[k]) u -= weights[k++];
      const auto& c = components[k];
      for (Eigen::Index j = 0; j < dim(); ++j) out(i, j) = c.mean[j] + std::sqrt(c.cov_diag[j]) * rng.normal();
    }
    return out;
  }
};

/// Posterior mean under a diagonal Gaussian-mixture prior: responsibilities
/// times per-component Gaussian posterior means. Valid at the pivot (a = 0)
/// where it returns the prior mean.
inline StateBatch mixture_posterior_mean(const GaussianMixture& q0, const StateBatch& x_t, const StateBatch& xhat0,
                                         double t, const DoSSchedule& s) {
  if (x_t.cols() != q0.dim()) throw ArgumentError("mixture posterior: dimension mismatch");
  const StateBatch src = broadcast_rows(xhat0, x_t.rows(), "mixture posterior");
  const double a = s.target_scale(t);
  const double b = s.source_scale(t);
  const double sig2 = s.sigma(t) * s.sigma(t);
  const std::size_t K = q0.weights.size();
  const Eigen::Index d = q0.dim();
  StateBatch out(x_t.rows(), d);
  std::vector<double> logw(K);
  for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const auto& c = q0.components[k];
      double lw = std::log(q0.weights[k]);
      for (Eigen::Index j = 0; j < d; ++j) {
        const double var = a * a * c.cov_diag[j] + sig2;
        const double r = x_t(i, j) - b * src(i, j) - a * c.mean[j];
        lw -= 0.5 * (std::log(var) + r * r / var);
      }
      logw[k] = lw;
      best = std::max(best, lw);
    }
    double norm = 0.0;
    for (double& lw : logw) norm += (lw = std::exp(lw - best));
    for (Eigen::Index j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const auto& c = q0.components[k];
        const double var = a * a * c.cov_diag[j] + sig2;
        const double r = x_t(i, j) - b * src(i, j) - a * c.mean[j];
        acc += logw[k] * (c.mean[j] + c.cov_diag[j] * a * r / var);
      }
      out(i, j) = acc / norm;
    }
  }
  return out;
}

class MixtureOracle : public DataPredictor {
 public:
  MixtureOracle(GaussianMixture q0, DoSSchedule s) : DataPredictor(std::move(s)), q0_(std::move(q0)) {}

  StateBatch predict_data(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    return mixture_posterior_mean(q0_, x_t, xhat0, t, schedule());
  }

  const GaussianMixture& target() const { return q0_; }

 private:
  GaussianMixture q0_;
};

/// Returns the same data prediction everywhere.
class ConstantDataPredictor : public DataPredictor {
 public:
  ConstantDataPredictor(Vector value, DoSSchedule s) : DataPredictor(std::move(s)), value_(std::move(value)) {}

  StateBatch predict_data(const StateBatch& x_t, const StateBatch&, double) const override {
    return value_.transpose().replicate(x_t.rows(), 1);
  }

 private:
  Vector value_;
};

/// x_data = base + slope (lambda_t - lambda_ref); linear along lambda.
class LambdaLinearPredictor : public DataPredictor {
 public:
  LambdaLinearPredictor(Vector base, Vector slope, double lambda_ref, DoSSchedule s)
      : DataPredictor(std::move(s)), base_(std::move(base)), slope_(std::move(slope)), lambda_ref_(lambda_ref) {}

  StateBatch predict_data(const StateBatch& x_t, const StateBatch&, double t) const override {
    const Vector v = base_ + (schedule().lambda(t) - lambda_ref_) * slope_;
    return v.transpose().replicate(x_t.rows(), 1);
  }

 private:
  Vector base_;
  Vector slope_;
  double lambda_ref_;
};

struct DenoisingLoss {
  double mean_norm;     // E || eps_hat - eps ||
  double mean_squared;  // E || eps_hat - eps ||^2
};

/// Monte Carlo estimate of the noise-prediction objective with unit weight
/// and t uniform on (0, t1]. Each of `time_samples` draws of t uses the full
/// batch of pairs.
inline DenoisingLoss noise_prediction_loss(const Predictor& p, const StateBatch& x0, const StateBatch& xhat0,
                                           int time_samples, Rng& rng) {
  const DoSSchedule& s = p.schedule();
  double sum_norm = 0.0;
  double sum_sq = 0.0;
  for (int k = 0; k < time_samples; ++k) {
    const double t = s.pivot() * (1.0 - rng.uniform());
    const MarginalDraw draw = training_pair(x0, xhat0, t, s, rng);
    const StateBatch err = p.predict_noise(draw.x_t, xhat0, t) - draw.eps;
    const Vector sq = err.rowwise().squaredNorm();
    sum_sq += sq.sum();
    sum_norm += sq.array().sqrt().sum();
  }
  const double count = static_cast<double>(time_samples) * static_cast<double>(x0.rows());
  return {sum_norm / count, sum_sq / count};
}

/// Predicts zero noise everywhere; the reference point for the objective.
class ZeroNoisePredictor : public NoisePredictor {
 public:
  using NoisePredictor::NoisePredictor;
  StateBatch predict_noise(const StateBatch& x_t, const StateBatch&, double) const override {
    return StateBatch::Zero(x_t.rows(), x_t.cols());
  }
};

}  // namespace shiftdiff
