#pragma once

// Time parameterization of the domain-shift diffusion: the variance-preserving
// noise schedule (alpha_t, sigma_t), the shifting sequence eta_t with pivot t1,
// the ratio lambda_t = sigma_t / (alpha_t (1 - eta_t)) and the forward SDE
// coefficients. Internal time is continuous on [0, 1]; integer step indices
// used for display map through round(1000 t).

#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "shiftdiff/errors.hpp"

namespace shiftdiff {

inline constexpr double kHorizon = 1.0;
inline constexpr int kDisplaySteps = 1000;

inline int display_step(double t) { return static_cast<int>(std::lround(kDisplaySteps * t)); }

enum class NoiseKind { linear_beta, cosine };

struct NoisePoint {
  double alpha;
  double sigma;
};

class NoiseSchedule {
 public:
  /// Linear beta(t) = beta_min + t (beta_max - beta_min), rates per unit time.
  /// The defaults are the DDPM limits 1e-4 and 2e-2 per step times 1000 steps.
  static NoiseSchedule linear_beta(double beta_min = 0.1, double beta_max = 20.0) {
    if (!(beta_min >= 0.0) || !(beta_max >= beta_min) || !(beta_max > 0.0)) {
      throw ArgumentError("linear-beta schedule needs 0 <= beta_min <= beta_max, beta_max > 0");
    }
    return NoiseSchedule(NoiseKind::linear_beta, beta_min, beta_max, 0.0);
  }

  /// alpha_t = cos(phi(t)) / cos(phi(0)), phi(t) = (t + s)/(1 + s) * pi/2.
  static NoiseSchedule cosine(double offset = 0.008) {
    if (!(offset > 0.0)) throw ArgumentError("cosine schedule offset must be positive");
    return NoiseSchedule(NoiseKind::cosine, 0.0, 0.0, offset);
  }

  NoiseKind kind() const { return kind_; }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }
  double cosine_offset() const { return offset_; }

  double log_alpha(double t) const {
    check_time(t);
    if (kind_ == NoiseKind::linear_beta) {
      return -0.5 * (beta_min_ * t + 0.5 * (beta_max_ - beta_min_) * t * t);
    }
    return std::log(std::cos(phi(t)) / std::cos(phi(0.0)));
  }

  double alpha(double t) const {
    check_time(t);
    if (kind_ == NoiseKind::linear_beta) return std::exp(log_alpha(t));
    return std::cos(phi(t)) / std::cos(phi(0.0));
  }

  double sigma(double t) const {
    check_time(t);
    if (kind_ == NoiseKind::linear_beta) return std::sqrt(-std::expm1(2.0 * log_alpha(t)));
    const double a = alpha(t);
    return std::sqrt(std::max(0.0, (1.0 - a) * (1.0 + a)));
  }

  NoisePoint eval(double t) const { return {alpha(t), sigma(t)}; }

  double dalpha_dt(double t) const {
    check_time(t);
    if (kind_ == NoiseKind::linear_beta) return -0.5 * beta(t) * alpha(t);
    return -std::sin(phi(t)) * phi_rate() / std::cos(phi(0.0));
  }

  /// d(sigma^2)/dt = -2 alpha alpha'; finite at t = 0 where dsigma/dt is not.
  double dsigma2_dt(double t) const { return -2.0 * alpha(t) * dalpha_dt(t); }

  double dsigma_dt(double t) const { return 0.5 * dsigma2_dt(t) / sigma(t); }

 private:
  NoiseSchedule(NoiseKind kind, double beta_min, double beta_max, double offset)
      : kind_(kind), beta_min_(beta_min), beta_max_(beta_max), offset_(offset) {}

  static void check_time(double t) {
    if (!(t >= 0.0 && t <= kHorizon)) {
      throw DomainError("noise schedule: time " + std::to_string(t) + " outside [0, 1]");
    }
  }

  double beta(double t) const { return beta_min_ + t * (beta_max_ - beta_min_); }
  double phi_rate() const { return 0.5 * std::numbers::pi / (1.0 + offset_); }
  double phi(double t) const { return (t + offset_) * phi_rate(); }

  NoiseKind kind_;
  double beta_min_;
  double beta_max_;
  double offset_;
};

/// eta_t = (1 - cos(pi t / t1)) / 2 on [0, t1] and 1 afterwards. The `none`
/// variant keeps eta at zero everywhere (plain variance-preserving diffusion);
/// its t1 only marks where reverse sampling starts.
class ShiftingSequence {
 public:
  static ShiftingSequence cosine(double t1) {
    check_pivot(t1);
    return ShiftingSequence(t1, true);
  }

  static ShiftingSequence none(double t1 = 0.5 * kHorizon) {
    check_pivot(t1);
    return ShiftingSequence(t1, false);
  }

  double pivot() const { return t1_; }
  bool shifting() const { return shifting_; }

  /// True where eta has reached one and 1 - eta vanishes.
  bool saturated(double t) const { return shifting_ && t >= t1_; }

  double eta(double t) const {
    check_time(t);
    if (!shifting_) return 0.0;
    if (t >= t1_) return 1.0;
    const double u = t / t1_;
    // sin^2 keeps relative precision near 0; the shifted sine is exact at u = 1/2.
    if (u < 0.25) {
      const double sn = std::sin(0.5 * std::numbers::pi * u);
      return sn * sn;
    }
    return 0.5 - 0.5 * std::sin(std::numbers::pi * (0.5 - u));
  }

  /// cos^2(pi t / (2 t1)); keeps relative precision as t approaches t1.
  double one_minus_eta(double t) const {
    check_time(t);
    if (!shifting_) return 1.0;
    if (t >= t1_) return 0.0;
    const double c = std::cos(0.5 * std::numbers::pi * t / t1_);
    return c * c;
  }

  double deta_dt(double t) const {
    check_time(t);
    if (!shifting_ || t >= t1_) return 0.0;
    return 0.5 * std::numbers::pi / t1_ * std::sin(std::numbers::pi * t / t1_);
  }

 private:
  ShiftingSequence(double t1, bool shifting) : t1_(t1), shifting_(shifting) {}

  static void check_pivot(double t1) {
    if (!(t1 > 0.0 && t1 <= kHorizon)) {
      throw ArgumentError("shifting sequence pivot t1 must lie in (0, 1]");
    }
  }

  static void check_time(double t) {
    if (!(t >= 0.0 && t <= kHorizon)) {
      throw DomainError("shifting sequence: time " + std::to_string(t) + " outside [0, 1]");
    }
  }

  double t1_;
  bool shifting_;
};

struct SdeCoefficients {
  double f;   // d log[alpha (1 - eta)] / dt
  double h;   // alpha / (1 - eta) * d eta / dt
  double g;   // sqrt(g2)
  double g2;  // d sigma^2/dt - 2 f sigma^2, clamped at 0 within -1e-12
};

class DoSSchedule {
 public:
  DoSSchedule(NoiseSchedule noise, ShiftingSequence shift) : noise_(noise), shift_(shift) {}

  /// Linear-beta noise and cosine shift with t1 = T/2.
  static DoSSchedule standard(double t1 = 0.5 * kHorizon) {
    return {NoiseSchedule::linear_beta(), ShiftingSequence::cosine(t1)};
  }

  const NoiseSchedule& noise() const { return noise_; }
  const ShiftingSequence& shift() const { return shift_; }
  double pivot() const { return shift_.pivot(); }

  double alpha(double t) const { return noise_.alpha(t); }
  double sigma(double t) const { return noise_.sigma(t); }
  double eta(double t) const { return shift_.eta(t); }

  /// alpha_t (1 - eta_t), the weight of x0 in the marginal mean.
  double target_scale(double t) const { return noise_.alpha(t) * shift_.one_minus_eta(t); }

  /// alpha_t eta_t, the weight of the source point in the marginal mean.
  double source_scale(double t) const { return noise_.alpha(t) * shift_.eta(t); }

  double lambda(double t) const {
    require_below_pivot(t, "lambda");
    return noise_.sigma(t) / target_scale(t);
  }

  double dlambda_dt(double t) const {
    require_below_pivot(t, "dlambda/dt");
    const double a = target_scale(t);
    const double da = noise_.dalpha_dt(t) * shift_.one_minus_eta(t) - noise_.alpha(t) * shift_.deta_dt(t);
    return noise_.dsigma_dt(t) / a - noise_.sigma(t) * da / (a * a);
  }

  SdeCoefficients sde_coefficients(double t) const {
    require_below_pivot(t, "SDE coefficients");
    const double alpha = noise_.alpha(t);
    const double ome = shift_.one_minus_eta(t);
    const double deta = shift_.deta_dt(t);
    const double f = noise_.dalpha_dt(t) / alpha - deta / ome;
    const double h = alpha / ome * deta;
    const double sigma = noise_.sigma(t);
    double g2 = noise_.dsigma2_dt(t) - 2.0 * f * sigma * sigma;
    if (g2 < 0.0) {
      if (g2 < -1e-12) {
        throw ScheduleError("negative diffusion radicand " + std::to_string(g2) + " at t = " +
                            std::to_string(t));
      }
      g2 = 0.0;
    }
    return {f, h, std::sqrt(g2), g2};
  }

  /// Inverse of lambda on [lo, hi] (lambda is increasing in t).
  double time_at_lambda(double target, double lo, double hi) const {
    const double l_lo = lambda(lo);
    const double l_hi = lambda(hi);
    if (target <= l_lo) return lo;
    if (target >= l_hi) return hi;
    std::uintmax_t iters = 200;
    auto fn = [&](double t) { return std::log(lambda(t)) - std::log(target); };
    const auto bracket = boost::math::tools::toms748_solve(
        fn, lo, hi, std::log(l_lo) - std::log(target), std::log(l_hi) - std::log(target),
        boost::math::tools::eps_tolerance<double>(50), iters);
    return 0.5 * (bracket.first + bracket.second);
  }

 private:
  void require_below_pivot(double t, const char* what) const {
    if (shift_.saturated(t)) {
      throw SingularityError(std::string(what) + " is singular for t >= t1 (t = " + std::to_string(t) +
                             ", t1 = " + std::to_string(shift_.pivot()) + ")");
    }
  }

  NoiseSchedule noise_;
  ShiftingSequence shift_;
};

inline NoisePoint eval_noise(const NoiseSchedule& sched, double t) { return sched.eval(t); }
inline double eval_eta(const ShiftingSequence& shift, double t) { return shift.eta(t); }
inline double eval_lambda(const DoSSchedule& s, double t) { return s.lambda(t); }
inline SdeCoefficients sde_coefficients(const DoSSchedule& s, double t) { return s.sde_coefficients(t); }

/// Strictly decreasing reverse-time grid starting at the pivot.
class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) {
    if (times_.size() < 2) throw ArgumentError("time grid needs at least two times");
    for (std::size_t i = 0; i < times_.size(); ++i) {
      if (!(times_[i] > 0.0 && times_[i] <= kHorizon)) {
        throw ArgumentError("time grid entries must lie in (0, 1]");
      }
      if (i > 0 && !(times_[i] < times_[i - 1])) {
        throw ArgumentError("time grid must be strictly decreasing");
      }
    }
  }

  std::span<const double> times() const { return times_; }
  double operator[](std::size_t i) const { return times_[i]; }
  std::size_t size() const { return times_.size(); }
  std::size_t steps() const { return times_.size() - 1; }
  double front() const { return times_.front(); }
  double back() const { return times_.back(); }

 private:
  std::vector<double> times_;
};

enum class GridSpacing { uniform_t, uniform_lambda, uniform_log_lambda };

inline GridSpacing parse_spacing(const std::string& name) {
  if (name == "uniform-t") return GridSpacing::uniform_t;
  if (name == "uniform-lambda") return GridSpacing::uniform_lambda;
  if (name == "uniform-log-lambda") return GridSpacing::uniform_log_lambda;
  throw ConfigError("unknown grid spacing '" + name + "'");
}

inline const char* spacing_name(GridSpacing s) {
  switch (s) {
    case GridSpacing::uniform_t: return "uniform-t";
    case GridSpacing::uniform_lambda: return "uniform-lambda";
    case GridSpacing::uniform_log_lambda: return "uniform-log-lambda";
  }
  return "?";
}

/// The lambda-based spacings evaluate lambda at (1 - 1e-4) t1 in place of the
/// (infinite) pivot value; the first grid entry is still t1 itself.
inline constexpr double kPivotBackoff = 1e-4;

inline TimeGrid make_time_grid(const DoSSchedule& s, int steps, double t_end,
                               GridSpacing spacing = GridSpacing::uniform_t) {
  const double t1 = s.pivot();
  if (steps < 1) throw ArgumentError("time grid needs at least one step");
  if (!(t_end > 0.0 && t_end < t1)) throw ArgumentError("time grid needs 0 < t_end < t1");
  std::vector<double> times(static_cast<std::size_t>(steps) + 1);
  times.front() = t1;
  times.back() = t_end;
  if (spacing == GridSpacing::uniform_t) {
    for (int i = 1; i < steps; ++i) times[i] = t1 + (t_end - t1) * static_cast<double>(i) / steps;
  } else {
    const double t_top = (1.0 - kPivotBackoff) * t1;
    if (!(t_end < t_top)) throw ArgumentError("t_end too close to t1 for lambda spacing");
    const double l_top = s.lambda(t_top);
    const double l_end = s.lambda(t_end);
    for (int i = 1; i < steps; ++i) {
      const double frac = static_cast<double>(i) / steps;
      const double target = spacing == GridSpacing::uniform_lambda
                                ? l_top + (l_end - l_top) * frac
                                : std::exp(std::log(l_top) + (std::log(l_end) - std::log(l_top)) * frac);
      times[i] = s.time_at_lambda(target, t_end, t_top);
    }
  }
  return TimeGrid(std::move(times));
}

/// Uniform-t grid from an explicit pivot; no schedule needed.
inline TimeGrid make_time_grid(double t1, int steps, double t_end) {
  if (steps < 1) throw ArgumentError("time grid needs at least one step");
  if (!(t_end > 0.0 && t_end < t1)) throw ArgumentError("time grid needs 0 < t_end < t1");
  std::vector<double> times(static_cast<std::size_t>(steps) + 1);
  times.front() = t1;
  times.back() = t_end;
  for (int i = 1; i < steps; ++i) times[i] = t1 + (t_end - t1) * static_cast<double>(i) / steps;
  return TimeGrid(std::move(times));
}

}  // namespace shiftdiff
