#pragma once

// Reverse-time solvers for the domain-shift SDE.
//
// With lambda = sigma / (alpha (1 - eta)) and a = alpha (1 - eta), the exact
// solution from s to t < s reads
//   x_t = (a_t/a_s)(lambda_t/lambda_s)^2 x_s                              linear
//       + a_t (eta_t/(1-eta_t) - eta_s/(1-eta_s) (lambda_t/lambda_s)^2) xhat0   shift guidance
//       - a_t int_{lambda_s}^{lambda_t} 2 lambda_t^2 / lambda^3 x_data dlambda    prediction term
//       + sigma_t sqrt(1 - (lambda_t/lambda_s)^2) z                          noise
// Orders 1-3 replace the integral by a truncated Taylor expansion of x_data
// in lambda, with derivatives from backward differences of past predictions.
// Starting at the pivot t1 (eta = 1, lambda = inf) uses the exact limit of
// every coefficient.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "shiftdiff/prediction.hpp"
#include "shiftdiff/schedule.hpp"
#include "shiftdiff/state.hpp"

namespace shiftdiff {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Scalar weights of one exponential-integrator step from s to t.
struct StepCoefficients {
  double linear;         // multiplies x_s
  double dosg;           // multiplies xhat0
  double pat;            // multiplies x_data(s): a_t (1 - r)
  double noise;          // standard deviation of the noise term
  double target_scale;   // a_t
  double lambda_s;       // inf when s is the pivot
  double lambda_t;
  double ratio;          // r = (lambda_t / lambda_s)^2
};

namespace detail {

inline StepCoefficients coefficients_from(double alpha_t, double sigma_t, double eta_t, double ome_t,
                                          double alpha_s, double sigma_s, double eta_s, double ome_s) {
  const double a_t = alpha_t * ome_t;
  const double lambda_t = sigma_t / a_t;
  if (ome_s == 0.0) {
    // lambda_s -> inf: r -> 0, the linear term vanishes, and
    // a_t eta_s/(1-eta_s) r = a_t eta_s lambda_t^2 alpha_s^2 (1-eta_s) / sigma_s^2 -> 0.
    return {0.0, alpha_t * eta_t, a_t, sigma_t, a_t, kInf, lambda_t, 0.0};
  }
  const double a_s = alpha_s * ome_s;
  const double lambda_s = sigma_s / a_s;
  const double r = (lambda_t / lambda_s) * (lambda_t / lambda_s);
  return {
      a_t / a_s * r,
      alpha_t * eta_t - a_t * (eta_s / ome_s) * r,
      a_t * (1.0 - r),
      sigma_t * std::sqrt(std::max(0.0, 1.0 - r)),
      a_t,
      lambda_s,
      lambda_t,
      r,
  };
}

inline void check_step_times(const DoSSchedule& s, double sfrom, double t) {
  if (!(t < sfrom)) throw ArgumentError("solver step needs t < s");
  if (!(t > 0.0)) throw ArgumentError("solver step needs t > 0");
  if (s.shift().saturated(t)) throw SingularityError("solver step target t must lie below t1");
}

}  // namespace detail

inline StepCoefficients step_coefficients(const DoSSchedule& s, double sfrom, double t) {
  detail::check_step_times(s, sfrom, t);
  return detail::coefficients_from(s.alpha(t), s.sigma(t), s.eta(t), s.shift().one_minus_eta(t), s.alpha(sfrom),
                                   s.sigma(sfrom), s.eta(sfrom), s.shift().one_minus_eta(sfrom));
}

/// Same as step_coefficients but a saturated eta_s is replaced by `eta_clamp`
/// and the finite formulas are used. Only meant for cross-checking the limit.
inline StepCoefficients step_coefficients_clamped(const DoSSchedule& s, double sfrom, double t,
                                                  double eta_clamp = 1.0 - 1e-8) {
  detail::check_step_times(s, sfrom, t);
  double eta_s = s.eta(sfrom);
  double ome_s = s.shift().one_minus_eta(sfrom);
  if (ome_s == 0.0) {
    eta_s = eta_clamp;
    ome_s = 1.0 - eta_clamp;
  }
  return detail::coefficients_from(s.alpha(t), s.sigma(t), s.eta(t), s.shift().one_minus_eta(t), s.alpha(sfrom),
                                   s.sigma(sfrom), eta_s, ome_s);
}

/// Domain shift guidance term: coefficient times xhat0. At sfrom = t1 this is
/// alpha_t eta_t xhat0.
inline StateBatch dosg_term(double t, double sfrom, const StateBatch& xhat0, const DoSSchedule& s) {
  return step_coefficients(s, sfrom, t).dosg * xhat0;
}

/// Second-derivative weight: (l_s - 3 l_t)(l_s - l_t)/2 - l_t^2 ln(l_t / l_s).
inline double second_order_weight(double lambda_s, double lambda_t) {
  return 0.5 * (lambda_s - 3.0 * lambda_t) * (lambda_s - lambda_t) -
         lambda_t * lambda_t * std::log1p((lambda_t - lambda_s) / lambda_s);
}

/// First-derivative weight: (l_t - l_s)^2 / l_s (subtracted).
inline double first_order_weight(double lambda_s, double lambda_t) {
  return (lambda_t - lambda_s) * (lambda_t - lambda_s) / lambda_s;
}

/// x_{t1} = alpha_{t1} xhat0 + sigma_{t1} eps; one sample per row of xhat0.
inline StateBatch init_state(const StateBatch& xhat0, double t1, const DoSSchedule& s, Rng& rng, bool noise = true) {
  check_batch(xhat0, "init_state");
  if (!(t1 > 0.0 && t1 <= kHorizon)) throw ArgumentError("init_state: t1 must lie in (0, 1]");
  StateBatch x = s.alpha(t1) * xhat0;
  if (noise) x += s.sigma(t1) * rng.standard_normal(xhat0.rows(), xhat0.cols());
  return x;
}

struct StepTerms {
  StateBatch linear;
  StateBatch dosg;
  StateBatch pat;
  StateBatch noise;

  StateBatch sum() const { return linear + dosg + pat + noise; }
  StateBatch deterministic() const { return linear + dosg + pat; }
};

/// Buffered solver state: current point plus the previous data prediction (Q)
/// and the previous first-derivative estimate (Q_d).
struct SolverState {
  StateBatch x;
  double t = 0.0;
  std::optional<StateBatch> q;   // x_data at the previous point
  double q_lambda = kInf;        // lambda at that point
  std::optional<StateBatch> qd;  // previous divided difference
  double qd_lambda_far = kInf;   // older lambda used by that difference

  SolverState() = default;
  SolverState(StateBatch x0, double t0) : x(std::move(x0)), t(t0) {}
};

struct StepReport {
  StepTerms terms;
  StepCoefficients coef;
  StateBatch data_prediction;  // x_data(x_s, s)
  int order_used = 1;
  double t_from = 0.0;
  double t_to = 0.0;
};

struct StepOptions {
  bool noise = true;
};

/// Advances `state` from state.t to t with the requested order, degrading to
/// lower orders while derivative buffers are missing or infinite. When
/// `given_prediction` is set it replaces the predictor call at state.t.
inline StepReport solver_step(SolverState& state, double t, int order, const Predictor& predictor,
                              const StateBatch& xhat0, Rng* rng, StepOptions opts = {},
                              const StateBatch* given_prediction = nullptr) {
  if (order < 1 || order > 3) throw ArgumentError("solver order must be 1, 2 or 3");
  const DoSSchedule& s = predictor.schedule();
  const StateBatch src = broadcast_rows(xhat0, state.x.rows(), "solver_step");
  StepReport rep;
  rep.t_from = state.t;
  rep.t_to = t;
  rep.coef = step_coefficients(s, state.t, t);
  const StepCoefficients& c = rep.coef;
  rep.data_prediction = given_prediction ? *given_prediction : predictor.predict_data(state.x, src, state.t);
  check_same_shape(rep.data_prediction, state.x, "solver_step prediction");

  rep.terms.linear = c.linear == 0.0 ? StateBatch::Zero(state.x.rows(), state.x.cols()) : StateBatch(c.linear * state.x);
  rep.terms.dosg = c.dosg * src;
  rep.terms.pat = c.pat * rep.data_prediction;

  std::optional<StateBatch> d_now;
  const bool have_first = order >= 2 && state.q && std::isfinite(state.q_lambda) && std::isfinite(c.lambda_s);
  if (have_first) {
    if (c.lambda_s == state.q_lambda) throw GridError("repeated lambda in divided difference");
    d_now = (rep.data_prediction - *state.q) / (c.lambda_s - state.q_lambda);
    rep.terms.pat -= (c.target_scale * first_order_weight(c.lambda_s, c.lambda_t)) * *d_now;
    rep.order_used = 2;
    if (order >= 3 && state.qd && std::isfinite(state.qd_lambda_far)) {
      const double span = 0.5 * (c.lambda_s - state.qd_lambda_far);
      if (span == 0.0) throw GridError("repeated lambda in second divided difference");
      const StateBatch u = (*d_now - *state.qd) / span;
      rep.terms.pat += (c.target_scale * second_order_weight(c.lambda_s, c.lambda_t)) * u;
      rep.order_used = 3;
    }
  }

  if (opts.noise && c.noise > 0.0) {
    if (!rng) throw ArgumentError("solver_step: noise requested without a generator");
    rep.terms.noise = c.noise * rng->standard_normal(state.x.rows(), state.x.cols());
  } else {
    rep.terms.noise = StateBatch::Zero(state.x.rows(), state.x.cols());
  }

  // Buffers: Q <- current prediction; Q_d <- current difference (or absent).
  const double lambda_prev = state.q_lambda;
  state.qd = std::move(d_now);
  state.qd_lambda_far = state.qd ? lambda_prev : kInf;
  state.q = rep.data_prediction;
  state.q_lambda = c.lambda_s;
  state.x = rep.terms.sum();
  state.t = t;
  return rep;
}

inline StepReport step_order1(SolverState& state, double t, const Predictor& p, const StateBatch& xhat0, Rng* rng,
                              StepOptions opts = {}) {
  return solver_step(state, t, 1, p, xhat0, rng, opts);
}

inline StepReport step_order2(SolverState& state, double t, const Predictor& p, const StateBatch& xhat0, Rng* rng,
                              StepOptions opts = {}) {
  return solver_step(state, t, 2, p, xhat0, rng, opts);
}

inline StepReport step_order3(SolverState& state, double t, const Predictor& p, const StateBatch& xhat0, Rng* rng,
                              StepOptions opts = {}) {
  return solver_step(state, t, 3, p, xhat0, rng, opts);
}

struct QuadratureResult {
  StateBatch mean;       // linear + guidance + a_t * integral
  StateBatch integral;   // -int 2 lambda_t^2/lambda^3 x_data dlambda
  StateBatch path_end;   // endpoint of the noise-free path, equal to mean up to integration error
  double noise_std = 0.0;
  int points = 0;
};

namespace detail {

// One pass of RK4 in u = log(lambda) on the noise-free dynamics
//   dy/du = 2 (y - x_data),  dJ/du = -2 (lambda_t/lambda)^2 x_data,
// where y = (x - alpha eta xhat0) / (alpha (1 - eta)).
inline void quadrature_pass(const StateBatch& x_s, double sfrom, double t, const Predictor& p, const StateBatch& src,
                            int n, StateBatch& integral, StateBatch& y_end) {
  const DoSSchedule& s = p.schedule();
  const double u_s = std::log(s.lambda(sfrom));
  const double u_t = std::log(s.lambda(t));
  const double h = (u_t - u_s) / n;
  auto time_at = [&](double u) {
    if (u >= u_s) return sfrom;
    if (u <= u_t) return t;
    return s.time_at_lambda(std::exp(u), t, sfrom);
  };
  auto rhs = [&](double u, double tau, const StateBatch& y, StateBatch& dy, StateBatch& dj) {
    const StateBatch x = s.target_scale(tau) * y + s.source_scale(tau) * src;
    const StateBatch xd = p.predict_data(x, src, tau);
    dy = 2.0 * (y - xd);
    dj = (-2.0 * std::exp(2.0 * (u_t - u))) * xd;
  };
  StateBatch y = (x_s - s.source_scale(sfrom) * src) / s.target_scale(sfrom);
  integral = StateBatch::Zero(x_s.rows(), x_s.cols());
  StateBatch k1, k2, k3, k4, j1, j2, j3, j4;
  double tau0 = sfrom;
  for (int i = 0; i < n; ++i) {
    const double u0 = u_s + i * h;
    const double um = u0 + 0.5 * h;
    const double u1 = (i + 1 == n) ? u_t : u0 + h;
    const double taum = time_at(um);
    const double tau1 = time_at(u1);
    rhs(u0, tau0, y, k1, j1);
    rhs(um, taum, y + 0.5 * h * k1, k2, j2);
    rhs(um, taum, y + 0.5 * h * k2, k3, j3);
    rhs(u1, tau1, y + h * k3, k4, j4);
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    integral += (h / 6.0) * (j1 + 2.0 * j2 + 2.0 * j3 + j4);
    tau0 = tau1;
  }
  y_end = std::move(y);
}

}  // namespace detail

/// Reference value of one step along the noise-free path: the exact-solution
/// integral evaluated by RK4 in log(lambda), refined by doubling the point
/// count until successive results agree to `rel_tol`.
inline QuadratureResult exact_step_quadrature(const StateBatch& x_s, double sfrom, double t, const Predictor& p,
                                              const StateBatch& xhat0, int quad_points = 64, double rel_tol = 1e-11,
                                              int max_points = 1 << 15) {
  const DoSSchedule& s = p.schedule();
  if (quad_points < 64) throw ArgumentError("exact_step_quadrature: need at least 64 points");
  if (s.shift().saturated(sfrom)) throw SingularityError("exact_step_quadrature: s must lie below t1");
  detail::check_step_times(s, sfrom, t);
  const StateBatch src = broadcast_rows(xhat0, x_s.rows(), "exact_step_quadrature");
  StateBatch prev_int, prev_y, cur_int, cur_y;
  detail::quadrature_pass(x_s, sfrom, t, p, src, quad_points, prev_int, prev_y);
  int n = quad_points;
  for (;;) {
    if (2 * n > max_points) {
      throw NumericError("exact_step_quadrature did not converge within " + std::to_string(max_points) + " points");
    }
    n *= 2;
    detail::quadrature_pass(x_s, sfrom, t, p, src, n, cur_int, cur_y);
    const double scale = std::max(1.0, cur_int.cwiseAbs().maxCoeff());
    const double change = (cur_int - prev_int).cwiseAbs().maxCoeff();
    prev_int = cur_int;
    prev_y = cur_y;
    if (change <= rel_tol * scale) break;
  }
  const StepCoefficients c = step_coefficients(s, sfrom, t);
  QuadratureResult out;
  out.integral = prev_int;
  out.mean = c.linear * x_s + c.dosg * src + c.target_scale * prev_int;
  out.path_end = c.target_scale * prev_y + s.source_scale(t) * src;
  out.noise_std = c.noise;
  out.points = n;
  return out;
}

struct ReverseOptions {
  bool noise = true;
  bool score = true;
};

/// Euler-Maruyama on the reverse SDE
///   dx = [f x + h xhat0 - g^2 score] dt + g dw,
/// over a strictly decreasing grid below t1. The score comes from the data
/// prediction through data_to_score.
inline StateBatch euler_maruyama_reverse(const Predictor& p, const StateBatch& xhat0, const StateBatch& x_start,
                                         const TimeGrid& grid, Rng& rng, ReverseOptions opts = {}) {
  const DoSSchedule& s = p.schedule();
  for (double t : grid.times()) {
    if (s.shift().saturated(t)) throw DomainError("euler_maruyama_reverse: grid touches t >= t1");
  }
  const StateBatch src = broadcast_rows(xhat0, x_start.rows(), "euler_maruyama_reverse");
  StateBatch x = x_start;
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const double t = grid[k];
    const double dt = grid[k + 1] - t;
    const SdeCoefficients c = s.sde_coefficients(t);
    StateBatch drift = c.f * x + c.h * src;
    if (opts.score) drift -= c.g2 * p.predict_score(x, src, t);
    x += dt * drift;
    if (opts.noise) x += (c.g * std::sqrt(-dt)) * rng.standard_normal(x.rows(), x.cols());
  }
  return x;
}

/// Fine grid for the reference integrator: log-lambda spacing from
/// (1 - 1e-4) t1 down to t_end.
inline TimeGrid reference_grid(const DoSSchedule& s, int steps, double t_end = 1e-3) {
  const double top = (1.0 - kPivotBackoff) * s.pivot();
  std::vector<double> times(static_cast<std::size_t>(steps) + 1);
  const double l_top = std::log(s.lambda(top));
  const double l_end = std::log(s.lambda(t_end));
  times.front() = top;
  times.back() = t_end;
  for (int i = 1; i < steps; ++i) {
    times[i] = s.time_at_lambda(std::exp(l_top + (l_end - l_top) * i / steps), t_end, top);
  }
  return TimeGrid(std::move(times));
}

enum class FinalOutput { state, data_prediction };

struct SolverConfig {
  int order = 3;
  TimeGrid grid;
  std::uint64_t seed = 0;
  FinalOutput final_output = FinalOutput::data_prediction;
  bool noise = true;       // per-step noise
  bool init_noise = true;  // noise in the initial value at t1

  explicit SolverConfig(TimeGrid g) : grid(std::move(g)) {}

  /// Five steps, third order, t1 from the schedule (T/2 by default).
  static SolverConfig standard(const DoSSchedule& s) {
    SolverConfig cfg(make_time_grid(s, 5, 1e-3));
    cfg.order = 3;
    return cfg;
  }
};

struct StepTrace {
  int index;
  double t_from;
  double t_to;
  double lambda_from;
  double lambda_to;
  int order_used;
  double linear_norm;
  double dosg_norm;
  double pat_norm;
  double noise_norm;
};

struct SampleResult {
  StateBatch output;  // per final_output
  StateBatch state;   // state at the last grid time
  std::vector<StepTrace> trace;
  long nfe = 0;
};

namespace detail {

inline double rms(const StateBatch& x) { return x.norm() / std::sqrt(static_cast<double>(x.rows())); }

}  // namespace detail

/// Runs the configured solver from x_start at grid.front() (the pivot or any
/// interior time). One predictor call per grid step. With data_prediction
/// output the last call's prediction is returned and the last update is
/// taken without noise.
inline SampleResult run_solver(const Predictor& predictor, const StateBatch& xhat0, const StateBatch& x_start,
                               const SolverConfig& cfg, Rng& rng) {
  if (cfg.order < 1 || cfg.order > 3) throw ArgumentError("solver order must be 1, 2 or 3");
  CountingPredictor counted(predictor);
  const StateBatch src = broadcast_rows(xhat0, x_start.rows(), "run_solver");
  SolverState state(x_start, cfg.grid.front());
  SampleResult res;
  const std::size_t n = cfg.grid.steps();
  for (std::size_t i = 0; i < n; ++i) {
    const bool last = i + 1 == n;
    StepOptions opts;
    opts.noise = cfg.noise && !(last && cfg.final_output == FinalOutput::data_prediction);
    const StepReport rep = solver_step(state, cfg.grid[i + 1], cfg.order, counted, src, &rng, opts);
    res.trace.push_back({static_cast<int>(i + 1), rep.t_from, rep.t_to, rep.coef.lambda_s, rep.coef.lambda_t,
                         rep.order_used, detail::rms(rep.terms.linear), detail::rms(rep.terms.dosg),
                         detail::rms(rep.terms.pat), detail::rms(rep.terms.noise)});
    if (last && cfg.final_output == FinalOutput::data_prediction) res.output = rep.data_prediction;
  }
  res.state = state.x;
  if (cfg.final_output == FinalOutput::state) res.output = state.x;
  res.nfe = counted.calls();
  return res;
}

/// Full sampler: initial value at the pivot, then the configured steps.
inline SampleResult sample(const Predictor& predictor, const StateBatch& xhat0, const SolverConfig& cfg) {
  const DoSSchedule& s = predictor.schedule();
  if (cfg.grid.front() != s.pivot()) throw ArgumentError("sample: grid must start at t1");
  Rng rng(cfg.seed);
  const StateBatch x = init_state(xhat0, s.pivot(), s, rng, cfg.init_noise);
  return run_solver(predictor, xhat0, x, cfg, rng);
}

}  // namespace shiftdiff
