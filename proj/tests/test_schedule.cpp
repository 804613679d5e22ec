#include <gtest/gtest.h>

#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "shiftdiff/forward.hpp"
#include "shiftdiff/schedule.hpp"

using namespace shiftdiff;

namespace {

double central(auto&& f, double t, double h = 1e-6) { return (f(t + h) - f(t - h)) / (2.0 * h); }

void expect_rel(double got, double want, double tol) {
  EXPECT_LE(std::abs(got - want), tol * std::max(std::abs(want), 1e-300)) << got << " vs " << want;
}

}  // namespace

TEST(NoiseSchedule, VariancePreservingAtRandomTimes) {
  Rng rng(3);
  for (const NoiseSchedule& n : {NoiseSchedule::linear_beta(), NoiseSchedule::cosine()}) {
    for (int i = 0; i < 1000; ++i) {
      const double t = rng.uniform();
      const NoisePoint p = eval_noise(n, t);
      EXPECT_NEAR(p.alpha * p.alpha + p.sigma * p.sigma, 1.0, 1e-12);
    }
  }
}

TEST(NoiseSchedule, MonotoneWithEndpointBounds) {
  for (const NoiseSchedule& n : {NoiseSchedule::linear_beta(), NoiseSchedule::cosine()}) {
    EXPECT_GE(n.alpha(0.0), 1.0 - 1e-3);
    EXPECT_LE(n.alpha(1.0), 1e-2);
    double pa = n.alpha(0.0), ps = n.sigma(0.0);
    for (int i = 1; i <= 1000; ++i) {
      const double t = i / 1000.0;
      EXPECT_LT(n.alpha(t), pa);
      EXPECT_GT(n.sigma(t), ps);
      pa = n.alpha(t);
      ps = n.sigma(t);
    }
  }
}

TEST(NoiseSchedule, CleanEndpoint) {
  const NoisePoint p = eval_noise(NoiseSchedule::linear_beta(), 0.0);
  EXPECT_NEAR(p.alpha, 1.0, 1e-12);
  EXPECT_NEAR(p.sigma, 0.0, 1e-12);
}

TEST(NoiseSchedule, LinearBetaTerminalAlphaMatchesIntegratedBeta) {
  const NoiseSchedule n = NoiseSchedule::linear_beta(1e-4 * 1000, 2e-2 * 1000);
  const double want = oracle::alpha_by_quadrature(0.1, 20.0, 1.0);
  EXPECT_LT(want, 0.01);
  expect_rel(n.alpha(1.0), want, 1e-12);
  for (double t : {0.1, 0.37, 0.5, 0.9}) expect_rel(n.alpha(t), oracle::alpha_by_quadrature(0.1, 20.0, t), 1e-12);
}

TEST(NoiseSchedule, DerivativesMatchCentralDifferences) {
  for (const NoiseSchedule& n : {NoiseSchedule::linear_beta(), NoiseSchedule::cosine()}) {
    for (int i = 0; i <= 200; ++i) {
      const double t = 1e-3 + (1.0 - 2e-3) * i / 200.0;
      expect_rel(n.dalpha_dt(t), central([&](double u) { return n.alpha(u); }, t), 1e-5);
      expect_rel(n.dsigma_dt(t), central([&](double u) { return n.sigma(u); }, t), 1e-5);
    }
  }
}

TEST(NoiseSchedule, RejectsOutOfRangeTime) {
  const NoiseSchedule n = NoiseSchedule::linear_beta();
  EXPECT_THROW(n.alpha(-1e-9), DomainError);
  EXPECT_THROW(eval_noise(n, 1.0 + 1e-9), DomainError);
  EXPECT_THROW(NoiseSchedule::linear_beta(2.0, 1.0), ArgumentError);
}

TEST(ShiftingSequence, ClosedFormValues) {
  const ShiftingSequence sh = ShiftingSequence::cosine(0.5);
  EXPECT_EQ(eval_eta(sh, 0.0), 0.0);
  EXPECT_EQ(eval_eta(sh, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(eval_eta(sh, 0.25), 0.5);
  EXPECT_NEAR(eval_eta(sh, 0.5 / 3.0), 0.25, 1e-15);
  for (double t : {0.5, 0.6, 0.75, 1.0}) EXPECT_EQ(eval_eta(sh, t), 1.0);
}

TEST(ShiftingSequence, MidpointIsExactlyHalfForAnyPivot) {
  for (double t1 : {0.2, 0.5, 2.0 / 3.0, 1.0}) EXPECT_EQ(ShiftingSequence::cosine(t1).eta(t1 / 2.0), 0.5);
}

TEST(ShiftingSequence, MonotoneBoundedContinuous) {
  const ShiftingSequence sh = ShiftingSequence::cosine(0.5);
  double prev = 0.0;
  for (int i = 0; i <= 10000; ++i) {
    const double e = sh.eta(i / 10000.0);
    EXPECT_GE(e, prev);
    EXPECT_LE(e - prev, 1e-3);
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 1.0);
    prev = e;
  }
}

TEST(ShiftingSequence, DerivativeMatchesCentralDifference) {
  const ShiftingSequence sh = ShiftingSequence::cosine(0.5);
  for (int i = 0; i <= 200; ++i) {
    const double t = 1e-3 + (0.5 - 2e-3) * i / 200.0;
    expect_rel(sh.deta_dt(t), central([&](double u) { return sh.eta(u); }, t), 1e-5);
    EXPECT_NEAR(sh.one_minus_eta(t), 1.0 - sh.eta(t), 1e-15);
  }
}

TEST(ShiftingSequence, RejectsOutOfRangeTime) {
  EXPECT_THROW(eval_eta(ShiftingSequence::cosine(0.5), 1.5), DomainError);
  EXPECT_THROW(ShiftingSequence::cosine(0.0), ArgumentError);
}

TEST(Lambda, UnitWhenAlphaEqualsSigmaWithoutShift) {
  const DoSSchedule s(NoiseSchedule::linear_beta(), ShiftingSequence::none(1.0));
  std::uintmax_t iters = 100;
  const auto r = boost::math::tools::toms748_solve([&](double t) { return s.alpha(t) - s.sigma(t); }, 0.01, 0.99,
                                                   boost::math::tools::eps_tolerance<double>(52), iters);
  const double t = 0.5 * (r.first + r.second);
  EXPECT_NEAR(s.alpha(t), std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(eval_lambda(s, t), 1.0, 1e-12);
}

TEST(Lambda, NearZeroAtStartAndDivergesAtPivot) {
  const DoSSchedule s = DoSSchedule::standard();
  EXPECT_NEAR(s.lambda(0.0), 0.0, 1e-12);
  EXPECT_GT(s.lambda(0.5 * (1.0 - 1e-6)), 1e5);
  EXPECT_THROW(eval_lambda(s, 0.5), SingularityError);
  EXPECT_THROW(eval_lambda(s, 0.7), SingularityError);
}

TEST(Lambda, StrictlyIncreasingBelowPivot) {
  const DoSSchedule s = DoSSchedule::standard();
  double prev = -1.0;
  for (int i = 0; i < 1000; ++i) {
    const double l = s.lambda(0.999 * 0.5 * i / 999.0);
    EXPECT_GT(l, prev);
    prev = l;
  }
}

TEST(Lambda, DerivativeAndInverse) {
  const DoSSchedule s = DoSSchedule::standard();
  for (int i = 0; i <= 100; ++i) {
    const double t = 1e-3 + (0.499 - 1e-3) * i / 100.0;
    expect_rel(s.dlambda_dt(t), central([&](double u) { return s.lambda(u); }, t), 1e-5);
    EXPECT_NEAR(s.time_at_lambda(s.lambda(t), 1e-4, 0.4999), t, 1e-12);
  }
}

TEST(SdeCoefficients, NoShiftGivesStandardVpCoefficients) {
  const NoiseSchedule n = NoiseSchedule::linear_beta();
  const DoSSchedule s(n, ShiftingSequence::none(1.0));
  for (double t : {0.01, 0.2, 0.5, 0.9}) {
    const SdeCoefficients c = sde_coefficients(s, t);
    const double beta = 0.1 + t * (20.0 - 0.1);
    EXPECT_EQ(c.h, 0.0);
    EXPECT_NEAR(c.f, -0.5 * beta, 1e-12);
    EXPECT_NEAR(c.g, std::sqrt(beta), 1e-12);
  }
}

TEST(SdeCoefficients, MarginalMomentsSolveMomentOdes) {
  const DoSSchedule s = DoSSchedule::standard();
  const double mu = 1.3, v = 0.4, xh = -0.7;
  auto mean = [&](double t) { return s.alpha(t) * (s.eta(t) * xh + (1.0 - s.eta(t)) * mu); };
  auto var = [&](double t) {
    const double a = s.alpha(t) * (1.0 - s.eta(t));
    return a * a * v + s.sigma(t) * s.sigma(t);
  };
  for (int i = 1; i <= 100; ++i) {
    const double t = 0.5 * i / 101.0;
    const SdeCoefficients c = sde_coefficients(s, t);
    expect_rel(c.f * mean(t) + c.h * xh, central(mean, t), 1e-4);
    expect_rel(2.0 * c.f * var(t) + c.g2, central(var, t), 1e-4);
  }
}

TEST(SdeCoefficients, SingularAtAndBeyondPivot) {
  const DoSSchedule s = DoSSchedule::standard();
  EXPECT_THROW(sde_coefficients(s, 0.5), SingularityError);
  EXPECT_THROW(sde_coefficients(s, 0.8), SingularityError);
}

TEST(TimeGrid, UniformGridShape) {
  const DoSSchedule s = DoSSchedule::standard();
  const TimeGrid g = make_time_grid(s, 5, 1e-3);
  ASSERT_EQ(g.size(), 6u);
  EXPECT_EQ(g.front(), 0.5);
  EXPECT_EQ(g.back(), 1e-3);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i], g[i - 1]);
  const TimeGrid one = make_time_grid(0.5, 1, 1e-3);
  ASSERT_EQ(one.size(), 2u);
  EXPECT_EQ(one[0], 0.5);
  EXPECT_EQ(one[1], 1e-3);
}

TEST(TimeGrid, LambdaSpacings) {
  const DoSSchedule s = DoSSchedule::standard();
  const double top = s.lambda((1.0 - 1e-4) * 0.5);
  const double end = s.lambda(1e-3);
  for (GridSpacing sp : {GridSpacing::uniform_lambda, GridSpacing::uniform_log_lambda}) {
    const TimeGrid g = make_time_grid(s, 8, 1e-3, sp);
    ASSERT_EQ(g.size(), 9u);
    EXPECT_EQ(g.front(), 0.5);
    // Interior lambdas increase toward t1 with the requested spacing.
    for (std::size_t i = 1; i + 1 < g.size(); ++i) {
      EXPECT_GT(s.lambda(g[i]), s.lambda(g[i + 1]));
      const double frac = static_cast<double>(i) / 8.0;
      const double want = sp == GridSpacing::uniform_lambda ? top + (end - top) * frac
                                                            : std::exp(std::log(top) + (std::log(end) - std::log(top)) * frac);
      EXPECT_NEAR(s.lambda(g[i]) / want, 1.0, 1e-10);
    }
  }
}

TEST(TimeGrid, RejectsBadArguments) {
  const DoSSchedule s = DoSSchedule::standard();
  EXPECT_THROW(make_time_grid(s, 0, 1e-3), ArgumentError);
  EXPECT_THROW(make_time_grid(s, 5, 0.5), ArgumentError);
  EXPECT_THROW(make_time_grid(s, 5, 0.7), ArgumentError);
  EXPECT_THROW(TimeGrid({0.5, 0.5}), ArgumentError);
  EXPECT_THROW(parse_spacing("geometric"), ConfigError);
}

TEST(TimeGrid, DisplayIndex) {
  EXPECT_EQ(display_step(0.5), 500);
  EXPECT_EQ(display_step(1e-3), 1);
  EXPECT_EQ(display_step(1.0), 1000);
}
