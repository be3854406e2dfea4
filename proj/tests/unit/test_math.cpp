#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mrpsim/math/quadrature.hpp"
#include "mrpsim/math/rng.hpp"
#include "mrpsim/math/truncnorm.hpp"
#include "mrpsim/oracle.hpp"

using namespace mrpsim;

namespace {

// Composite Simpson over many panels: slow but independent of the library rules.
template <typename F>
double simpson(double a, double b, F f, int panels = 200000) {
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

double phi(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

struct Moments {
  double mean, sd;
};

Moments sample_moments(double mu, double sigma, double lo, double hi, int n, std::uint64_t seed) {
  Rng rng = make_stream({seed});
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = math::sample_truncnorm_unchecked(mu, sigma, lo, hi, rng);
    EXPECT_GT(x, lo);
    EXPECT_LT(x, hi);
    s += x;
    s2 += x * x;
  }
  const double m = s / n;
  return {m, std::sqrt((s2 / n - m * m) / n)};
}

}  // namespace

TEST(TruncNorm, SymmetricCaseMeanIsCenter) {
  const auto m = sample_moments(2.165, 0.6, 0.0, 4.33, 1000000, 11);
  EXPECT_NEAR(m.mean, 2.165, 3.0 * m.sd);
}

TEST(TruncNorm, SampleMeanMatchesClosedForm) {
  const double mu = 3.5, sigma = 0.6, lo = 0.0, hi = 4.33;
  const double a = (lo - mu) / sigma, b = (hi - mu) / sigma;
  const double analytic = mu + sigma * (phi(a) - phi(b)) / (Phi(b) - Phi(a));
  const auto m = sample_moments(mu, sigma, lo, hi, 400000, 12);
  EXPECT_NEAR(m.mean, analytic, 3.0 * m.sd);
  EXPECT_NEAR(oracle::truncnorm_mean(mu, sigma, lo, hi), analytic, 1e-12);
}

TEST(TruncNorm, StratumOneDrawsInsideBounds) {
  Rng rng = make_stream({13});
  for (int i = 0; i < 200000; ++i) {
    const double x = math::sample_truncnorm_unchecked(2.1, 0.8, 0.0, 4.33, rng);
    ASSERT_GT(x, 0.0);
    ASSERT_LT(x, 4.33);
  }
}

TEST(TruncNorm, FarTailSamplerMatchesNumericalMean) {
  for (double mu : {-6.0, 11.0}) {
    const double sigma = 0.5, lo = 0.0, hi = 4.33;
    const double z = simpson(lo, hi, [&](double x) { return phi((x - mu) / sigma); });
    const double num = simpson(lo, hi, [&](double x) { return x * phi((x - mu) / sigma); });
    const auto m = sample_moments(mu, sigma, lo, hi, 200000, 14);
    EXPECT_NEAR(m.mean, num / z, 3.0 * m.sd + 1e-9) << "mu = " << mu;
    EXPECT_NEAR(math::truncnorm_mean_unchecked(mu, sigma, lo, hi), num / z, 1e-6) << "mu = " << mu;
  }
}

TEST(TruncNorm, MeanStrictlyInsideInterval) {
  for (double mu : {-50.0, -3.0, 0.0, 2.0, 4.33, 9.0, 80.0}) {
    for (double sigma : {0.01, 0.6, 5.0}) {
      const double m = oracle::truncnorm_mean(mu, sigma, 0.0, 4.33);
      EXPECT_GT(m, 0.0);
      EXPECT_LT(m, 4.33);
    }
  }
}

TEST(TruncNorm, LogNormalizerMatchesDirectFormula) {
  for (double mu : {-1.0, 0.5, 2.0, 4.0}) {
    const double sigma = 0.7;
    const double direct = std::log(Phi((4.33 - mu) / sigma) - Phi((0.0 - mu) / sigma));
    EXPECT_NEAR(math::log_normal_interval((0.0 - mu) / sigma, (4.33 - mu) / sigma), direct, 1e-12);
  }
}

TEST(TruncNorm, LogPdfIsNormalMinusLogMass) {
  const double mu = 1.3, sigma = 0.45, x = 0.8;
  const double expect = std::log(phi((x - mu) / sigma) / sigma) -
                        std::log(Phi((4.33 - mu) / sigma) - Phi((0.0 - mu) / sigma));
  EXPECT_NEAR(math::truncnorm_logpdf(x, mu, sigma, 0.0, 4.33), expect, 1e-12);
}

TEST(TruncNorm, OracleRejectsInvalidArguments) {
  EXPECT_THROW(oracle::truncnorm_mean(0.0, 0.0, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(oracle::truncnorm_mean(0.0, 1.0, 1.0, 1.0), std::invalid_argument);
}

TEST(Quadrature, ExactForPolynomialsUpToDegree2nMinus1) {
  const int n = 8;
  const auto rule = math::gauss_legendre(n);
  for (int deg = 0; deg < 2 * n; ++deg) {
    const double got = math::integrate(rule, -0.5, 2.0, [&](double x) { return std::pow(x, deg); });
    const double exact = (std::pow(2.0, deg + 1) - std::pow(-0.5, deg + 1)) / (deg + 1);
    EXPECT_NEAR(got, exact, 1e-12 * std::max(1.0, std::abs(exact))) << "degree " << deg;
  }
}

TEST(Quadrature, PiecewiseHandlesKink) {
  const auto rule = math::gauss_legendre(16);
  auto f = [](double x) { return std::abs(x - 0.3); };
  const double got = math::integrate_piecewise(rule, -1.0, 1.0, {0.3}, f);
  EXPECT_NEAR(got, 0.5 * 1.3 * 1.3 + 0.5 * 0.7 * 0.7, 1e-13);
}

TEST(Rng, StreamsAreDeterministicAndDistinct) {
  Rng a = make_stream({1, 2, 3}), b = make_stream({1, 2, 3}), c = make_stream({1, 2, 4});
  for (int i = 0; i < 10; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    EXPECT_NE(x, c());
  }
}

TEST(Rng, NormalQuantileInvertsCdf) {
  for (double p : {1e-10, 0.01, 0.3, 0.5, 0.77, 0.999}) {
    EXPECT_NEAR(Phi(standard_normal_quantile(p)), p, 1e-12 * std::max(1.0, p / 1e-3));
  }
}
