#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "mrpsim/math/rng.hpp"

namespace mrpsim::math {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x - kLogSqrt2Pi); }
inline double normal_logpdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

// log Phi(x), accurate far into the lower tail.
inline double log_normal_cdf(double x) {
  if (x > 5.0) return std::log1p(-0.5 * std::erfc(x * M_SQRT1_2));
  if (x > -20.0) return std::log(0.5 * std::erfc(-x * M_SQRT1_2));
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
  return -0.5 * x2 - std::log(-x) - kLogSqrt2Pi + std::log(series);
}

// log(Phi(b) - Phi(a)) for standardized bounds a < b.
inline double log_normal_interval(double a, double b) {
  if (!(a < b)) return -std::numeric_limits<double>::infinity();
  if (a >= 0.0) return log_normal_interval(-b, -a);
  if (b > 0.0) {
    const double tails = 0.5 * std::erfc(-a * M_SQRT1_2) + 0.5 * std::erfc(b * M_SQRT1_2);
    return std::log1p(-tails);
  }
  const double lb = log_normal_cdf(b);
  const double la = log_normal_cdf(a);
  if (!std::isfinite(lb)) return -std::numeric_limits<double>::infinity();
  return lb + std::log1p(-std::exp(la - lb));
}

// Log normalising constant of N(mu, sigma) restricted to (lo, hi).
inline double truncnorm_log_normalizer(double mu, double sigma, double lo, double hi) {
  return log_normal_interval((lo - mu) / sigma, (hi - mu) / sigma);
}

inline double truncnorm_logpdf(double x, double mu, double sigma, double lo, double hi) {
  if (x <= lo || x >= hi) return -std::numeric_limits<double>::infinity();
  const double z = (x - mu) / sigma;
  return normal_logpdf(z) - std::log(sigma) - truncnorm_log_normalizer(mu, sigma, lo, hi);
}

inline double truncnorm_pdf(double x, double mu, double sigma, double lo, double hi) {
  return std::exp(truncnorm_logpdf(x, mu, sigma, lo, hi));
}

// Mean of N(mu, sigma) restricted to (lo, hi); ratios formed in log space so
// the result stays inside the interval for far-tail bounds.
inline double truncnorm_mean_unchecked(double mu, double sigma, double lo, double hi) {
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  const double log_mass = log_normal_interval(a, b);
  if (!std::isfinite(log_mass)) {
    throw std::domain_error(
        "truncated normal mass underflows; review the truncation bounds against mu and sigma");
  }
  const double ra = std::isfinite(a) ? std::exp(normal_logpdf(a) - log_mass) : 0.0;
  const double rb = std::isfinite(b) ? std::exp(normal_logpdf(b) - log_mass) : 0.0;
  const double m = mu + sigma * (ra - rb);
  return std::clamp(m, std::nextafter(lo, hi), std::nextafter(hi, lo));
}

namespace detail {

inline constexpr double kTailBound = 6.0;

// Draw from N(0,1) restricted to (lo, hi) with lo > kTailBound: exponential
// proposal (Robert, 1995) for wide windows, uniform proposal for narrow ones.
inline double sample_far_tail(double lo, double hi, Rng& rng) {
  const double lambda = 0.5 * (lo + std::sqrt(lo * lo + 4.0));
  if (hi - lo >= 1.0 / lambda) {
    for (;;) {
      const double z = lo - std::log(uniform_open01(rng)) / lambda;
      if (z >= hi) continue;
      const double d = z - lambda;
      if (uniform_open01(rng) <= std::exp(-0.5 * d * d)) return z;
    }
  }
  for (;;) {
    const double z = lo + (hi - lo) * uniform_open01(rng);
    if (uniform_open01(rng) <= std::exp(0.5 * (lo * lo - z * z))) return z;
  }
}

inline double sample_standard(double a, double b, Rng& rng) {
  if (a > 0.0) return -sample_standard(-b, -a, rng);
  if (b < -kTailBound) return -sample_far_tail(-b, -a, rng);
  const double pa = normal_cdf(a);
  const double pb = normal_cdf(b);
  const double u = uniform_open01(rng);
  const double x = standard_normal_quantile(pa + u * (pb - pa));
  return std::clamp(x, std::nextafter(a, b), std::nextafter(b, a));
}

}  // namespace detail

// Inverse-CDF draw from N(mu, sigma) restricted to (lo, hi). Bounds are mirrored
// onto the lower tail so the CDF stays accurate; when the whole window lies more
// than six standard deviations out, rejection sampling takes over.
inline double sample_truncnorm_unchecked(double mu, double sigma, double lo, double hi, Rng& rng) {
  const double z = detail::sample_standard((lo - mu) / sigma, (hi - mu) / sigma, rng);
  const double x = mu + sigma * z;
  return std::clamp(x, std::nextafter(lo, hi), std::nextafter(hi, lo));
}

}  // namespace mrpsim::math
