#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include <boost/math/special_functions/erf.hpp>

namespace mrpsim {

using Rng = std::mt19937_64;

// Derives an independent stream from a list of integer keys (master seed,
// replication, school id, ...). Equal keys always give the same stream.
inline Rng make_stream(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(2 * keys.size());
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

// Uniform on the open interval (0, 1), 53 bits.
inline double uniform_open01(Rng& rng) {
  for (;;) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    if (u > 0.0) return u;
  }
}

inline double standard_normal_quantile(double p) {
  return -M_SQRT2 * boost::math::erfc_inv(2.0 * p);
}

// Inverse-CDF standard normal; one uniform per draw keeps streams aligned.
inline double draw_normal(Rng& rng, double mean = 0.0, double sd = 1.0) {
  return mean + sd * standard_normal_quantile(uniform_open01(rng));
}

inline bool draw_bernoulli(Rng& rng, double p) { return uniform_open01(rng) < p; }

}  // namespace mrpsim
