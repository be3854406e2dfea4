#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mrpsim/math/rng.hpp"

namespace mrpsim::bayes {

using ChainSet = std::vector<std::vector<double>>;

namespace detail {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Splits every chain into halves, dropping the middle draw of odd chains.
inline ChainSet split_chains(const ChainSet& chains) {
  ChainSet out;
  for (const auto& c : chains) {
    const std::size_t h = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + h);
    out.emplace_back(c.end() - h, c.end());
  }
  return out;
}

// Normal scores of pooled fractional ranks.
inline ChainSet rank_normalize(const ChainSet& chains) {
  std::vector<std::pair<double, std::size_t>> pooled;
  for (std::size_t m = 0; m < chains.size(); ++m) {
    for (std::size_t i = 0; i < chains[m].size(); ++i) pooled.emplace_back(chains[m][i], m * chains[0].size() + i);
  }
  std::sort(pooled.begin(), pooled.end());
  const double s = static_cast<double>(pooled.size());
  std::vector<double> z(pooled.size());
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t k = i;
    while (k < pooled.size() && pooled[k].first == pooled[i].first) ++k;
    const double rank = 0.5 * static_cast<double>(i + 1 + k);
    const double score = standard_normal_quantile((rank - 0.375) / (s + 0.25));
    for (std::size_t q = i; q < k; ++q) z[pooled[q].second] = score;
    i = k;
  }
  ChainSet out(chains.size());
  for (std::size_t m = 0; m < chains.size(); ++m) {
    out[m].assign(z.begin() + m * chains[0].size(), z.begin() + (m + 1) * chains[0].size());
  }
  return out;
}

inline double mean(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double variance(const std::vector<double>& x) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double classic_rhat(const ChainSet& chains) {
  const double n = static_cast<double>(chains[0].size());
  std::vector<double> means;
  double w = 0.0;
  for (const auto& c : chains) {
    means.push_back(mean(c));
    w += variance(c);
  }
  w /= static_cast<double>(chains.size());
  const double b_over_n = variance(means);
  if (!(w > 0.0)) return kNaN;
  return std::sqrt(((n - 1.0) / n * w + b_over_n) / w);
}

inline bool usable(const ChainSet& chains) {
  if (chains.empty() || chains[0].size() < 4) return false;
  for (const auto& c : chains) {
    if (c.size() != chains[0].size()) throw std::invalid_argument("diagnostics: chains differ in length");
    for (double v : c) {
      if (!std::isfinite(v)) return false;
    }
  }
  double lo = chains[0][0], hi = lo;
  for (const auto& c : chains) {
    for (double v : c) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  return hi > lo;
}

// ESS from Geyer's initial monotone sequence on multi-chain autocorrelations.
inline double ess(const ChainSet& chains) {
  const std::size_t m = chains.size();
  const std::size_t n = chains[0].size();
  std::vector<double> means(m), vars(m);
  for (std::size_t k = 0; k < m; ++k) {
    means[k] = mean(chains[k]);
    vars[k] = variance(chains[k]);
  }
  const double w = mean(vars);
  const double var_plus = (static_cast<double>(n) - 1.0) / static_cast<double>(n) * w +
                          (m > 1 ? variance(means) : 0.0);
  if (!(var_plus > 0.0)) return kNaN;
  auto rho = [&](std::size_t lag) {
    double acov = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i + lag < n; ++i) s += (chains[k][i] - means[k]) * (chains[k][i + lag] - means[k]);
      acov += s / static_cast<double>(n);
    }
    acov /= static_cast<double>(m);
    return 1.0 - (w - acov) / var_plus;
  };
  double tau = 0.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t + 1 < n; t += 2) {
    double pair = (t == 0 ? 1.0 : rho(t)) + rho(t + 1);
    if (pair < 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += pair;
  }
  tau = std::max(2.0 * tau - 1.0, 1.0 / std::log10(static_cast<double>(m * n)));
  return static_cast<double>(m * n) / tau;
}

}  // namespace detail

// Rank-normalized split R-hat: max of the bulk and folded versions. NaN for
// fewer than two chains, constant or non-finite draws.
inline double split_rhat(const ChainSet& chains) {
  if (chains.size() < 2 || !detail::usable(chains)) return detail::kNaN;
  const auto split = detail::split_chains(chains);
  const double bulk = detail::classic_rhat(detail::rank_normalize(split));
  std::vector<double> all;
  for (const auto& c : chains) all.insert(all.end(), c.begin(), c.end());
  std::nth_element(all.begin(), all.begin() + all.size() / 2, all.end());
  const double med = all[all.size() / 2];
  ChainSet folded = split;
  for (auto& c : folded) {
    for (auto& v : c) v = std::abs(v - med);
  }
  const double tail = detail::classic_rhat(detail::rank_normalize(folded));
  if (std::isnan(bulk)) return tail;
  if (std::isnan(tail)) return bulk;
  return std::max(bulk, tail);
}

// Bulk effective sample size on rank-normalized split chains.
inline double ess_bulk(const ChainSet& chains) {
  if (!detail::usable(chains)) return detail::kNaN;
  return detail::ess(detail::rank_normalize(detail::split_chains(chains)));
}

}  // namespace mrpsim::bayes
