#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mrpsim/covariates.hpp"
#include "mrpsim/design.hpp"
#include "mrpsim/poststrat.hpp"

namespace mrpsim::freq {

// Margin totals for iterative proportional fitting. Each variable maps a row
// to a level index; `totals[v][level]` is the population count.
struct RakingSpec {
  std::vector<std::string> names;
  std::vector<std::vector<double>> totals;
  double tolerance = 1e-8;
  int max_iterations = 100;
};

struct RakingResult {
  std::vector<double> weights;      // sum to 1
  int iterations = 0;
  double max_rel_error = 0.0;       // after the final cycle, on the unnormalized scale
  std::vector<double> cycle_errors; // max relative margin error after each full cycle
};

// Population margins of stratum, gender and race/ethnicity.
inline RakingSpec margins_from_matrix(const poststrat::PoststratMatrix& m) {
  RakingSpec s;
  s.names = {"stratum", "G", "RE"};
  s.totals = {std::vector<double>(kNumStrata, 0.0), std::vector<double>(2, 0.0), std::vector<double>(kNumRace, 0.0)};
  for (const auto& cell : m.cells()) {
    s.totals[0][cell.c.stratum - 1] += cell.n;
    s.totals[1][cell.c.g] += cell.n;
    s.totals[2][cell.c.re - 1] += cell.n;
  }
  return s;
}

inline std::vector<std::vector<int>> raking_levels(const design::ObservedSample& d) {
  std::vector<std::vector<int>> lv(3, std::vector<int>(d.n()));
  for (std::size_t i = 0; i < d.n(); ++i) {
    lv[0][i] = d.rows[i].c.stratum - 1;
    lv[1][i] = d.rows[i].c.g;
    lv[2][i] = d.rows[i].c.re - 1;
  }
  return lv;
}

// IPF on unit starting weights; `levels[v][i]` is row i's level of variable v.
inline RakingResult rake(const std::vector<std::vector<int>>& levels, const RakingSpec& spec) {
  if (levels.size() != spec.totals.size()) throw std::invalid_argument("rake: variable count mismatch");
  if (levels.empty() || levels[0].empty()) throw std::invalid_argument("rake: no rows");
  const std::size_t n = levels[0].size();
  const auto name = [&](std::size_t v) { return v < spec.names.size() ? spec.names[v] : std::to_string(v); };
  for (std::size_t v = 0; v < levels.size(); ++v) {
    if (levels[v].size() != n) throw std::invalid_argument("rake: ragged level vectors");
    for (double t : spec.totals[v]) {
      if (t < 0.0) throw std::invalid_argument("rake: negative margin for " + name(v));
    }
    for (int l : levels[v]) {
      if (l < 0 || l >= static_cast<int>(spec.totals[v].size()) || !(spec.totals[v][l] > 0.0)) {
        throw std::invalid_argument("rake: sample level " + std::to_string(l) + " of " + name(v) +
                                    " missing from the population margins");
      }
    }
  }
  RakingResult r;
  std::vector<double> w(n, 1.0);
  auto margin_error = [&]() {
    double worst = 0.0;
    for (std::size_t v = 0; v < levels.size(); ++v) {
      std::vector<double> sum(spec.totals[v].size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) sum[levels[v][i]] += w[i];
      for (std::size_t l = 0; l < sum.size(); ++l) {
        if (spec.totals[v][l] > 0.0) worst = std::max(worst, std::abs(sum[l] - spec.totals[v][l]) / spec.totals[v][l]);
      }
    }
    return worst;
  };
  for (r.iterations = 1; r.iterations <= spec.max_iterations; ++r.iterations) {
    for (std::size_t v = 0; v < levels.size(); ++v) {
      std::vector<double> sum(spec.totals[v].size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) sum[levels[v][i]] += w[i];
      for (std::size_t i = 0; i < n; ++i) w[i] *= spec.totals[v][levels[v][i]] / sum[levels[v][i]];
    }
    r.max_rel_error = margin_error();
    r.cycle_errors.push_back(r.max_rel_error);
    if (r.max_rel_error < spec.tolerance) break;
  }
  if (r.max_rel_error >= spec.tolerance) {
    throw std::runtime_error("rake: no convergence after " + std::to_string(spec.max_iterations) +
                             " iterations, max relative margin error " + std::to_string(r.max_rel_error));
  }
  r.iterations = std::min(r.iterations, spec.max_iterations);
  double total = 0.0;
  for (double x : w) total += x;
  for (auto& x : w) x /= total;
  r.weights = std::move(w);
  return r;
}

inline RakingResult rake_weights(const design::ObservedSample& d, const RakingSpec& spec) {
  return rake(raking_levels(d), spec);
}

struct WeightedFit {
  std::vector<double> coef;
  std::vector<std::string> columns;
  double beta_z = 0.0;
  double se = 0.0;
  double lower95 = 0.0;
  double upper95 = 0.0;
  std::size_t n = 0;
  std::vector<std::string> warnings;
};

namespace detail {

struct Design {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  std::vector<std::string> columns;
};

// Intercept, Z, optional School dummies, RE dummies, ME, G; the first observed
// level of each factor is the reference.
inline Design build_design(const std::vector<design::SampleRow>& rows, bool school_dummies) {
  if (rows.empty()) throw std::invalid_argument("regression: empty subset");
  bool has0 = false, has1 = false;
  for (const auto& r : rows) (r.z ? has1 : has0) = true;
  if (!has0 || !has1) throw std::invalid_argument("regression: subset contains a single treatment arm");
  std::map<std::uint32_t, int> schools;
  std::map<int, int> races;
  for (const auto& r : rows) {
    schools.emplace(r.c.school, 0);
    races.emplace(r.c.re, 0);
  }
  Design d;
  d.columns = {"Intercept", "Z"};
  auto assign = [&](auto& levels, const std::string& prefix, bool enabled) {
    int k = -1;
    for (auto& [level, col] : levels) {
      if (k < 0 || !enabled) {
        col = -1;
        k = 0;
        continue;
      }
      col = static_cast<int>(d.columns.size());
      d.columns.push_back(prefix + std::to_string(level));
    }
  };
  assign(schools, "School", school_dummies);
  assign(races, "RE", true);
  const int me_col = static_cast<int>(d.columns.size());
  d.columns.push_back("ME");
  d.columns.push_back("G");
  d.x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d.columns.size()));
  d.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto row = static_cast<Eigen::Index>(i);
    d.x(row, 0) = 1.0;
    d.x(row, 1) = r.z;
    if (const int c = schools.at(r.c.school); c >= 0) d.x(row, c) = 1.0;
    if (const int c = races.at(r.c.re); c >= 0) d.x(row, c) = 1.0;
    d.x(row, me_col) = r.c.me;
    d.x(row, me_col + 1) = r.c.g;
    d.y[row] = r.y - r.v;
  }
  return d;
}

// Drops columns aliased with earlier ones (pivoted QR), keeping Z.
inline void drop_aliased(Design& d, std::vector<std::string>& warnings) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.x);
  qr.setThreshold(1e-10);
  const auto rank = qr.rank();
  if (rank == d.x.cols()) return;
  std::vector<char> keep(d.x.cols(), 0);
  for (Eigen::Index k = 0; k < rank; ++k) keep[qr.colsPermutation().indices()[k]] = 1;
  if (!keep[1]) throw std::invalid_argument("regression: treatment indicator is aliased");
  std::vector<Eigen::Index> cols;
  std::vector<std::string> names;
  std::string dropped;
  for (Eigen::Index k = 0; k < d.x.cols(); ++k) {
    if (keep[k]) {
      cols.push_back(k);
      names.push_back(d.columns[k]);
    } else {
      dropped += (dropped.empty() ? "" : " ") + d.columns[k];
    }
  }
  warnings.push_back("dropped aliased columns: " + dropped);
  Eigen::MatrixXd x(d.x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) x.col(static_cast<Eigen::Index>(k)) = d.x.col(cols[k]);
  d.x = std::move(x);
  d.columns = std::move(names);
}

inline void finish(WeightedFit& f, const Eigen::VectorXd& beta, double var_z) {
  f.coef.assign(beta.data(), beta.data() + beta.size());
  f.beta_z = beta[1];
  if (!(var_z > 0.0) || !std::isfinite(var_z)) throw std::runtime_error("regression: non-positive variance for Z");
  f.se = std::sqrt(var_z);
  f.lower95 = f.beta_z - 1.96 * f.se;
  f.upper95 = f.beta_z + 1.96 * f.se;
}

}  // namespace detail

// Least squares of Y - V on intercept, Z, School, RE, ME, G with classical SE.
inline WeightedFit fit_ols(const std::vector<design::SampleRow>& rows) {
  WeightedFit f;
  auto d = detail::build_design(rows, true);
  detail::drop_aliased(d, f.warnings);
  const auto n = d.x.rows(), p = d.x.cols();
  if (n <= p) throw std::invalid_argument("fit_ols: no residual degrees of freedom");
  const Eigen::MatrixXd xtx = d.x.transpose() * d.x;
  const Eigen::LDLT<Eigen::MatrixXd> solver(xtx);
  const Eigen::VectorXd beta = d.x.colPivHouseholderQr().solve(d.y);
  const Eigen::VectorXd resid = d.y - d.x * beta;
  const double s2 = resid.squaredNorm() / static_cast<double>(n - p);
  const Eigen::MatrixXd inv = solver.solve(Eigen::MatrixXd::Identity(p, p));
  f.columns = d.columns;
  f.n = rows.size();
  detail::finish(f, beta, s2 * inv(1, 1));
  return f;
}

// Weighted least squares without School, sandwich SE.
inline WeightedFit fit_svy(const std::vector<design::SampleRow>& rows, const std::vector<double>& weights) {
  if (weights.size() != rows.size()) throw std::invalid_argument("fit_svy: weights not aligned with rows");
  for (double w : weights) {
    if (!(w > 0.0)) throw std::invalid_argument("fit_svy: weights must be positive");
  }
  WeightedFit f;
  auto d = detail::build_design(rows, false);
  detail::drop_aliased(d, f.warnings);
  const auto n = d.x.rows(), p = d.x.cols();
  if (n <= p) throw std::invalid_argument("fit_svy: no residual degrees of freedom");
  double total = 0.0;
  for (double w : weights) total += w;
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = weights[static_cast<std::size_t>(i)] / total;
  const Eigen::VectorXd sw = w.cwiseSqrt();
  const Eigen::MatrixXd xw = sw.asDiagonal() * d.x;
  const Eigen::VectorXd beta = xw.colPivHouseholderQr().solve(sw.asDiagonal() * d.y);
  const Eigen::VectorXd resid = d.y - d.x * beta;
  const Eigen::MatrixXd bread = (d.x.transpose() * w.asDiagonal() * d.x).ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::VectorXd u = w.cwiseProduct(resid);
  const Eigen::MatrixXd xu = u.asDiagonal() * d.x;
  const Eigen::MatrixXd meat = xu.transpose() * xu;
  const Eigen::MatrixXd cov = bread * meat * bread;
  f.columns = d.columns;
  f.n = rows.size();
  detail::finish(f, beta, cov(1, 1));
  return f;
}

}  // namespace mrpsim::freq
