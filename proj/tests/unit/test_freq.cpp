#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mrpsim/freq.hpp"

using namespace mrpsim;

namespace {

// Closed-form IPF limit of a 2x2 table: the unique table with the requested
// margins and the seed table's odds ratio.
double closed_form_m11(double n11, double n12, double n21, double n22, double r1, double r2, double c1) {
  const double theta = n11 * n22 / (n12 * n21);
  // x (r2 - c1 + x) = theta (r1 - x)(c1 - x)  ->  (1 - theta) x^2 + (r2 - c1 + theta (r1 + c1)) x - theta r1 c1 = 0
  const double a = 1.0 - theta, b = r2 - c1 + theta * (r1 + c1), c = -theta * r1 * c1;
  if (std::abs(a) < 1e-15) return -c / b;
  const double disc = std::sqrt(b * b - 4.0 * a * c);
  for (double x : {(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)}) {
    if (x > 0.0 && x < std::min(r1, c1) && x > c1 - r2) return x;
  }
  return std::nan("");
}

std::vector<design::SampleRow> synthetic_rows(int n, std::uint64_t seed, double noise = 0.3) {
  Rng rng = make_stream({seed});
  std::vector<design::SampleRow> rows;
  for (int i = 0; i < n; ++i) {
    design::SampleRow r;
    r.individual_id = static_cast<std::uint32_t>(i);
    r.c.school = static_cast<std::uint32_t>(i % 7);
    r.c.stratum = static_cast<std::uint8_t>(1 + i % 5);
    r.c.re = static_cast<std::uint8_t>(1 + (i / 3) % 5);
    r.c.me = draw_bernoulli(rng, 0.3);
    r.c.g = draw_bernoulli(rng, 0.5);
    r.z = draw_bernoulli(rng, 0.5);
    r.v = 1.0 + 2.0 * uniform_open01(rng);
    r.y = r.v + 0.2 + 0.15 * r.z + 0.1 * r.c.me - 0.05 * r.c.g + 0.03 * r.c.re + 0.02 * r.c.school +
          draw_normal(rng, 0.0, noise);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST(Raking, TwoByTwoMatchesClosedForm) {
  // Seed table counts of (row, column) cells.
  const double n11 = 30, n12 = 10, n21 = 20, n22 = 40;
  std::vector<std::vector<int>> lv(2);
  auto add = [&](int r, int c, int count) {
    for (int i = 0; i < count; ++i) lv[0].push_back(r), lv[1].push_back(c);
  };
  add(0, 0, 30);
  add(0, 1, 10);
  add(1, 0, 20);
  add(1, 1, 40);
  freq::RakingSpec spec;
  spec.names = {"row", "col"};
  spec.totals = {{700.0, 300.0}, {450.0, 550.0}};
  spec.tolerance = 1e-14;
  spec.max_iterations = 1000;
  const auto r = freq::rake(lv, spec);
  double w11 = 0.0;
  for (std::size_t i = 0; i < lv[0].size(); ++i) {
    if (lv[0][i] == 0 && lv[1][i] == 0) w11 += r.weights[i] * 1000.0;
  }
  EXPECT_NEAR(w11, closed_form_m11(n11, n12, n21, n22, 700, 300, 450), 1e-10);
}

TEST(Raking, MarginsMatchAndErrorsDecrease) {
  Rng rng = make_stream({51});
  const std::size_t n = 3000;
  std::vector<std::vector<int>> lv(3, std::vector<int>(n));
  for (std::size_t i = 0; i < n; ++i) {
    lv[0][i] = static_cast<int>(uniform_open01(rng) * 5);
    lv[1][i] = uniform_open01(rng) < 0.3 + 0.1 * lv[0][i] ? 1 : 0;
    lv[2][i] = static_cast<int>(uniform_open01(rng) * 4);
  }
  freq::RakingSpec spec;
  spec.totals = {{100, 200, 300, 250, 150}, {480, 520}, {400, 300, 200, 100}};
  const auto r = freq::rake(lv, spec);
  for (std::size_t v = 0; v < 3; ++v) {
    std::vector<double> sum(spec.totals[v].size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) sum[lv[v][i]] += r.weights[i] * 1000.0;
    for (std::size_t l = 0; l < sum.size(); ++l) EXPECT_NEAR(sum[l] / spec.totals[v][l], 1.0, 1e-6);
  }
  for (std::size_t k = 1; k < r.cycle_errors.size(); ++k) EXPECT_LE(r.cycle_errors[k], r.cycle_errors[k - 1] + 1e-15);
  double total = 0.0;
  for (double w : r.weights) total += w;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Raking, MissingLevelAndNonConvergence) {
  std::vector<std::vector<int>> lv{{0, 1, 2}};
  freq::RakingSpec spec;
  spec.names = {"RE"};
  spec.totals = {{10.0, 0.0, 5.0}};
  EXPECT_THROW(freq::rake(lv, spec), std::invalid_argument);

  // Structural zero: the two margins cannot be met simultaneously.
  std::vector<std::vector<int>> bad{{0, 0, 1}, {0, 1, 1}};
  freq::RakingSpec s2;
  s2.totals = {{1.0, 9.0}, {9.0, 1.0}};
  s2.max_iterations = 50;
  try {
    freq::rake(bad, s2);
    FAIL() << "expected non-convergence";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("no convergence"), std::string::npos);
  }
}

TEST(Ols, MatchesNormalEquations) {
  const auto rows = synthetic_rows(800, 52);
  const auto fit = freq::fit_ols(rows);
  const auto d = freq::detail::build_design(rows, true);
  ASSERT_EQ(fit.columns.size(), static_cast<std::size_t>(d.x.cols()));
  const Eigen::MatrixXd xtx = d.x.transpose() * d.x;
  const Eigen::VectorXd beta = xtx.inverse() * (d.x.transpose() * d.y);
  for (Eigen::Index k = 0; k < beta.size(); ++k) EXPECT_NEAR(fit.coef[k], beta[k], 1e-9);
  const Eigen::VectorXd e = d.y - d.x * beta;
  const double s2 = e.squaredNorm() / static_cast<double>(d.x.rows() - d.x.cols());
  EXPECT_NEAR(fit.se, std::sqrt(s2 * xtx.inverse()(1, 1)), 1e-9);
  EXPECT_NEAR(fit.beta_z, 0.15, 4.0 * fit.se);
  EXPECT_DOUBLE_EQ(fit.lower95, fit.beta_z - 1.96 * fit.se);
}

TEST(Ols, PermutationInvariantAndSubsetEquivalent) {
  auto rows = synthetic_rows(500, 53);
  const auto a = freq::fit_ols(rows);
  std::mt19937 g(3);
  std::shuffle(rows.begin(), rows.end(), g);
  const auto b = freq::fit_ols(rows);
  EXPECT_NEAR(a.beta_z, b.beta_z, 1e-10);
  EXPECT_NEAR(a.se, b.se, 1e-10);
}

TEST(Ols, AliasedColumnsDroppedAndErrors) {
  auto rows = synthetic_rows(300, 54);
  for (auto& r : rows) r.c.me = r.c.g;
  const auto fit = freq::fit_ols(rows);
  ASSERT_FALSE(fit.warnings.empty());
  EXPECT_NE(fit.warnings.front().find("aliased"), std::string::npos);

  auto one_arm = synthetic_rows(50, 55);
  for (auto& r : one_arm) r.z = 1;
  EXPECT_THROW(freq::fit_ols(one_arm), std::invalid_argument);
  EXPECT_THROW(freq::fit_ols({}), std::invalid_argument);
}

TEST(Svy, SandwichCloseToClassicalUnderHomoskedasticity) {
  const auto rows = synthetic_rows(20000, 56);
  std::vector<double> w(rows.size(), 1.0);
  const auto svy = freq::fit_svy(rows, w);
  // Classical SE of the same no-school design.
  const auto d = freq::detail::build_design(rows, false);
  const Eigen::MatrixXd xtx = d.x.transpose() * d.x;
  const Eigen::VectorXd beta = xtx.ldlt().solve(d.x.transpose() * d.y);
  const double s2 = (d.y - d.x * beta).squaredNorm() / static_cast<double>(d.x.rows() - d.x.cols());
  const double classical = std::sqrt(s2 * xtx.inverse()(1, 1));
  EXPECT_NEAR(svy.se / classical, 1.0, 0.15);
}

TEST(Svy, MatchesWeightedNormalEquationsAndScaleInvariance) {
  const auto rows = synthetic_rows(600, 57);
  Rng rng = make_stream({58});
  std::vector<double> w(rows.size());
  for (auto& x : w) x = 0.5 + uniform_open01(rng);
  const auto fit = freq::fit_svy(rows, w);

  const auto d = freq::detail::build_design(rows, false);
  const auto n = d.x.rows(), p = d.x.cols();
  Eigen::MatrixXd xtwx = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xtwy = Eigen::VectorXd::Zero(p);
  double tot = 0.0;
  for (double x : w) tot += x;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double wi = w[static_cast<std::size_t>(i)] / tot;
    xtwx += wi * d.x.row(i).transpose() * d.x.row(i);
    xtwy += wi * d.x.row(i).transpose() * d.y[i];
  }
  const Eigen::VectorXd beta = xtwx.inverse() * xtwy;
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double wi = w[static_cast<std::size_t>(i)] / tot;
    const double e = d.y[i] - d.x.row(i).dot(beta);
    meat += wi * wi * e * e * d.x.row(i).transpose() * d.x.row(i);
  }
  const Eigen::MatrixXd cov = xtwx.inverse() * meat * xtwx.inverse();
  EXPECT_NEAR(fit.beta_z, beta[1], 1e-9);
  EXPECT_NEAR(fit.se, std::sqrt(cov(1, 1)), 1e-9);

  std::vector<double> w2 = w;
  for (auto& x : w2) x *= 2.0;
  const auto fit2 = freq::fit_svy(rows, w2);
  EXPECT_NEAR(fit2.beta_z, fit.beta_z, 1e-12);
  EXPECT_NEAR(fit2.se, fit.se, 1e-12);

  w[0] = 0.0;
  EXPECT_THROW(freq::fit_svy(rows, w), std::invalid_argument);
}
