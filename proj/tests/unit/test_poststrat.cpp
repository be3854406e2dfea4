#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <tuple>

#include "mrpsim/design.hpp"
#include "mrpsim/dgp.hpp"
#include "mrpsim/poststrat.hpp"

using namespace mrpsim;

namespace {

const dgp::FinitePopulation& population() {
  static const dgp::FinitePopulation pop = [] {
    Rng r = make_stream({31});
    const auto layout = dgp::build_strata({}, 0.03, r);
    Rng r2 = make_stream({32});
    return dgp::assign_treatment(dgp::generate_population(layout, {}, r2), r2);
  }();
  return pop;
}

}  // namespace

TEST(Poststrat, CountsMatchDirectTally) {
  const auto& pop = population();
  const auto m = poststrat::build_poststrat_matrix(pop);
  std::map<std::tuple<int, int, int, std::uint32_t>, double> tally;
  for (const auto& p : pop.individuals) tally[{p.me, p.g, p.re, p.school}] += 1.0;
  ASSERT_EQ(m.size(), tally.size());
  EXPECT_DOUBLE_EQ(m.total(), static_cast<double>(pop.size()));
  for (const auto& cell : m.cells()) {
    EXPECT_GT(cell.n, 0.0);
    EXPECT_EQ(cell.n, (tally[{cell.c.me, cell.c.g, cell.c.re, cell.c.school}]));
    EXPECT_EQ(cell.c.stratum, pop.layout.schools[cell.c.school].stratum);
  }
}

TEST(Poststrat, CellOrderIsLexicographic) {
  const auto m = poststrat::build_poststrat_matrix(population());
  for (std::size_t i = 1; i < m.size(); ++i) {
    const auto& a = m[i - 1].c;
    const auto& b = m[i].c;
    EXPECT_LT(std::tuple(int(a.sa()), int(a.mc()), a.school, a.re, a.g, a.me),
              std::tuple(int(b.sa()), int(b.mc()), b.school, b.re, b.g, b.me));
  }
}

TEST(Poststrat, ExpectedMatrixTotalsSchoolSizes) {
  const auto& pop = population();
  const auto em = poststrat::build_expected_matrix(pop.layout, {});
  EXPECT_NEAR(em.total(), static_cast<double>(pop.layout.expected_population()), 1e-6);
}

TEST(Poststrat, FilterParsingAndMatching) {
  const auto f = poststrat::CellFilter::parse("SA=High&MC=Low&RE=Asian");
  EXPECT_TRUE(f.matches(Covariates{0, 0, 1, 5, 4}));
  EXPECT_FALSE(f.matches(Covariates{0, 0, 2, 5, 4}));
  EXPECT_FALSE(f.matches(Covariates{0, 0, 1, 5, 5}));
  EXPECT_TRUE(poststrat::CellFilter::parse("all").matches(Covariates{1, 1, 3, 9, 2}));
  EXPECT_THROW(poststrat::CellFilter::parse("Height=3"), std::invalid_argument);
  EXPECT_THROW(poststrat::CellFilter::parse("SA=Huge"), std::invalid_argument);
}

TEST(Poststrat, SubpopShareAndEmptyError) {
  const auto m = poststrat::build_poststrat_matrix(population());
  const auto all = poststrat::subpop_index(m, poststrat::CellFilter{});
  EXPECT_EQ(all.cells.size(), m.size());
  EXPECT_DOUBLE_EQ(all.population_share, 1.0);
  EXPECT_THROW(poststrat::subpop_index(m, poststrat::CellFilter::for_school(999999)), std::invalid_argument);
}

TEST(Poststrat, PointIsWeightedMeanAndScaleInvariant) {
  const auto m = poststrat::build_poststrat_matrix(population());
  const auto idx = poststrat::subpop_index(m, poststrat::CellFilter::parse("SA=Low"));
  Rng rng = make_stream({5});
  std::vector<double> v(m.size());
  for (auto& x : v) x = draw_normal(rng);
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < m.size(); ++c) {
    if (m[c].c.sa() != SchoolAchievement::Low) continue;
    num += v[c] * m[c].n;
    den += m[c].n;
  }
  EXPECT_NEAR(poststrat::poststratify_point(v, idx, m), num / den, 1e-12);

  std::vector<poststrat::Cell> scaled = m.cells();
  for (auto& c : scaled) c.n *= 7.5;
  const poststrat::PoststratMatrix m2(scaled);
  EXPECT_NEAR(poststrat::poststratify_point(v, poststrat::subpop_index(m2, poststrat::CellFilter::parse("SA=Low")), m2),
              num / den, 1e-12);
}

TEST(Poststrat, UnionIsWeightedCombination) {
  const auto m = poststrat::build_poststrat_matrix(population());
  std::vector<double> v(m.size());
  Rng rng = make_stream({6});
  for (auto& x : v) x = draw_normal(rng);
  const auto a = poststrat::subpop_index(m, poststrat::CellFilter::parse("G=0"));
  const auto b = poststrat::subpop_index(m, poststrat::CellFilter::parse("G=1"));
  const auto all = poststrat::subpop_index(m, poststrat::CellFilter{});
  const double na = poststrat::subpop_count(m, a), nb = poststrat::subpop_count(m, b);
  EXPECT_NEAR(poststrat::poststratify_point(v, all, m),
              (na * poststrat::poststratify_point(v, a, m) + nb * poststrat::poststratify_point(v, b, m)) / (na + nb),
              1e-12);
}

TEST(Poststrat, DrawsEqualPointwisePoststratification) {
  const auto m = poststrat::build_poststrat_matrix(population());
  const auto idx = poststrat::subpop_index(m, poststrat::CellFilter::parse("RE=Black"));
  const std::size_t S = 5;
  std::vector<std::vector<double>> y1(m.size(), std::vector<double>(S)), y0 = y1;
  Rng rng = make_stream({7});
  for (std::size_t c = 0; c < m.size(); ++c) {
    for (std::size_t j = 0; j < S; ++j) y1[c][j] = draw_normal(rng), y0[c][j] = draw_normal(rng);
  }
  const auto d = poststrat::poststratify_draws(y1, y0, idx, m);
  ASSERT_EQ(d.size(), S);
  for (std::size_t j = 0; j < S; ++j) {
    std::vector<double> diff(m.size());
    for (std::size_t c = 0; c < m.size(); ++c) diff[c] = y1[c][j] - y0[c][j];
    EXPECT_NEAR(d[j], poststrat::poststratify_point(diff, idx, m), 1e-12);
  }
}

TEST(Poststrat, InSampleBiasMatchesTwoSums) {
  const auto m = poststrat::build_poststrat_matrix(population());
  const auto idx = poststrat::subpop_index(m, poststrat::CellFilter::parse("SA=Medium"));
  Rng rng = make_stream({8});
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> tau(m.size()), n(m.size());
    for (std::size_t c = 0; c < m.size(); ++c) {
      tau[c] = draw_normal(rng, 0.1, 0.05);
      n[c] = std::floor(uniform_open01(rng) * 5.0);
    }
    double ns = 0.0, ps = 0.0, a = 0.0, b = 0.0;
    for (auto c : idx.cells) ns += n[c], ps += m[c].n;
    for (auto c : idx.cells) a += tau[c] * n[c] / ns, b += tau[c] * m[c].n / ps;
    EXPECT_NEAR(poststrat::in_sample_bias(tau, n, idx, m), a - b, 1e-12);
  }
  std::vector<double> zero(m.size(), 0.0);
  EXPECT_THROW(poststrat::in_sample_bias(zero, zero, idx, m), std::invalid_argument);
}

TEST(Poststrat, SampleCellCounts) {
  const auto& pop = population();
  const auto m = poststrat::build_poststrat_matrix(pop);
  const auto d = design::draw_sample(pop, {2, 2, 2, 2, 2}, 9);
  const auto n = poststrat::sample_cell_counts(d, m);
  double total = 0.0;
  for (std::size_t c = 0; c < m.size(); ++c) {
    EXPECT_LE(n[c], m[c].n);
    total += n[c];
  }
  EXPECT_EQ(total, static_cast<double>(d.n()));
}
