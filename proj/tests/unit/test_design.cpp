#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "mrpsim/design.hpp"
#include "mrpsim/dgp.hpp"

using namespace mrpsim;

namespace {

const dgp::FinitePopulation& shared_population() {
  static const dgp::FinitePopulation pop = [] {
    Rng r = make_stream({21});
    const auto layout = dgp::build_strata({}, 0.05, r);
    Rng r2 = make_stream({22});
    return dgp::assign_treatment(dgp::generate_population(layout, {}, r2), r2);
  }();
  return pop;
}

}  // namespace

TEST(Design, StratifiedDrawTakesRequestedCounts) {
  const auto& pop = shared_population();
  Rng rng = make_stream({1});
  const design::DesignConfig cfg;
  const auto ids = design::stratified_cluster_sample(pop.layout, cfg, rng);
  EXPECT_EQ(ids.size(), 140u);
  std::array<int, 5> per{};
  for (auto id : ids) ++per[pop.layout.schools[id].stratum - 1];
  for (int s = 0; s < 5; ++s) EXPECT_EQ(per[s], cfg.schools_per_stratum[s]);
  EXPECT_EQ(std::set<std::uint32_t>(ids.begin(), ids.end()).size(), ids.size());
}

TEST(Design, ExhaustiveAndOverflowRequests) {
  const auto& pop = shared_population();
  design::DesignConfig cfg;
  for (int s = 0; s < 5; ++s) cfg.schools_per_stratum[s] = pop.layout.strata[s].school_count;
  Rng rng = make_stream({2});
  EXPECT_EQ(design::stratified_cluster_sample(pop.layout, cfg, rng).size(), pop.layout.schools.size());
  cfg.schools_per_stratum[0] += 1;
  try {
    design::stratified_cluster_sample(pop.layout, cfg, rng);
    FAIL() << "expected an overflow error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("stratum 1"), std::string::npos);
  }
}

TEST(Design, SubsampleKeepProbability) {
  std::vector<std::uint32_t> ids(140);
  std::iota(ids.begin(), ids.end(), 0u);
  Rng rng = make_stream({3});
  EXPECT_EQ(design::subsample_schools(ids, 1.0, rng), ids);
  EXPECT_TRUE(design::subsample_schools({}, 0.5, rng).empty());
  EXPECT_THROW(design::subsample_schools(ids, 0.0, rng), std::invalid_argument);
  double total = 0.0;
  const int reps = 10000;
  for (int i = 0; i < reps; ++i) {
    const auto k = design::subsample_schools(ids, 0.5, rng).size();
    if (i == 0) {
      EXPECT_GE(k, 50u);
      EXPECT_LE(k, 90u);
    }
    total += static_cast<double>(k);
  }
  EXPECT_NEAR(total / reps, 70.0, 3.0 * std::sqrt(35.0) / 100.0);
}

TEST(Design, ResponseAtZeroPrevGpaIsHalf) {
  auto pop = shared_population();
  for (auto& p : pop.individuals) p.v = 0.0;
  std::vector<std::uint32_t> all;
  for (const auto& s : pop.layout.schools) all.push_back(s.id);
  Rng rng = make_stream({4});
  const auto d = design::student_response(pop, all, rng);
  const double n = static_cast<double>(d.eligible_students);
  EXPECT_NEAR(d.response_rate(), 0.5, 4.0 * std::sqrt(0.25 / n));
}

TEST(Design, RowsFollowConsistencyAndProvenance) {
  const auto& pop = shared_population();
  const auto d = design::draw_sample(pop, {}, 5);
  ASSERT_GT(d.n(), 0u);
  std::set<std::uint32_t> seen;
  for (const auto& r : d.rows) {
    const auto& p = pop.individuals[r.individual_id];
    EXPECT_EQ(p.id, r.individual_id);
    EXPECT_EQ(r.y, p.z ? p.y1 : p.y0);
    EXPECT_EQ(r.v, p.v);
    EXPECT_TRUE(std::binary_search(d.schools.begin(), d.schools.end(), r.c.school));
    EXPECT_TRUE(seen.insert(r.individual_id).second);
  }
  EXPECT_GT(d.response_rate(), 0.85);
  EXPECT_LT(d.response_rate(), 0.97);
}

TEST(Design, CensusReproducesPopulation) {
  const auto& pop = shared_population();
  design::DesignConfig cfg;
  for (int s = 0; s < 5; ++s) cfg.schools_per_stratum[s] = pop.layout.strata[s].school_count;
  cfg.school_keep_prob = 1.0;
  cfg.response_model = design::ResponseModel::Always;
  const auto d = design::draw_sample(pop, cfg, 6);
  ASSERT_EQ(d.n(), pop.size());
  for (std::size_t i = 0; i < d.n(); ++i) EXPECT_EQ(d.rows[i].individual_id, pop.individuals[i].id);
}

TEST(Design, DeterministicGivenSeed) {
  const auto& pop = shared_population();
  const auto a = design::draw_sample(pop, {}, 7), b = design::draw_sample(pop, {}, 7);
  ASSERT_EQ(a.n(), b.n());
  for (std::size_t i = 0; i < a.n(); ++i) EXPECT_EQ(a.rows[i].individual_id, b.rows[i].individual_id);
  EXPECT_EQ(a.schools, b.schools);
}

TEST(Design, SampleFileRoundTrip) {
  const auto& pop = shared_population();
  const auto d = design::draw_sample(pop, {}, 8);
  const auto dir = std::filesystem::temp_directory_path();
  const auto csv = (dir / "mrpsim_sample.csv").string(), prov = (dir / "mrpsim_sample_prov.txt").string();
  design::write_sample_csv(d, csv);
  design::write_provenance(d, prov);
  const auto r = design::read_sample(csv, prov);
  ASSERT_EQ(r.n(), d.n());
  EXPECT_EQ(r.schools, d.schools);
  EXPECT_EQ(r.seed, d.seed);
  for (std::size_t i = 0; i < d.n(); ++i) {
    EXPECT_EQ(r.rows[i].v, d.rows[i].v);
    EXPECT_EQ(r.rows[i].y, d.rows[i].y);
    EXPECT_EQ(r.rows[i].c, d.rows[i].c);
    EXPECT_EQ(r.rows[i].z, d.rows[i].z);
  }
}
