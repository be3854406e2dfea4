#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mrpsim/harness.hpp"

using namespace mrpsim;
using estimators::EstimateResult;
using estimators::Estimator;

namespace {

struct Naive {
  double mse, psr, coverage;
};

// Direct transcription of the metric formulas, one pass per term.
Naive naive_metrics(const std::vector<double>& pt, const std::vector<double>& se,
                    const std::vector<double>& lo, const std::vector<double>& hi, double truth) {
  const double m = static_cast<double>(pt.size());
  double mean = 0.0;
  for (double p : pt) mean += p / m;
  double var = 0.0;
  for (double p : pt) var += (p - mean) * (p - mean) / m;
  double a = 0.0, b = 0.0, hits = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    a += std::pow((truth - pt[i]) / se[i], 2);
    b += std::log(std::pow(se[i], 2));
    hits += (lo[i] <= truth && truth <= hi[i]) ? 1.0 : 0.0;
  }
  return {std::pow(mean - truth, 2) + var, -a / m - b / m, hits / m};
}

EstimateResult row(Estimator e, const std::string& label, double pt, double se, int rep) {
  EstimateResult r;
  r.estimator = e;
  r.subpopulation = label;
  r.point = pt;
  r.se = se;
  r.lower95 = pt - 1.96 * se;
  r.upper95 = pt + 1.96 * se;
  r.replication = rep;
  return r;
}

}  // namespace

TEST(Metrics, WorkedExamples) {
  const auto m = harness::compute_mse({1.0, 3.0}, 1.0);
  EXPECT_DOUBLE_EQ(m.bias_sq, 1.0);
  EXPECT_DOUBLE_EQ(m.variance, 1.0);
  EXPECT_DOUBLE_EQ(m.mse, 2.0);
  // se = 1 everywhere: PSR is minus the mean squared error.
  EXPECT_DOUBLE_EQ(harness::compute_psr({0.5, -0.5}, {1.0, 1.0}, 0.0), -0.25);
  EXPECT_DOUBLE_EQ(harness::compute_psr({0.0}, {std::exp(1.0)}, 0.0), -2.0);
  // Closed intervals: an endpoint equal to the truth counts.
  EXPECT_DOUBLE_EQ(harness::compute_coverage({{0.0, 1.0}, {1.0, 2.0}, {1.5, 2.0}}, 1.0), 2.0 / 3.0);
  EXPECT_THROW(harness::compute_mse({}, 0.0), std::invalid_argument);
  EXPECT_THROW(harness::compute_psr({1.0}, {0.0}, 0.0), std::invalid_argument);
  EXPECT_THROW(harness::compute_psr({1.0}, {1.0, 2.0}, 0.0), std::invalid_argument);
  EXPECT_THROW(harness::compute_coverage({{2.0, 1.0}}, 0.0), std::invalid_argument);
}

TEST(Metrics, MatchNaiveLoopsAndIgnoreOrder) {
  std::mt19937_64 g(71);
  std::normal_distribution<double> nd(0.12, 0.05);
  std::uniform_real_distribution<double> ud(0.01, 0.1);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 5 + trial;
    std::vector<EstimateResult> rows;
    std::vector<double> pt, se, lo, hi;
    for (int i = 0; i < m; ++i) {
      rows.push_back(row(Estimator::MRP_MI, "all", nd(g), ud(g), i + 1));
      pt.push_back(rows.back().point);
      se.push_back(rows.back().se);
      lo.push_back(rows.back().lower95);
      hi.push_back(rows.back().upper95);
    }
    oracle::TruthTable t;
    t.truth["all"] = 0.126;
    const auto want = naive_metrics(pt, se, lo, hi, 0.126);
    const auto rep = harness::compute_metrics(rows, t);
    const auto& got = rep.at(Estimator::MRP_MI, "all");
    EXPECT_NEAR(got.mse.mse, want.mse, 1e-12);
    EXPECT_NEAR(got.psr, want.psr, 1e-12);
    EXPECT_NEAR(got.coverage, want.coverage, 1e-12);

    std::shuffle(rows.begin(), rows.end(), g);
    const auto& again = harness::compute_metrics(rows, t).at(Estimator::MRP_MI, "all");
    EXPECT_NEAR(again.mse.mse, got.mse.mse, 1e-12);
    EXPECT_NEAR(again.psr, got.psr, 1e-12);
    EXPECT_EQ(again.coverage, got.coverage);
  }
}

TEST(Metrics, SkippedRowsAreCountedNotUsed) {
  std::vector<EstimateResult> rows{row(Estimator::OLS, "SA=High", 0.2, 0.1, 1), row(Estimator::OLS, "SA=High", 0.4, 0.1, 2)};
  rows.push_back(estimators::skip_marker(Estimator::OLS, "SA=High", 0, "empty"));
  rows.push_back(estimators::skip_marker(Estimator::SVY, "SA=High", 0, "empty"));
  oracle::TruthTable t;
  t.truth["SA=High"] = 0.3;
  const auto rep = harness::compute_metrics(rows, t);
  const auto& ols = rep.at(Estimator::OLS, "SA=High");
  EXPECT_EQ(ols.used, 2u);
  EXPECT_EQ(ols.skipped, 1u);
  EXPECT_NEAR(ols.mean, 0.3, 1e-15);
  EXPECT_NEAR(ols.emp_se, std::sqrt(0.02 / 2.0), 1e-15);
  const auto& svy = rep.at(Estimator::SVY, "SA=High");
  EXPECT_EQ(svy.used, 0u);
  EXPECT_TRUE(std::isnan(svy.mse.mse));
  EXPECT_THROW(rep.at(Estimator::MRP_I, "SA=High"), std::out_of_range);
}

TEST(Csv, EstimatesRoundTripWithAwkwardNotes) {
  std::vector<EstimateResult> rows{row(Estimator::MRP_MI, "SA=High&MC=Low&RE=Asian", 0.1 / 3.0, 0.0123, 4)};
  rows[0].note = "R-hat 1.2, 5% over; line\nbreak";
  rows[0].seed = 0xdeadbeefcafeULL;
  rows[0].n_sample_subset = 321;
  rows.push_back(estimators::skip_marker(Estimator::SVY, "all", 0, "no rows, nothing to fit"));
  rows.back().replication = 5;
  const auto back = harness::parse_estimates(harness::emit_estimates(rows));
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].estimator, rows[i].estimator);
    EXPECT_EQ(back[i].subpopulation, rows[i].subpopulation);
    EXPECT_EQ(back[i].replication, rows[i].replication);
    EXPECT_EQ(back[i].skipped, rows[i].skipped);
    EXPECT_EQ(back[i].note, rows[i].note);
    EXPECT_EQ(back[i].seed, rows[i].seed);
    EXPECT_EQ(back[i].n_sample_subset, rows[i].n_sample_subset);
  }
  EXPECT_EQ(back[0].point, rows[0].point);
  EXPECT_EQ(back[0].se, rows[0].se);
  EXPECT_EQ(back[0].upper95, rows[0].upper95);
  EXPECT_TRUE(std::isnan(back[1].point));
  EXPECT_EQ(harness::unescape_field(harness::escape_field("a%2C,b")), "a%2C,b");
}

TEST(Csv, MetricsRoundTrip) {
  std::vector<EstimateResult> rows{row(Estimator::MRP_I, "all", 0.11, 0.02, 1), row(Estimator::MRP_I, "all", 0.14, 0.03, 2)};
  oracle::TruthTable t;
  t.truth["all"] = 0.125;
  const auto rep = harness::compute_metrics(rows, t);
  const auto back = harness::parse_metrics(harness::emit_metrics(rep));
  ASSERT_EQ(back.rows.size(), 1u);
  const auto& a = rep.rows[0];
  const auto& b = back.rows[0];
  EXPECT_EQ(b.estimator, a.estimator);
  EXPECT_EQ(b.used, a.used);
  EXPECT_EQ(b.mse.mse, a.mse.mse);
  EXPECT_EQ(b.psr, a.psr);
  EXPECT_EQ(b.coverage, a.coverage);
}

TEST(Config, KeyValueRoundTripAndErrors) {
  auto c = harness::ExperimentConfig::desk();
  c.seed = 99;
  c.scale = 0.02;
  c.reps = 3;
  c.design.schools_per_stratum = {4, 5, 6, 7, 8};
  c.subpopulations = {"all", "SA=Low&RE=Black"};
  c.svy = false;
  c.exclusive_draws = true;
  c.out_dir = "elsewhere";
  const auto back = harness::ExperimentConfig::from_key_values(c.to_key_values());
  EXPECT_EQ(back.to_key_values(), c.to_key_values());
  EXPECT_EQ(back.design.schools_per_stratum, c.design.schools_per_stratum);
  EXPECT_EQ(back.subpopulations, c.subpopulations);
  EXPECT_FALSE(back.svy);

  io::KeyValues bad = c.to_key_values();
  bad["colour"] = "blue";
  EXPECT_THROW(harness::ExperimentConfig::from_key_values(bad), std::invalid_argument);

  auto f = harness::ExperimentConfig::full();
  EXPECT_EQ(f.scale, 1.0);
  EXPECT_EQ(f.reps, 100);
  c.reps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Seeds, StreamsAreDistinct) {
  const auto a = harness::seeds::derive(1, harness::seeds::kSample, 1);
  EXPECT_EQ(a, harness::seeds::derive(1, harness::seeds::kSample, 1));
  EXPECT_NE(a, harness::seeds::derive(1, harness::seeds::kSample, 2));
  EXPECT_NE(a, harness::seeds::derive(1, harness::seeds::kPopulation, 1));
  EXPECT_NE(a, harness::seeds::derive(2, harness::seeds::kSample, 1));
}

TEST(Experiment, TinyRunIsCompleteAndDeterministic) {
  harness::ExperimentConfig c;
  c.seed = 7;
  c.scale = 0.01;
  c.reps = 2;
  c.chains = 2;
  c.warmup = 60;
  c.draws = 30;
  c.prior_rounds = 2;
  c.design.schools_per_stratum = {3, 3, 3, 3, 3};
  c.design.school_keep_prob = 1.0;
  c.subpopulations = {"all", "SA=High", "SA=Low&RE=Black"};
  c.school_cates = false;
  c.out_dir = (std::filesystem::temp_directory_path() / "mrpsim_tiny").string();

  const auto a = harness::run_experiment(c);
  ASSERT_EQ(a.replications.size(), 2u);
  for (const auto& r : a.replications) EXPECT_TRUE(r.ok) << r.error;
  EXPECT_EQ(a.estimates.size(), 2u * 4u * 3u);
  EXPECT_EQ(a.metrics.rows.size(), 4u * 3u);
  for (const auto& r : a.replications) EXPECT_LT(r.raking_max_rel_error, 1e-6);

  const auto b = harness::run_experiment(c);
  ASSERT_EQ(b.estimates.size(), a.estimates.size());
  for (std::size_t i = 0; i < a.estimates.size(); ++i) {
    EXPECT_EQ(a.estimates[i].point, b.estimates[i].point) << i;
    EXPECT_EQ(a.estimates[i].se, b.estimates[i].se) << i;
  }

  harness::write_outputs(a, c);
  const auto back = harness::read_estimates((std::filesystem::path(c.out_dir) / "estimates.csv").string());
  EXPECT_EQ(back.size(), a.estimates.size());
  const auto truth = oracle::read_truth_csv((std::filesystem::path(c.out_dir) / "truth.csv").string());
  EXPECT_EQ(truth.truth.size(), 3u);
  EXPECT_NEAR(truth.ate, a.truth.ate, 1e-15);
}
