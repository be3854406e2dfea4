#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrpsim/covariates.hpp"
#include "mrpsim/dgp.hpp"
#include "mrpsim/io.hpp"
#include "mrpsim/math/quadrature.hpp"
#include "mrpsim/math/truncnorm.hpp"
#include "mrpsim/poststrat.hpp"

namespace mrpsim::oracle {

inline constexpr int kDefaultQuadNodes = 64;

// Closed-form mean of N(mu, sigma) truncated to (lo, hi).
inline double truncnorm_mean(double mu, double sigma, double lo, double hi) {
  if (!(sigma > 0.0)) throw std::invalid_argument("truncnorm_mean: sigma must be positive");
  if (!(lo < hi)) throw std::invalid_argument("truncnorm_mean: lo must be below hi");
  return math::truncnorm_mean_unchecked(mu, sigma, lo, hi);
}

namespace detail {

inline const math::GaussLegendreRule& cached_rule(int nodes) {
  thread_local std::map<int, math::GaussLegendreRule> cache;
  auto it = cache.find(nodes);
  if (it == cache.end()) it = cache.emplace(nodes, math::gauss_legendre(nodes)).first;
  return it->second;
}

// E[Y(z) | cell] given the shift applied inside the clamp; Prev-GPA integrated
// against its truncated-normal density. The clamp kinks become breakpoints.
inline double expected_outcome(double shift, SchoolAchievement sa, const dgp::Coefficients& k, int quad) {
  const auto& rule = cached_rule(quad);
  const int s = static_cast<int>(sa);
  const double mu_v = k.mu_x[s];
  const double sd_v = k.sigma_x[s];
  const double log_norm = math::truncnorm_log_normalizer(mu_v, sd_v, k.gpa_lo, k.gpa_hi);
  auto integrand = [&](double v) {
    const double m = std::clamp(v + shift, k.gpa_lo, k.gpa_hi);
    const double dens = std::exp(math::normal_logpdf((v - mu_v) / sd_v) - std::log(sd_v) - log_norm);
    return math::truncnorm_mean_unchecked(m, k.outcome_sd, k.gpa_lo, k.gpa_hi) * dens;
  };
  return math::integrate_piecewise(rule, k.gpa_lo, k.gpa_hi, {k.gpa_lo - shift, k.gpa_hi - shift}, integrand);
}

}  // namespace detail

// E[Y(z) | cell covariates, school noises u, t] under the data-generating process.
inline double cell_truth(int z, const Covariates& c, const dgp::Coefficients& coeffs, double u, double t,
                         int quad = kDefaultQuadNodes) {
  if (quad < 8) throw std::invalid_argument("cell_truth: at least 8 quadrature nodes required");
  if (z != 0 && z != 1) throw std::invalid_argument("cell_truth: z must be 0 or 1");
  const double shift = (coeffs.effect(c) + u) * z + t;
  return detail::expected_outcome(shift, c.sa(), coeffs, quad);
}

inline double cell_effect(const Covariates& c, const dgp::Coefficients& coeffs, double u, double t,
                          int quad = kDefaultQuadNodes) {
  return cell_truth(1, c, coeffs, u, t, quad) - cell_truth(0, c, coeffs, u, t, quad);
}

// True effect of every matrix cell; the control arm is shared within a school.
inline std::vector<double> cell_effects(const poststrat::PoststratMatrix& m, const dgp::Coefficients& coeffs,
                                        const dgp::StrataLayout& layout, int quad = kDefaultQuadNodes) {
  std::vector<double> out(m.size());
  std::uint32_t cached_school = std::numeric_limits<std::uint32_t>::max();
  double control = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& c = m[i].c;
    const auto& school = layout.schools.at(c.school);
    if (c.school != cached_school) {
      control = cell_truth(0, c, coeffs, school.u, school.t, quad);
      cached_school = c.school;
    }
    out[i] = cell_truth(1, c, coeffs, school.u, school.t, quad) - control;
  }
  return out;
}

// G-formula truth for a subpopulation: N_c-weighted cell effects.
inline double g_formula(const poststrat::SubpopIndex& idx, const poststrat::PoststratMatrix& m,
                        const dgp::Coefficients& coeffs, const dgp::StrataLayout& layout,
                        int quad = kDefaultQuadNodes) {
  std::vector<double> values(m.size(), std::numeric_limits<double>::quiet_NaN());
  for (auto c : idx.cells) {
    const auto& school = layout.schools.at(m[c].c.school);
    values[c] = cell_effect(m[c].c, coeffs, school.u, school.t, quad);
  }
  return poststrat::poststratify_point(values, idx, m);
}

struct TruthTable {
  std::map<std::string, double> truth;
  std::map<std::string, double> share;
  double ate = 0.0;
  int quad = kDefaultQuadNodes;
  std::uint64_t layout_seed = 0;

  double at(const std::string& label) const {
    const auto it = truth.find(label);
    if (it == truth.end()) throw std::out_of_range("no truth for subpopulation '" + label + "'");
    return it->second;
  }
};

inline TruthTable compute_truth(const std::vector<poststrat::CellFilter>& subpops, const poststrat::PoststratMatrix& m,
                                const dgp::Coefficients& coeffs, const dgp::StrataLayout& layout,
                                int quad = kDefaultQuadNodes) {
  TruthTable table;
  table.quad = quad;
  const auto effects = cell_effects(m, coeffs, layout, quad);
  const auto all = poststrat::subpop_index(m, poststrat::CellFilter{});
  table.ate = poststrat::poststratify_point(effects, all, m);
  for (const auto& f : subpops) {
    const auto idx = poststrat::subpop_index(m, f);
    table.truth[f.label] = poststrat::poststratify_point(effects, idx, m);
    table.share[f.label] = idx.population_share;
  }
  return table;
}

inline void write_truth_csv(const TruthTable& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "subpopulation,truth,population_share\n";
  for (const auto& [label, value] : t.truth) {
    out << label << ',' << io::fmt(value) << ',' << io::fmt(t.share.at(label)) << '\n';
  }
}

inline TruthTable read_truth_csv(const std::string& path) {
  const auto csv = io::CsvTable::read(path);
  TruthTable t;
  for (std::size_t i = 0; i < csv.rows(); ++i) {
    const auto& label = csv.at(i, "subpopulation");
    t.truth[label] = csv.num(i, "truth");
    t.share[label] = csv.num(i, "population_share");
    if (label == "all" || label == "ATE") t.ate = t.truth[label];
  }
  return t;
}

}  // namespace mrpsim::oracle
