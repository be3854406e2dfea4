#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrpsim/bayes/model.hpp"
#include "mrpsim/bayes/predict.hpp"
#include "mrpsim/design.hpp"
#include "mrpsim/freq.hpp"
#include "mrpsim/math/rng.hpp"
#include "mrpsim/poststrat.hpp"

namespace mrpsim::estimators {

enum class Estimator { OLS, SVY, MRP_I, MRP_MI };

inline constexpr std::array<Estimator, 4> kAllEstimators{Estimator::OLS, Estimator::SVY, Estimator::MRP_I,
                                                         Estimator::MRP_MI};

inline std::string_view estimator_name(Estimator e) {
  switch (e) {
    case Estimator::OLS: return "OLS";
    case Estimator::SVY: return "SVY";
    case Estimator::MRP_I: return "MRP-I";
    case Estimator::MRP_MI: return "MRP-MI";
  }
  return "?";
}

inline Estimator parse_estimator(std::string_view s) {
  for (auto e : kAllEstimators) {
    if (estimator_name(e) == s) return e;
  }
  throw std::invalid_argument("unknown estimator '" + std::string(s) + "'");
}

inline constexpr double kSeFloor = 1e-12;

struct EstimateResult {
  Estimator estimator = Estimator::MRP_MI;
  std::string subpopulation;
  double point = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double lower95 = std::numeric_limits<double>::quiet_NaN();
  double upper95 = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> draws;
  int replication = 0;
  std::uint64_t seed = 0;
  std::size_t n_sample_subset = 0;
  bool skipped = false;
  std::string note;
};

// Type-7 sample quantile of sorted values.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty vector");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Point = draw mean, se = draw sd, equal-tailed 95% percentile interval.
inline EstimateResult summarize_draws(Estimator e, std::string label, std::vector<double> draws, bool keep = true) {
  if (draws.empty()) throw std::invalid_argument("summarize_draws: no draws");
  EstimateResult r;
  r.estimator = e;
  r.subpopulation = std::move(label);
  double sum = 0.0;
  for (double x : draws) sum += x;
  r.point = sum / static_cast<double>(draws.size());
  double ss = 0.0;
  for (double x : draws) ss += (x - r.point) * (x - r.point);
  r.se = draws.size() > 1 ? std::sqrt(ss / static_cast<double>(draws.size() - 1)) : 0.0;
  if (!(r.se >= kSeFloor)) {
    r.se = kSeFloor;
    r.note = "degenerate draws: se floored at 1e-12";
  }
  auto sorted = draws;
  std::sort(sorted.begin(), sorted.end());
  r.lower95 = quantile_sorted(sorted, 0.025);
  r.upper95 = quantile_sorted(sorted, 0.975);
  if (keep) r.draws = std::move(draws);
  return r;
}

struct MrpOptions {
  std::uint64_t seed = 1;
  bool exclusive_draws = false;  // disjoint parameter draws per (cell, arm)
};

namespace detail {

constexpr std::uint64_t kPrevSchoolStream = 0x51;
constexpr std::uint64_t kPostSchoolStream = 0x52;
constexpr std::uint64_t kCellStream = 0x53;

// Per-draw school effects: fitted for observed schools, drawn once per school
// and draw otherwise so every cell of a new school shares them.
inline std::vector<bayes::SchoolEffect> school_effects(const bayes::Predictor& p, std::uint32_t school,
                                                       std::uint64_t seed, std::uint64_t tag) {
  const std::size_t s = p.n_draws();
  std::vector<bayes::SchoolEffect> out(s);
  Rng rng = make_stream({seed, tag, school});
  for (std::size_t j = 0; j < s; ++j) out[j] = p.school_effect(j, school, rng);
  return out;
}

// Shared engine for MRP-MI (prev != nullptr) and MRP-I (vhat != nullptr).
inline std::vector<std::vector<double>> mrp_batch(const bayes::Predictor* prev, const std::vector<double>* vhat,
                                                  const bayes::Predictor& post, const poststrat::PoststratMatrix& m,
                                                  const std::vector<poststrat::SubpopIndex>& subpops,
                                                  const MrpOptions& opt) {
  if (subpops.empty()) throw std::invalid_argument("mrp: no subpopulations");
  const std::size_t s = post.n_draws();
  if (prev && prev->n_draws() != s) {
    throw std::invalid_argument("mrp: draw-count mismatch between Prev-GPA (" + std::to_string(prev->n_draws()) +
                                ") and Post-GPA (" + std::to_string(s) + ") fits");
  }
  if (vhat && vhat->size() != m.size()) throw std::invalid_argument("mrp: imputed Prev-GPA not aligned with matrix");

  std::vector<std::vector<int>> member(m.size());
  std::vector<double> den(subpops.size(), 0.0);
  for (std::size_t k = 0; k < subpops.size(); ++k) {
    if (subpops[k].cells.empty()) throw std::invalid_argument("mrp: subpopulation '" + subpops[k].label + "' is empty");
    for (auto c : subpops[k].cells) {
      member.at(c).push_back(static_cast<int>(k));
      den[k] += m[c].n;
    }
  }
  std::size_t n_cells = 0;
  for (const auto& mm : member) n_cells += !mm.empty();

  std::size_t out_draws = s, block = 0;
  if (opt.exclusive_draws) {
    block = s / (2 * n_cells);
    if (block < 1) {
      throw std::invalid_argument("mrp: exclusive draws need S >= 2|I_O| (S = " + std::to_string(s) +
                                  ", |I_O| = " + std::to_string(n_cells) + ")");
    }
    out_draws = block;
  }

  std::vector<std::vector<double>> acc(subpops.size(), std::vector<double>(out_draws, 0.0));
  std::vector<double> diff(out_draws);
  std::uint32_t current_school = std::numeric_limits<std::uint32_t>::max();
  std::vector<bayes::SchoolEffect> prev_school, post_school;
  std::size_t ordinal = 0;
  for (std::size_t c = 0; c < m.size(); ++c) {
    if (member[c].empty()) continue;
    const auto& cov = m[c].c;
    if (cov.school != current_school) {
      current_school = cov.school;
      if (prev) prev_school = school_effects(*prev, cov.school, opt.seed, kPrevSchoolStream);
      post_school = school_effects(post, cov.school, opt.seed, kPostSchoolStream);
    }
    Rng rng = make_stream({opt.seed, kCellStream, poststrat::cell_key(cov)});
    auto draw_v = [&](std::size_t j) {
      if (!prev) return (*vhat)[c];
      return prev->draw_outcome(prev->linear_predictor(j, cov, 0, 0.0, prev_school[j]), j, rng);
    };
    auto draw_y = [&](std::size_t j, int z, double v) {
      return post.draw_outcome(post.linear_predictor(j, cov, z, v, post_school[j]), j, rng);
    };
    if (!opt.exclusive_draws) {
      for (std::size_t j = 0; j < s; ++j) {
        const double v = draw_v(j);
        const double y1 = draw_y(j, 1, v);
        const double y0 = draw_y(j, 0, v);
        diff[j] = y1 - y0;
      }
    } else {
      for (std::size_t b = 0; b < block; ++b) {
        const std::size_t j1 = (2 * ordinal) * block + b;
        const std::size_t j0 = (2 * ordinal + 1) * block + b;
        const double y1 = draw_y(j1, 1, draw_v(j1));
        const double y0 = draw_y(j0, 0, draw_v(j0));
        diff[b] = y1 - y0;
      }
    }
    ++ordinal;
    for (int k : member[c]) {
      const double w = m[c].n;
      auto& a = acc[k];
      for (std::size_t j = 0; j < out_draws; ++j) a[j] += w * diff[j];
    }
  }
  for (std::size_t k = 0; k < subpops.size(); ++k) {
    for (auto& x : acc[k]) x /= den[k];
  }
  return acc;
}

}  // namespace detail

// Per-cell Prev-GPA point imputation: posterior predictive mean, averaging the
// truncated-normal mean over parameter draws.
inline std::vector<double> impute_vhat(const bayes::PosteriorDraws& prev, const poststrat::PoststratMatrix& m,
                                       std::uint64_t seed) {
  const bayes::Predictor p(prev);
  const std::size_t s = p.n_draws();
  std::vector<double> out(m.size());
  std::uint32_t current_school = std::numeric_limits<std::uint32_t>::max();
  std::vector<bayes::SchoolEffect> effects;
  for (std::size_t c = 0; c < m.size(); ++c) {
    const auto& cov = m[c].c;
    if (cov.school != current_school) {
      current_school = cov.school;
      effects = detail::school_effects(p, cov.school, seed, detail::kPrevSchoolStream);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < s; ++j) sum += p.expected_outcome(p.linear_predictor(j, cov, 0, 0.0, effects[j]), j);
    out[c] = sum / static_cast<double>(s);
  }
  return out;
}

inline std::vector<EstimateResult> mrp_mi_batch(const bayes::PosteriorDraws& prev, const bayes::PosteriorDraws& post,
                                                const poststrat::PoststratMatrix& m,
                                                const std::vector<poststrat::SubpopIndex>& subpops,
                                                const MrpOptions& opt, bool keep_draws = true) {
  const bayes::Predictor pp(prev), py(post);
  auto draws = detail::mrp_batch(&pp, nullptr, py, m, subpops, opt);
  std::vector<EstimateResult> out;
  for (std::size_t k = 0; k < subpops.size(); ++k) {
    out.push_back(summarize_draws(Estimator::MRP_MI, subpops[k].label, std::move(draws[k]), keep_draws));
    out.back().seed = opt.seed;
  }
  return out;
}

inline std::vector<EstimateResult> mrp_i_batch(const std::vector<double>& vhat, const bayes::PosteriorDraws& post,
                                               const poststrat::PoststratMatrix& m,
                                               const std::vector<poststrat::SubpopIndex>& subpops,
                                               const MrpOptions& opt, bool keep_draws = true) {
  const bayes::Predictor py(post);
  auto draws = detail::mrp_batch(nullptr, &vhat, py, m, subpops, opt);
  std::vector<EstimateResult> out;
  for (std::size_t k = 0; k < subpops.size(); ++k) {
    out.push_back(summarize_draws(Estimator::MRP_I, subpops[k].label, std::move(draws[k]), keep_draws));
    out.back().seed = opt.seed;
  }
  return out;
}

inline EstimateResult mrp_mi(const bayes::PosteriorDraws& prev, const bayes::PosteriorDraws& post,
                             const poststrat::PoststratMatrix& m, const poststrat::SubpopIndex& idx,
                             const MrpOptions& opt) {
  return mrp_mi_batch(prev, post, m, {idx}, opt).front();
}

inline EstimateResult mrp_i(const std::vector<double>& vhat, const bayes::PosteriorDraws& post,
                            const poststrat::PoststratMatrix& m, const poststrat::SubpopIndex& idx,
                            const MrpOptions& opt) {
  return mrp_i_batch(vhat, post, m, {idx}, opt).front();
}

inline std::vector<design::SampleRow> subset_rows(const design::ObservedSample& d, const poststrat::CellFilter& f) {
  std::vector<design::SampleRow> rows;
  for (const auto& r : d.rows) {
    if (f.matches(r.c)) rows.push_back(r);
  }
  return rows;
}

inline EstimateResult from_fit(Estimator e, const std::string& label, const freq::WeightedFit& fit) {
  EstimateResult r;
  r.estimator = e;
  r.subpopulation = label;
  r.point = fit.beta_z;
  r.se = fit.se;
  r.lower95 = fit.lower95;
  r.upper95 = fit.upper95;
  r.n_sample_subset = fit.n;
  for (const auto& w : fit.warnings) r.note += (r.note.empty() ? "" : "; ") + w;
  return r;
}

inline EstimateResult skip_marker(Estimator e, const std::string& label, std::size_t n, std::string why) {
  EstimateResult r;
  r.estimator = e;
  r.subpopulation = label;
  r.n_sample_subset = n;
  r.skipped = true;
  r.note = std::move(why);
  return r;
}

struct EstimateOptions {
  bool ols = true;
  bool svy = true;
  bool mrp_i = true;
  bool mrp_mi = true;
  MrpOptions mrp;
  bool keep_draws = false;
};

// Every enabled estimator on every subpopulation. OLS and SVY refit on the
// sample subset and leave a skip marker when the subset cannot support a fit.
inline std::vector<EstimateResult> estimate_all(const design::ObservedSample& d, const poststrat::PoststratMatrix& m,
                                                const std::vector<poststrat::CellFilter>& filters,
                                                const bayes::PosteriorDraws* prev, const bayes::PosteriorDraws* post,
                                                const EstimateOptions& opt) {
  if (d.rows.empty()) throw std::invalid_argument("estimate_all: empty sample");
  std::vector<poststrat::SubpopIndex> idx;
  std::vector<std::size_t> n_subset;
  for (const auto& f : filters) {
    idx.push_back(poststrat::subpop_index(m, f));
    n_subset.push_back(subset_rows(d, f).size());
  }
  std::vector<EstimateResult> out;
  if (opt.ols || opt.svy) {
    std::vector<double> weights;
    std::string rake_error;
    if (opt.svy) {
      try {
        weights = freq::rake_weights(d, freq::margins_from_matrix(m)).weights;
      } catch (const std::exception& ex) {
        rake_error = ex.what();
      }
    }
    for (const auto& f : filters) {
      std::vector<design::SampleRow> rows;
      std::vector<double> w;
      for (std::size_t i = 0; i < d.rows.size(); ++i) {
        if (!f.matches(d.rows[i].c)) continue;
        rows.push_back(d.rows[i]);
        if (opt.svy && rake_error.empty()) w.push_back(weights[i]);
      }
      auto run = [&](Estimator e, auto&& fitter) {
        if (rows.empty()) {
          out.push_back(skip_marker(e, f.label, 0, "no sampled units in subpopulation"));
          return;
        }
        if (e == Estimator::SVY && !rake_error.empty()) {
          out.push_back(skip_marker(e, f.label, rows.size(), rake_error));
          return;
        }
        try {
          out.push_back(from_fit(e, f.label, fitter()));
        } catch (const std::exception& ex) {
          out.push_back(skip_marker(e, f.label, rows.size(), ex.what()));
        }
      };
      if (opt.ols) run(Estimator::OLS, [&] { return freq::fit_ols(rows); });
      if (opt.svy) run(Estimator::SVY, [&] { return freq::fit_svy(rows, w); });
    }
  }
  auto tag = [&](std::vector<EstimateResult> rs) {
    for (std::size_t k = 0; k < rs.size(); ++k) {
      rs[k].n_sample_subset = n_subset[k];
      out.push_back(std::move(rs[k]));
    }
  };
  if (opt.mrp_i) {
    if (!prev || !post) throw std::invalid_argument("estimate_all: MRP-I needs both fits");
    tag(mrp_i_batch(impute_vhat(*prev, m, opt.mrp.seed), *post, m, idx, opt.mrp, opt.keep_draws));
  }
  if (opt.mrp_mi) {
    if (!prev || !post) throw std::invalid_argument("estimate_all: MRP-MI needs both fits");
    tag(mrp_mi_batch(*prev, *post, m, idx, opt.mrp, opt.keep_draws));
  }
  return out;
}

}  // namespace mrpsim::estimators
