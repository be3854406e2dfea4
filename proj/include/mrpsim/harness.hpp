#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mrpsim/bayes/sampler.hpp"
#include "mrpsim/design.hpp"
#include "mrpsim/dgp.hpp"
#include "mrpsim/estimators.hpp"
#include "mrpsim/freq.hpp"
#include "mrpsim/io.hpp"
#include "mrpsim/oracle.hpp"
#include "mrpsim/poststrat.hpp"

namespace mrpsim::harness {

using estimators::EstimateResult;
using estimators::Estimator;

inline std::vector<std::string> default_subpopulations() {
  std::vector<std::string> s{"all", "SA=High&MC=Low", "SA=Low&RE=Black"};
  for (int re = 1; re <= kNumRace; ++re) s.push_back("SA=High&MC=Low&RE=" + std::string(race_name(re)));
  return s;
}

struct ExperimentConfig {
  std::uint64_t seed = 1;
  double scale = 0.05;
  int reps = 20;
  int chains = 4;
  int warmup = 500;
  int draws = 250;
  int prior_rounds = 40;
  int mcmc_threads = 1;
  design::DesignConfig design;
  std::vector<std::string> subpopulations = default_subpopulations();
  bool school_cates = true;
  int school_cate_replication = 1;
  bool ols = true, svy = true, mrp_i = true, mrp_mi = true;
  bool exclusive_draws = false;
  int quad_nodes = oracle::kDefaultQuadNodes;
  int workers = 1;
  std::string out_dir = "out";

  static ExperimentConfig desk() { return {}; }

  static ExperimentConfig full() {
    ExperimentConfig c;
    c.scale = 1.0;
    c.reps = 100;
    c.warmup = 1000;
    c.school_cates = false;
    return c;
  }

  void validate() const {
    if (reps < 1) throw std::invalid_argument("config: reps must be at least 1");
    if (subpopulations.empty()) throw std::invalid_argument("config: subpopulation list is empty");
    if (!(scale > 0.0 && scale <= 1.0)) throw std::invalid_argument("config: scale must lie in (0, 1]");
    if (!ols && !svy && !mrp_i && !mrp_mi) throw std::invalid_argument("config: no estimator enabled");
    if (school_cates && !mrp_i && !mrp_mi) throw std::invalid_argument("config: school_cates needs an MRP estimator");
    if (school_cate_replication < 1 || school_cate_replication > reps) {
      throw std::invalid_argument("config: school_cate_replication outside 1..reps");
    }
    if (workers < 1) throw std::invalid_argument("config: workers must be at least 1");
    if (quad_nodes < 2) throw std::invalid_argument("config: quad_nodes must be at least 2");
    fit_options(0).validate();
    for (const auto& s : subpopulations) poststrat::CellFilter::parse(s);
  }

  bayes::FitOptions fit_options(std::uint64_t fit_seed) const {
    bayes::FitOptions o;
    o.chains = chains;
    o.warmup = warmup;
    o.draws = draws;
    o.seed = fit_seed;
    o.threads = mcmc_threads;
    o.prior_rounds = prior_rounds;
    return o;
  }

  std::vector<poststrat::CellFilter> filters() const {
    std::vector<poststrat::CellFilter> f;
    for (const auto& s : subpopulations) f.push_back(poststrat::CellFilter::parse(s));
    return f;
  }

  bool needs_mrp() const { return mrp_i || mrp_mi; }

  io::KeyValues to_key_values() const {
    auto b = [](bool x) { return std::string(x ? "true" : "false"); };
    std::string sps, subs, est;
    for (int k = 0; k < kNumStrata; ++k) sps += (k ? " " : "") + std::to_string(design.schools_per_stratum[k]);
    for (const auto& s : subpopulations) subs += (subs.empty() ? "" : ";") + s;
    for (auto [on, e] : {std::pair{ols, Estimator::OLS}, {svy, Estimator::SVY}, {mrp_i, Estimator::MRP_I},
                         {mrp_mi, Estimator::MRP_MI}}) {
      if (on) est += (est.empty() ? "" : ",") + std::string(estimators::estimator_name(e));
    }
    return {{"seed", std::to_string(seed)},
            {"scale", io::fmt(scale)},
            {"reps", std::to_string(reps)},
            {"chains", std::to_string(chains)},
            {"warmup", std::to_string(warmup)},
            {"draws", std::to_string(draws)},
            {"prior_rounds", std::to_string(prior_rounds)},
            {"mcmc_threads", std::to_string(mcmc_threads)},
            {"schools_per_stratum", sps},
            {"school_keep_prob", io::fmt(design.school_keep_prob)},
            {"response_model",
             design.response_model == design::ResponseModel::Always ? "always" : "logistic"},
            {"subpopulations", subs},
            {"school_cates", b(school_cates)},
            {"school_cate_replication", std::to_string(school_cate_replication)},
            {"estimators", est},
            {"exclusive_draws", b(exclusive_draws)},
            {"quad_nodes", std::to_string(quad_nodes)},
            {"workers", std::to_string(workers)},
            {"out_dir", out_dir}};
  }

  // Keys absent from `kv` keep the values of `base`; unknown keys are errors.
  static ExperimentConfig from_key_values(const io::KeyValues& kv) { return from_key_values(kv, desk()); }

  static ExperimentConfig from_key_values(const io::KeyValues& kv, ExperimentConfig base) {
    auto flag = [](const std::string& k, const std::string& v) {
      if (v == "true" || v == "1" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "no") return false;
      throw std::invalid_argument("config: '" + k + "' expects true/false, got '" + v + "'");
    };
    auto int_of = [](const std::string& v) { return static_cast<int>(io::parse_int(v)); };
    ExperimentConfig c = std::move(base);
    for (const auto& [k, v] : kv) {
      if (k == "preset") continue;
      if (k == "seed") c.seed = std::stoull(v);
      else if (k == "scale") c.scale = io::parse_double(v);
      else if (k == "reps") c.reps = int_of(v);
      else if (k == "chains") c.chains = int_of(v);
      else if (k == "warmup") c.warmup = int_of(v);
      else if (k == "draws") c.draws = int_of(v);
      else if (k == "prior_rounds") c.prior_rounds = int_of(v);
      else if (k == "mcmc_threads") c.mcmc_threads = int_of(v);
      else if (k == "schools_per_stratum") {
        std::istringstream in(v);
        for (int s = 0; s < kNumStrata; ++s) {
          if (!(in >> c.design.schools_per_stratum[s])) {
            throw std::invalid_argument("config: schools_per_stratum needs five integers");
          }
        }
      } else if (k == "school_keep_prob") c.design.school_keep_prob = io::parse_double(v);
      else if (k == "response_model") {
        if (v == "logistic") c.design.response_model = design::ResponseModel::LogisticOfPrevGpa;
        else if (v == "always") c.design.response_model = design::ResponseModel::Always;
        else throw std::invalid_argument("config: response_model must be logistic or always");
      } else if (k == "subpopulations") {
        c.subpopulations.clear();
        for (const auto& s : io::split(v, ';')) {
          if (!io::trim(s).empty()) c.subpopulations.push_back(io::trim(s));
        }
      } else if (k == "school_cates") c.school_cates = flag(k, v);
      else if (k == "school_cate_replication") c.school_cate_replication = int_of(v);
      else if (k == "estimators") {
        c.ols = c.svy = c.mrp_i = c.mrp_mi = false;
        for (const auto& s : io::split(v, ',')) {
          switch (estimators::parse_estimator(io::trim(s))) {
            case Estimator::OLS: c.ols = true; break;
            case Estimator::SVY: c.svy = true; break;
            case Estimator::MRP_I: c.mrp_i = true; break;
            case Estimator::MRP_MI: c.mrp_mi = true; break;
          }
        }
      } else if (k == "exclusive_draws") c.exclusive_draws = flag(k, v);
      else if (k == "quad_nodes") c.quad_nodes = int_of(v);
      else if (k == "workers") c.workers = int_of(v);
      else if (k == "out_dir") c.out_dir = v;
      else throw std::invalid_argument("config: unknown key '" + k + "'");
    }
    return c;
  }

  // A `preset = desk|full` line selects the base values.
  static ExperimentConfig load(const std::string& path) {
    const auto kv = io::read_key_values(path);
    ExperimentConfig base;
    if (const auto it = kv.find("preset"); it != kv.end()) {
      if (it->second == "full") base = full();
      else if (it->second != "desk") throw std::invalid_argument("config: preset must be desk or full");
    }
    return from_key_values(kv, base);
  }
};

// Stream keys derived from the master seed.
namespace seeds {
inline constexpr std::uint64_t kLayout = 0x1a, kPopulation = 0x2b, kSample = 0x3c, kPrevFit = 0x4d,
                               kPostFit = 0x4e, kMrp = 0x5f;

inline std::uint64_t derive(std::uint64_t master, std::uint64_t tag, std::uint64_t rep) {
  Rng r = make_stream({master, tag, rep});
  return r();
}
}  // namespace seeds

inline dgp::StrataLayout experiment_layout(const ExperimentConfig& cfg, const dgp::Coefficients& k = {}) {
  Rng rng = make_stream({cfg.seed, seeds::kLayout});
  return dgp::build_strata(k, cfg.scale, rng);
}

// Replication m (1-based) regenerates the students over the fixed layout.
inline dgp::FinitePopulation replication_population(const ExperimentConfig& cfg, const dgp::StrataLayout& layout,
                                                    int m, const dgp::Coefficients& k = {}) {
  Rng rng = make_stream({cfg.seed, seeds::kPopulation, std::uint64_t(m)});
  auto pop = dgp::generate_population(layout, k, rng);
  return dgp::assign_treatment(std::move(pop), rng);
}

inline design::ObservedSample replication_sample(const ExperimentConfig& cfg, const dgp::FinitePopulation& pop,
                                                  int m) {
  return design::draw_sample(pop, cfg.design, seeds::derive(cfg.seed, seeds::kSample, m));
}

// ---------------------------------------------------------------- metrics

struct MseParts {
  double mse = 0.0;
  double bias_sq = 0.0;
  double variance = 0.0;
};

inline MseParts compute_mse(const std::vector<double>& points, double truth) {
  if (points.empty()) throw std::invalid_argument("compute_mse: no points");
  const double n = static_cast<double>(points.size());
  double mean = 0.0;
  for (double p : points) mean += p;
  mean /= n;
  MseParts r;
  for (double p : points) r.variance += (p - mean) * (p - mean);
  r.variance /= n;
  r.bias_sq = (mean - truth) * (mean - truth);
  r.mse = r.bias_sq + r.variance;
  return r;
}

inline double compute_psr(const std::vector<double>& points, const std::vector<double>& ses, double truth) {
  if (points.empty()) throw std::invalid_argument("compute_psr: no points");
  if (ses.size() != points.size()) throw std::invalid_argument("compute_psr: points and ses differ in length");
  double sq = 0.0, logs = 0.0;
  for (std::size_t m = 0; m < points.size(); ++m) {
    if (!(ses[m] > 0.0) || !std::isfinite(ses[m])) throw std::invalid_argument("compute_psr: se must be positive");
    const double z = (truth - points[m]) / ses[m];
    sq += z * z;
    logs += std::log(ses[m] * ses[m]);
  }
  const double n = static_cast<double>(points.size());
  return -sq / n - logs / n;
}

inline double compute_coverage(const std::vector<std::pair<double, double>>& intervals, double truth) {
  if (intervals.empty()) throw std::invalid_argument("compute_coverage: no intervals");
  std::size_t hit = 0;
  for (const auto& [lo, hi] : intervals) {
    if (std::isnan(lo) || std::isnan(hi) || lo > hi) throw std::invalid_argument("compute_coverage: malformed interval");
    if (lo <= truth && truth <= hi) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(intervals.size());
}

struct MetricRow {
  Estimator estimator = Estimator::MRP_MI;
  std::string subpopulation;
  double truth = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
  double mean = 0.0;
  double emp_se = 0.0;  // sd of points over sqrt(used)
  MseParts mse;
  double psr = 0.0;
  double coverage = 0.0;
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  std::size_t failed_replications = 0;

  const MetricRow& at(Estimator e, const std::string& subpop) const {
    for (const auto& r : rows) {
      if (r.estimator == e && r.subpopulation == subpop) return r;
    }
    throw std::out_of_range("no metrics for " + std::string(estimators::estimator_name(e)) + " on '" + subpop + "'");
  }
};

// Groups non-skipped rows by (estimator, subpopulation) in first-seen order.
inline MetricsReport compute_metrics(const std::vector<EstimateResult>& rows, const oracle::TruthTable& truth,
                                     std::size_t failed_replications = 0) {
  std::vector<std::pair<Estimator, std::string>> keys;
  std::map<std::pair<int, std::string>, std::vector<const EstimateResult*>> groups;
  std::map<std::pair<int, std::string>, std::size_t> skips;
  for (const auto& r : rows) {
    const std::pair<int, std::string> key{static_cast<int>(r.estimator), r.subpopulation};
    if (!groups.count(key) && !skips.count(key)) keys.emplace_back(r.estimator, r.subpopulation);
    if (r.skipped) {
      ++skips[key];
      groups[key];
    } else {
      groups[key].push_back(&r);
      skips[key];
    }
  }
  MetricsReport rep;
  rep.failed_replications = failed_replications;
  for (const auto& [e, label] : keys) {
    const std::pair<int, std::string> key{static_cast<int>(e), label};
    MetricRow m;
    m.estimator = e;
    m.subpopulation = label;
    m.truth = truth.at(label);
    m.skipped = skips[key];
    const auto& g = groups[key];
    m.used = g.size();
    if (g.empty()) {
      m.mean = m.emp_se = m.psr = m.coverage = std::numeric_limits<double>::quiet_NaN();
      m.mse = {m.mean, m.mean, m.mean};
    } else {
      std::vector<double> pts, ses;
      std::vector<std::pair<double, double>> iv;
      for (const auto* r : g) {
        pts.push_back(r->point);
        ses.push_back(r->se);
        iv.emplace_back(r->lower95, r->upper95);
      }
      m.mse = compute_mse(pts, m.truth);
      m.mean = 0.0;
      for (double p : pts) m.mean += p;
      m.mean /= static_cast<double>(pts.size());
      m.emp_se = pts.size() > 1
                     ? std::sqrt(m.mse.variance * pts.size() / (pts.size() - 1.0) / static_cast<double>(pts.size()))
                     : std::numeric_limits<double>::quiet_NaN();
      m.psr = compute_psr(pts, ses, m.truth);
      m.coverage = compute_coverage(iv, m.truth);
    }
    rep.rows.push_back(std::move(m));
  }
  return rep;
}

// ---------------------------------------------------------------- CSV I/O

// Percent-escapes the characters that would break a CSV field.
inline std::string escape_field(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '%': out += "%25"; break;
      case ',': out += "%2C"; break;
      case '\n': out += "%0A"; break;
      case '\r': out += "%0D"; break;
      default: out += ch;
    }
  }
  return out;
}

inline std::string unescape_field(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size()) {
      out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
      i += 2;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline constexpr const char* kEstimatesHeader =
    "replication,estimator,subpopulation,point,se,lower95,upper95,n_sample_subset,skipped,seed,note";

inline void write_estimate_row(std::ostream& out, const EstimateResult& r) {
  out << r.replication << ',' << estimators::estimator_name(r.estimator) << ',' << r.subpopulation << ','
      << io::fmt(r.point) << ',' << io::fmt(r.se) << ',' << io::fmt(r.lower95) << ',' << io::fmt(r.upper95) << ','
      << r.n_sample_subset << ',' << (r.skipped ? 1 : 0) << ',' << r.seed << ',' << escape_field(r.note) << '\n';
}

inline std::string emit_estimates(const std::vector<EstimateResult>& rows) {
  std::ostringstream out;
  out << kEstimatesHeader << '\n';
  for (const auto& r : rows) write_estimate_row(out, r);
  return out.str();
}

inline std::vector<EstimateResult> parse_estimates(const std::string& text, const std::string& origin = "<text>") {
  const auto t = io::CsvTable::parse(text, origin);
  std::vector<EstimateResult> rows;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    EstimateResult r;
    r.replication = static_cast<int>(t.integer(i, "replication"));
    r.estimator = estimators::parse_estimator(t.at(i, "estimator"));
    r.subpopulation = t.at(i, "subpopulation");
    r.point = t.num(i, "point");
    r.se = t.num(i, "se");
    r.lower95 = t.num(i, "lower95");
    r.upper95 = t.num(i, "upper95");
    r.n_sample_subset = static_cast<std::size_t>(t.integer(i, "n_sample_subset"));
    r.skipped = t.integer(i, "skipped") != 0;
    r.seed = std::stoull(t.at(i, "seed"));
    r.note = unescape_field(t.at(i, "note"));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<EstimateResult> read_estimates(const std::string& path) {
  return parse_estimates(read_text(path), path);
}

inline std::string emit_metrics(const MetricsReport& rep) {
  std::ostringstream out;
  out << "estimator,subpopulation,truth,replications_used,replications_skipped,mean,empirical_se,mse,bias_sq,"
         "variance,psr,coverage\n";
  for (const auto& m : rep.rows) {
    out << estimators::estimator_name(m.estimator) << ',' << m.subpopulation << ',' << io::fmt(m.truth) << ','
        << m.used << ',' << m.skipped << ',' << io::fmt(m.mean) << ',' << io::fmt(m.emp_se) << ','
        << io::fmt(m.mse.mse) << ',' << io::fmt(m.mse.bias_sq) << ',' << io::fmt(m.mse.variance) << ','
        << io::fmt(m.psr) << ',' << io::fmt(m.coverage) << '\n';
  }
  return out.str();
}

inline MetricsReport parse_metrics(const std::string& text) {
  const auto t = io::CsvTable::parse(text, "metrics");
  MetricsReport rep;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    MetricRow m;
    m.estimator = estimators::parse_estimator(t.at(i, "estimator"));
    m.subpopulation = t.at(i, "subpopulation");
    m.truth = t.num(i, "truth");
    m.used = static_cast<std::size_t>(t.integer(i, "replications_used"));
    m.skipped = static_cast<std::size_t>(t.integer(i, "replications_skipped"));
    m.mean = t.num(i, "mean");
    m.emp_se = t.num(i, "empirical_se");
    m.mse = {t.num(i, "mse"), t.num(i, "bias_sq"), t.num(i, "variance")};
    m.psr = t.num(i, "psr");
    m.coverage = t.num(i, "coverage");
    rep.rows.push_back(std::move(m));
  }
  return rep;
}

// ---------------------------------------------------------------- replications

struct ReplicationRecord {
  int replication = 0;
  std::uint64_t sample_seed = 0;
  bool ok = false;
  std::string error;
  std::size_t n = 0;
  std::size_t schools = 0;
  double response_rate = 0.0;
  double treated_share = 0.0;
  double raking_max_rel_error = std::numeric_limits<double>::quiet_NaN();
  int raking_iterations = 0;
  double prev_max_rhat = std::numeric_limits<double>::quiet_NaN();
  double post_max_rhat = std::numeric_limits<double>::quiet_NaN();
  std::size_t fit_warnings = 0;
  double seconds = 0.0;
};

inline std::string emit_replications(const std::vector<ReplicationRecord>& recs) {
  std::ostringstream out;
  out << "replication,sample_seed,status,n,schools,response_rate,treated_share,raking_max_rel_error,"
         "raking_iterations,prev_max_rhat,post_max_rhat,fit_warnings,seconds,error\n";
  for (const auto& r : recs) {
    out << r.replication << ',' << r.sample_seed << ',' << (r.ok ? "ok" : "failed") << ',' << r.n << ','
        << r.schools << ',' << io::fmt(r.response_rate) << ',' << io::fmt(r.treated_share) << ','
        << io::fmt(r.raking_max_rel_error) << ',' << r.raking_iterations << ',' << io::fmt(r.prev_max_rhat) << ','
        << io::fmt(r.post_max_rhat) << ',' << r.fit_warnings << ',' << io::fmt(r.seconds) << ','
        << escape_field(r.error) << '\n';
  }
  return out.str();
}

struct SchoolCate {
  std::uint32_t school = 0;
  int stratum = 1;
  bool observed = false;
  Estimator estimator = Estimator::MRP_MI;
  double point = 0.0;
  double se = 0.0;
  double lower95 = 0.0;
  double upper95 = 0.0;
  double truth = 0.0;
};

inline std::string emit_school_cates(const std::vector<SchoolCate>& rows) {
  std::ostringstream out;
  out << "school,stratum,MC,SA,observed,estimator,point,se,lower95,upper95,truth\n";
  for (const auto& r : rows) {
    const auto lv = stratum_levels(r.stratum);
    out << r.school << ',' << r.stratum << ',' << composition_name(lv.mc) << ',' << achievement_name(lv.sa) << ','
        << (r.observed ? 1 : 0) << ',' << estimators::estimator_name(r.estimator) << ',' << io::fmt(r.point) << ','
        << io::fmt(r.se) << ',' << io::fmt(r.lower95) << ',' << io::fmt(r.upper95) << ',' << io::fmt(r.truth)
        << '\n';
  }
  return out.str();
}

struct ReplicationOutput {
  ReplicationRecord record;
  std::vector<EstimateResult> estimates;
  std::string diagnostics;
  std::vector<SchoolCate> school_cates;
};

namespace detail {

inline double treated_share(const design::ObservedSample& d) {
  double t = 0.0;
  for (const auto& r : d.rows) t += r.z;
  return d.n() ? t / static_cast<double>(d.n()) : 0.0;
}

// MRP school CATEs from one replication's fits, with truths from `truth`.
inline std::vector<SchoolCate> school_cates_from_fits(const ExperimentConfig& cfg, const dgp::StrataLayout& layout,
                                                      const poststrat::PoststratMatrix& m,
                                                      const bayes::PosteriorDraws& prev,
                                                      const bayes::PosteriorDraws& post,
                                                      const oracle::TruthTable& truth, std::uint64_t mrp_seed) {
  std::vector<poststrat::SubpopIndex> idx;
  std::vector<const dgp::School*> schools;
  for (const auto& s : layout.schools) {
    const auto f = poststrat::CellFilter::for_school(s.id);
    if (!truth.truth.count(f.label)) continue;
    bool any = false;
    for (const auto& cell : m.cells()) {
      if (cell.c.school == s.id) {
        any = true;
        break;
      }
    }
    if (!any) continue;
    idx.push_back(poststrat::subpop_index(m, f));
    schools.push_back(&s);
  }
  estimators::MrpOptions mo;
  mo.seed = mrp_seed;
  mo.exclusive_draws = cfg.exclusive_draws;
  std::vector<SchoolCate> out;
  auto emit = [&](const std::vector<EstimateResult>& rs) {
    for (std::size_t k = 0; k < rs.size(); ++k) {
      SchoolCate c;
      c.school = schools[k]->id;
      c.stratum = schools[k]->stratum;
      c.observed = std::binary_search(prev.schools.begin(), prev.schools.end(), c.school) &&
                   std::binary_search(post.schools.begin(), post.schools.end(), c.school);
      c.estimator = rs[k].estimator;
      c.point = rs[k].point;
      c.se = rs[k].se;
      c.lower95 = rs[k].lower95;
      c.upper95 = rs[k].upper95;
      c.truth = truth.at(rs[k].subpopulation);
      out.push_back(c);
    }
  };
  if (cfg.mrp_mi) emit(estimators::mrp_mi_batch(prev, post, m, idx, mo, false));
  if (cfg.mrp_i) emit(estimators::mrp_i_batch(estimators::impute_vhat(prev, m, mo.seed), post, m, idx, mo, false));
  return out;
}

}  // namespace detail

// Truth of every configured subpopulation on the expected-count matrix of the layout.
inline oracle::TruthTable experiment_truth(const ExperimentConfig& cfg, const dgp::StrataLayout& layout,
                                           bool with_schools, const dgp::Coefficients& k = {}) {
  auto filters = cfg.filters();
  if (with_schools) {
    for (const auto& s : layout.schools) {
      if (s.size > 0) filters.push_back(poststrat::CellFilter::for_school(s.id));
    }
  }
  const auto em = poststrat::build_expected_matrix(layout, k);
  auto t = oracle::compute_truth(filters, em, k, layout, cfg.quad_nodes);
  t.layout_seed = cfg.seed;
  return t;
}

// Replication m end to end: population, sample, fits and every estimate.
inline ReplicationOutput run_replication(const ExperimentConfig& cfg, const dgp::StrataLayout& layout, int m,
                                         const oracle::TruthTable* school_truth = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  ReplicationOutput out;
  auto& rec = out.record;
  rec.replication = m;
  rec.sample_seed = seeds::derive(cfg.seed, seeds::kSample, m);
  try {
    const auto pop = replication_population(cfg, layout, m);
    const auto d = replication_sample(cfg, pop, m);
    rec.n = d.n();
    rec.schools = d.schools.size();
    rec.response_rate = d.response_rate();
    rec.treated_share = detail::treated_share(d);
    if (d.rows.empty()) throw std::runtime_error("sample has no respondents");
    const auto mat = poststrat::build_poststrat_matrix(pop);
    std::optional<bayes::PosteriorDraws> prev, post;
    std::ostringstream diag;
    if (cfg.svy) {
      try {
        const auto rk = freq::rake_weights(d, freq::margins_from_matrix(mat));
        rec.raking_max_rel_error = rk.max_rel_error;
        rec.raking_iterations = rk.iterations;
      } catch (const std::exception& ex) {
        diag << "replication " << m << " raking failed: " << ex.what() << '\n';
      }
    }
    if (cfg.needs_mrp()) {
      prev = bayes::fit(bayes::ModelSpec::prev_gpa(), d, cfg.fit_options(seeds::derive(cfg.seed, seeds::kPrevFit, m)));
      post = bayes::fit(bayes::ModelSpec::post_gpa(), d, cfg.fit_options(seeds::derive(cfg.seed, seeds::kPostFit, m)));
      rec.prev_max_rhat = prev->diagnostics.max_monitored_rhat;
      rec.post_max_rhat = post->diagnostics.max_monitored_rhat;
      rec.fit_warnings = prev->warnings.size() + post->warnings.size();
      bayes::write_diagnostics(*prev, diag, "replication " + std::to_string(m) + " Prev-GPA");
      bayes::write_diagnostics(*post, diag, "replication " + std::to_string(m) + " Post-GPA");
    }
    out.diagnostics = diag.str();
    estimators::EstimateOptions eo;
    eo.ols = cfg.ols;
    eo.svy = cfg.svy;
    eo.mrp_i = cfg.mrp_i;
    eo.mrp_mi = cfg.mrp_mi;
    eo.mrp.seed = seeds::derive(cfg.seed, seeds::kMrp, m);
    eo.mrp.exclusive_draws = cfg.exclusive_draws;
    out.estimates = estimators::estimate_all(d, mat, cfg.filters(), prev ? &*prev : nullptr,
                                             post ? &*post : nullptr, eo);
    for (auto& r : out.estimates) {
      r.replication = m;
      r.seed = rec.sample_seed;
    }
    if (school_truth && prev && post) {
      out.school_cates =
          detail::school_cates_from_fits(cfg, layout, mat, *prev, *post, *school_truth, eo.mrp.seed);
    }
    rec.ok = true;
  } catch (const std::exception& ex) {
    rec.ok = false;
    rec.error = ex.what();
    out.estimates.clear();
    out.school_cates.clear();
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// Per-school estimate/truth pairs from replication cfg.school_cate_replication.
inline std::vector<SchoolCate> school_cates(const ExperimentConfig& cfg) {
  cfg.validate();
  if (!cfg.needs_mrp()) throw std::invalid_argument("school_cates: no MRP estimator enabled");
  const auto layout = experiment_layout(cfg);
  const auto truth = experiment_truth(cfg, layout, true);
  auto out = run_replication(cfg, layout, cfg.school_cate_replication, &truth);
  if (!out.record.ok) throw std::runtime_error("school_cates: replication failed: " + out.record.error);
  return out.school_cates;
}

struct ExperimentResult {
  oracle::TruthTable truth;
  std::vector<EstimateResult> estimates;
  std::vector<ReplicationRecord> replications;
  std::vector<SchoolCate> school_cates;
  MetricsReport metrics;
  std::string diagnostics;
};

using ProgressFn = std::function<void(const ReplicationRecord&)>;

// Fixed layout, M replications in a worker pool, metrics over the successful ones.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  const auto layout = experiment_layout(cfg);
  ExperimentResult res;
  res.truth = experiment_truth(cfg, layout, cfg.school_cates);

  std::vector<ReplicationOutput> outs(static_cast<std::size_t>(cfg.reps));
  std::atomic<int> next{0};
  std::mutex report;
  auto worker = [&] {
    for (int i = next++; i < cfg.reps; i = next++) {
      const int m = i + 1;
      const bool cates = cfg.school_cates && m == cfg.school_cate_replication;
      outs[i] = run_replication(cfg, layout, m, cates ? &res.truth : nullptr);
      if (progress) {
        std::lock_guard lock(report);
        progress(outs[i].record);
      }
    }
  };
  const int workers = std::min(cfg.workers, cfg.reps);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::size_t failed = 0;
  for (auto& o : outs) {
    if (!o.record.ok) ++failed;
    res.replications.push_back(o.record);
    res.estimates.insert(res.estimates.end(), o.estimates.begin(), o.estimates.end());
    res.diagnostics += o.diagnostics;
    if (!o.school_cates.empty()) res.school_cates = std::move(o.school_cates);
  }
  std::ostringstream head;
  head << "replications = " << cfg.reps << "\nfailed_replications = " << failed << '\n';
  for (const auto& r : res.replications) {
    if (!r.ok) head << "failed: replication " << r.replication << " seed " << r.sample_seed << ": " << r.error << '\n';
  }
  res.diagnostics = head.str() + res.diagnostics;
  res.metrics = compute_metrics(res.estimates, res.truth, failed);
  return res;
}

// Truth table restricted to the configured subpopulations (school rows dropped).
inline oracle::TruthTable subpopulation_truth(const oracle::TruthTable& t) {
  oracle::TruthTable out = t;
  for (auto it = out.truth.begin(); it != out.truth.end();) {
    if (it->first.rfind("School=", 0) == 0) {
      out.share.erase(it->first);
      it = out.truth.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

inline void write_outputs(const ExperimentResult& r, const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  const auto dir = std::filesystem::path(cfg.out_dir);
  write_text((dir / "estimates.csv").string(), emit_estimates(r.estimates));
  oracle::write_truth_csv(subpopulation_truth(r.truth), (dir / "truth.csv").string());
  write_text((dir / "metrics.csv").string(), emit_metrics(r.metrics));
  write_text((dir / "replications.csv").string(), emit_replications(r.replications));
  write_text((dir / "school_cates.csv").string(), emit_school_cates(r.school_cates));
  write_text((dir / "diagnostics.txt").string(), r.diagnostics);
  io::write_key_values((dir / "config.txt").string(), cfg.to_key_values());
}

}  // namespace mrpsim::harness
