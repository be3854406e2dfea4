#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mrpsim/covariates.hpp"
#include "mrpsim/io.hpp"

namespace mrpsim::bayes {

enum class Outcome { PrevGpa, PostGpa };

// Fixed-effect terms; the *_Z terms are treatment interactions.
enum class Term { Intercept, ME, G, ME_Z, G_Z };

// Grouping factors carrying random intercepts.
enum class Factor { RE, School, MC, SA, SAMC };

inline std::string_view term_name(Term t) {
  switch (t) {
    case Term::Intercept: return "beta_0";
    case Term::ME: return "beta_ME";
    case Term::G: return "beta_G";
    case Term::ME_Z: return "gamma_ME";
    case Term::G_Z: return "gamma_G";
  }
  return "?";
}

inline std::string_view factor_name(Factor f) {
  switch (f) {
    case Factor::RE: return "RE";
    case Factor::School: return "School";
    case Factor::MC: return "MC";
    case Factor::SA: return "SA";
    case Factor::SAMC: return "SAMC";
  }
  return "?";
}

inline double term_value(Term t, const Covariates& c, int z) {
  switch (t) {
    case Term::Intercept: return 1.0;
    case Term::ME: return c.me;
    case Term::G: return c.g;
    case Term::ME_Z: return c.me * z;
    case Term::G_Z: return c.g * z;
  }
  return 0.0;
}

// Number of schema levels; School levels come from the fitted data instead.
inline int schema_levels(Factor f) {
  switch (f) {
    case Factor::RE: return kNumRace;
    case Factor::MC: return kNumComposition;
    case Factor::SA: return kNumAchievement;
    case Factor::SAMC: return kNumStrata;
    case Factor::School: return 0;
  }
  return 0;
}

inline std::string level_label(Factor f, int level) {
  switch (f) {
    case Factor::RE: return std::string(race_name(level + 1));
    case Factor::MC: return std::string(composition_name(static_cast<MinorityComposition>(level)));
    case Factor::SA: return std::string(achievement_name(static_cast<SchoolAchievement>(level)));
    case Factor::SAMC: return std::to_string(level + 1);
    case Factor::School: return std::to_string(level);
  }
  return {};
}

// Schema level of a non-school factor.
inline int fixed_level(Factor f, const Covariates& c) {
  switch (f) {
    case Factor::RE:
      if (c.re < 1 || c.re > kNumRace) throw std::invalid_argument("race/ethnicity level out of range");
      return c.re - 1;
    case Factor::MC: return static_cast<int>(c.mc());
    case Factor::SA: return static_cast<int>(c.sa());
    case Factor::SAMC:
      if (c.stratum < 1 || c.stratum > kNumStrata) throw std::invalid_argument("stratum out of range");
      return c.stratum - 1;
    case Factor::School: break;
  }
  throw std::logic_error("fixed_level called for School");
}

// Truncated-normal hierarchical regression with random intercepts per factor.
struct ModelSpec {
  Outcome outcome = Outcome::PrevGpa;
  double lo = 0.0;
  double hi = 4.33;
  bool offset_prev_gpa = false;       // Prev-GPA enters with coefficient exactly 1
  std::vector<Term> terms;
  std::vector<Factor> factors;
  bool treatment_intercepts = false;  // per-level gamma on treated units, correlated with alpha
  double beta0_prior_mean = 0.0;
  double beta_prior_sd = 0.25;        // intercept and every other fixed effect
  double scale_prior_sd = 0.25;       // half-normal on factor scales
  double sigma_prior_df = 3.0;        // half-Student-t on the residual sd
  double sigma_prior_scale = 2.5;

  static ModelSpec prev_gpa() {
    ModelSpec s;
    s.outcome = Outcome::PrevGpa;
    s.terms = {Term::Intercept, Term::ME, Term::G};
    s.factors = {Factor::RE, Factor::School, Factor::MC, Factor::SA, Factor::SAMC};
    s.beta0_prior_mean = 2.7;
    s.beta_prior_sd = 0.25;
    s.scale_prior_sd = 0.25;
    return s;
  }

  static ModelSpec post_gpa() {
    ModelSpec s;
    s.outcome = Outcome::PostGpa;
    s.offset_prev_gpa = true;
    s.terms = {Term::Intercept, Term::ME, Term::G, Term::ME_Z, Term::G_Z};
    s.factors = {Factor::RE, Factor::School, Factor::MC, Factor::SA, Factor::SAMC};
    s.treatment_intercepts = true;
    s.beta0_prior_mean = 0.0;
    s.beta_prior_sd = 0.125;
    s.scale_prior_sd = 0.125;
    return s;
  }

  void validate() const {
    if (!(lo < hi)) throw std::invalid_argument("ModelSpec: truncation bounds out of order");
    if (!(beta_prior_sd > 0.0) || !(scale_prior_sd > 0.0) || !(sigma_prior_scale > 0.0) ||
        !(sigma_prior_df > 0.0)) {
      throw std::invalid_argument("ModelSpec: prior scales must be positive");
    }
    if (terms.empty() || terms.front() != Term::Intercept) {
      throw std::invalid_argument("ModelSpec: first term must be the intercept");
    }
  }
};

struct FactorBlock {
  Factor factor = Factor::RE;
  int levels = 0;
  int alpha = -1;        // first alpha parameter
  int gamma = -1;        // first gamma parameter, -1 without treatment intercepts
  int sigma = -1;
  int sigma_gamma = -1;
  int cor = -1;
};

// Position of every named parameter in a draw vector.
struct ParamLayout {
  std::vector<std::string> names;
  int n_terms = 0;
  std::vector<FactorBlock> factors;
  int sigma = -1;

  std::size_t size() const { return names.size(); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    return std::nullopt;
  }

  const FactorBlock* block(Factor f) const {
    for (const auto& b : factors) {
      if (b.factor == f) return &b;
    }
    return nullptr;
  }

  bool is_scale(std::size_t p) const {
    if (static_cast<int>(p) == sigma) return true;
    for (const auto& b : factors) {
      if (static_cast<int>(p) == b.sigma || static_cast<int>(p) == b.sigma_gamma) return true;
    }
    return false;
  }
  bool is_cor(std::size_t p) const {
    for (const auto& b : factors) {
      if (static_cast<int>(p) == b.cor) return true;
    }
    return false;
  }
};

inline ParamLayout make_layout(const ModelSpec& spec, const std::vector<std::uint32_t>& schools) {
  ParamLayout L;
  for (auto t : spec.terms) L.names.emplace_back(term_name(t));
  L.n_terms = static_cast<int>(spec.terms.size());
  for (auto f : spec.factors) {
    FactorBlock b;
    b.factor = f;
    b.levels = f == Factor::School ? static_cast<int>(schools.size()) : schema_levels(f);
    const auto fname = std::string(factor_name(f));
    auto label = [&](int l) {
      return f == Factor::School ? std::to_string(schools[l]) : level_label(f, l);
    };
    b.alpha = static_cast<int>(L.names.size());
    for (int l = 0; l < b.levels; ++l) L.names.push_back("alpha_" + fname + "[" + label(l) + "]");
    if (spec.treatment_intercepts) {
      b.gamma = static_cast<int>(L.names.size());
      for (int l = 0; l < b.levels; ++l) L.names.push_back("gamma_" + fname + "[" + label(l) + "]");
    }
    L.factors.push_back(b);
  }
  for (auto& b : L.factors) {
    const auto fname = std::string(factor_name(b.factor));
    b.sigma = static_cast<int>(L.names.size());
    L.names.push_back("sigma_" + fname);
    if (spec.treatment_intercepts) {
      b.sigma_gamma = static_cast<int>(L.names.size());
      L.names.push_back("sigma_gamma_" + fname);
      b.cor = static_cast<int>(L.names.size());
      L.names.push_back("cor_" + fname);
    }
  }
  L.sigma = static_cast<int>(L.names.size());
  L.names.push_back("sigma");
  return L;
}

struct Diagnostics {
  std::vector<double> rhat;      // NaN when not applicable
  std::vector<double> ess_bulk;  // NaN when not applicable
  bool rhat_available = false;
  double max_monitored_rhat = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> notices;
};

struct PosteriorDraws {
  ModelSpec spec;
  ParamLayout layout;
  std::vector<std::uint32_t> schools;  // observed school ids in level order
  int chains = 0;
  int draws_per_chain = 0;
  std::vector<double> values;          // draw-major: values[j * P + p], chain c owns draws [c*D, (c+1)*D)
  Diagnostics diagnostics;
  std::vector<std::string> warnings;
  std::vector<std::pair<std::string, double>> acceptance;  // post-warmup rate per move kind

  std::size_t n_draws() const { return static_cast<std::size_t>(chains) * draws_per_chain; }
  std::size_t n_params() const { return layout.size(); }

  double operator()(std::size_t j, std::size_t p) const { return values[j * layout.size() + p]; }
  const double* draw(std::size_t j) const { return values.data() + j * layout.size(); }

  double get(std::size_t j, std::string_view name) const {
    const auto p = layout.find(name);
    if (!p) throw std::out_of_range("no parameter '" + std::string(name) + "'");
    return (*this)(j, *p);
  }

  std::vector<double> column(std::size_t p) const {
    std::vector<double> out(n_draws());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = (*this)(j, p);
    return out;
  }

  double mean(std::size_t p) const {
    double s = 0.0;
    for (std::size_t j = 0; j < n_draws(); ++j) s += (*this)(j, p);
    return s / static_cast<double>(n_draws());
  }

  double sd(std::size_t p) const {
    const double m = mean(p);
    double s = 0.0;
    for (std::size_t j = 0; j < n_draws(); ++j) s += ((*this)(j, p) - m) * ((*this)(j, p) - m);
    return std::sqrt(s / static_cast<double>(n_draws() - 1));
  }

  // Level of a school in the fit, or -1 for a school absent from the data.
  int school_level(std::uint32_t id) const {
    const auto it = std::lower_bound(schools.begin(), schools.end(), id);
    if (it == schools.end() || *it != id) return -1;
    return static_cast<int>(it - schools.begin());
  }

  bool converged() const { return warnings.empty(); }

  // S identical copies of one parameter vector.
  static PosteriorDraws point_mass(const ModelSpec& spec, std::vector<std::uint32_t> schools,
                                   const std::vector<double>& params, int n_draws) {
    PosteriorDraws d;
    d.spec = spec;
    std::sort(schools.begin(), schools.end());
    d.schools = std::move(schools);
    d.layout = make_layout(spec, d.schools);
    if (params.size() != d.layout.size()) throw std::invalid_argument("point_mass: parameter count mismatch");
    d.chains = 1;
    d.draws_per_chain = n_draws;
    d.values.reserve(params.size() * n_draws);
    for (int j = 0; j < n_draws; ++j) d.values.insert(d.values.end(), params.begin(), params.end());
    return d;
  }
};

inline void write_draws_csv(const PosteriorDraws& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "draw,parameter,value\n";
  for (std::size_t j = 0; j < d.n_draws(); ++j) {
    for (std::size_t p = 0; p < d.n_params(); ++p) {
      out << j << ',' << d.layout.names[p] << ',' << io::fmt(d(j, p)) << '\n';
    }
  }
}

inline void write_diagnostics(const PosteriorDraws& d, std::ostream& out, const std::string& title) {
  out << "[" << title << "]\n";
  out << "draws = " << d.n_draws() << " (" << d.chains << " chains x " << d.draws_per_chain << ")\n";
  out << "max_monitored_rhat = "
      << (std::isnan(d.diagnostics.max_monitored_rhat) ? std::string("n/a") : io::fmt(d.diagnostics.max_monitored_rhat))
      << '\n';
  for (const auto& n : d.diagnostics.notices) out << "notice: " << n << '\n';
  for (const auto& w : d.warnings) out << "warning: " << w << '\n';
  for (const auto& [kind, rate] : d.acceptance) out << "acceptance_" << kind << " = " << io::fmt(rate) << '\n';
  out << "parameter,mean,sd,rhat,ess_bulk\n";
  for (std::size_t p = 0; p < d.n_params(); ++p) {
    const double r = p < d.diagnostics.rhat.size() ? d.diagnostics.rhat[p] : std::nan("");
    const double e = p < d.diagnostics.ess_bulk.size() ? d.diagnostics.ess_bulk[p] : std::nan("");
    out << d.layout.names[p] << ',' << io::fmt(d.mean(p)) << ',' << io::fmt(d.sd(p)) << ','
        << (std::isnan(r) ? std::string("n/a") : io::fmt(r)) << ','
        << (std::isnan(e) ? std::string("n/a") : io::fmt(e)) << '\n';
  }
}

}  // namespace mrpsim::bayes
