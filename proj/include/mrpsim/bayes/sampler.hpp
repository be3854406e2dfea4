#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "mrpsim/bayes/diagnostics.hpp"
#include "mrpsim/bayes/model.hpp"
#include "mrpsim/bayes/predict.hpp"
#include "mrpsim/design.hpp"
#include "mrpsim/math/rng.hpp"
#include "mrpsim/math/truncnorm.hpp"

namespace mrpsim::bayes {

struct FitOptions {
  int chains = 4;
  int warmup = 500;
  int draws = 250;          // kept draws per chain
  std::uint64_t seed = 1;
  int threads = 1;
  int prior_rounds = 40;    // rounds of likelihood-free scale and translation moves per iteration
  int fixed_rounds = 3;     // fixed-effect block updates per iteration
  bool noncentered_scales = true;
  double rhat_threshold = 1.05;

  void validate() const {
    if (chains < 1) throw std::invalid_argument("FitOptions: at least one chain required");
    if (draws < 1) throw std::invalid_argument("FitOptions: at least one draw required");
    if (warmup < 0) throw std::invalid_argument("FitOptions: warmup must be non-negative");
    if (fixed_rounds < 1) throw std::invalid_argument("FitOptions: fixed_rounds must be positive");
  }
};

namespace detail {

// Sufficient statistics of rows sharing a linear predictor. Rows with their own
// offset stay single units.
struct Units {
  int n_terms = 0;
  int n_factors = 0;
  std::vector<double> count, ybar, ss, offset;
  std::vector<std::uint8_t> z;
  std::vector<double> x;    // unit-major, n_terms per unit
  std::vector<int> level;   // unit-major, n_factors per unit
  std::vector<std::uint32_t> treated;
  double total = 0.0;

  std::size_t size() const { return count.size(); }
};

inline int factor_level(Factor f, const Covariates& c, const std::vector<std::uint32_t>& schools) {
  if (f != Factor::School) return fixed_level(f, c);
  const auto it = std::lower_bound(schools.begin(), schools.end(), c.school);
  if (it == schools.end() || *it != c.school) throw std::logic_error("school missing from level map");
  return static_cast<int>(it - schools.begin());
}

inline Units build_units(const ModelSpec& spec, const design::ObservedSample& d,
                         const std::vector<std::uint32_t>& schools) {
  struct Row {
    std::vector<int> key;
    double offset;
    double y;
    std::uint8_t z;
    Covariates c;
  };
  const bool uses_z = spec.treatment_intercepts ||
                      std::any_of(spec.terms.begin(), spec.terms.end(),
                                  [](Term t) { return t == Term::ME_Z || t == Term::G_Z; });
  std::vector<Row> rows;
  rows.reserve(d.rows.size());
  for (const auto& r : d.rows) {
    Row row;
    for (auto f : spec.factors) row.key.push_back(factor_level(f, r.c, schools));
    row.key.push_back(r.c.me);
    row.key.push_back(r.c.g);
    row.z = uses_z ? r.z : 0;
    row.key.push_back(row.z);
    row.offset = spec.offset_prev_gpa ? r.v : 0.0;
    row.y = spec.outcome == Outcome::PrevGpa ? r.v : r.y;
    if (!(row.y > spec.lo && row.y < spec.hi)) {
      throw std::invalid_argument("outcome " + std::to_string(row.y) + " outside the truncation range");
    }
    row.c = r.c;
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return std::tie(a.key, a.offset, a.y) < std::tie(b.key, b.offset, b.y);
  });

  Units u;
  u.n_terms = static_cast<int>(spec.terms.size());
  u.n_factors = static_cast<int>(spec.factors.size());
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t k = i + 1;
    if (!spec.offset_prev_gpa) {
      while (k < rows.size() && rows[k].key == rows[i].key) ++k;
    }
    double sum = 0.0;
    for (std::size_t q = i; q < k; ++q) sum += rows[q].y;
    const double n = static_cast<double>(k - i);
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t q = i; q < k; ++q) ss += (rows[q].y - mean) * (rows[q].y - mean);
    const auto& r = rows[i];
    if (r.z) u.treated.push_back(static_cast<std::uint32_t>(u.size()));
    u.count.push_back(n);
    u.ybar.push_back(mean);
    u.ss.push_back(ss);
    u.offset.push_back(r.offset);
    u.z.push_back(r.z);
    for (auto t : spec.terms) u.x.push_back(term_value(t, r.c, r.z));
    for (int f = 0; f < u.n_factors; ++f) u.level.push_back(r.key[f]);
    u.total += n;
    i = k;
  }
  return u;
}

// Parameter shift leaving every linear predictor unchanged.
struct Move {
  std::vector<int> params;
  std::vector<double> coef;
};

inline std::vector<Move> translation_moves(const ModelSpec& spec, const ParamLayout& L, const Units& u) {
  std::vector<Move> moves;
  const int F = u.n_factors;
  auto add_global = [&](int first, int levels, double sign, Move& m) {
    for (int j = 0; j < levels; ++j) {
      m.params.push_back(first + j);
      m.coef.push_back(sign);
    }
  };
  for (int f = 0; f < F; ++f) {
    Move m{{0}, {1.0}};
    add_global(L.factors[f].alpha, L.factors[f].levels, -1.0, m);
    moves.push_back(std::move(m));
  }
  if (spec.treatment_intercepts) {
    for (int f = 0; f + 1 < F; ++f) {
      Move m;
      add_global(L.factors[f].gamma, L.factors[f].levels, 1.0, m);
      add_global(L.factors[f + 1].gamma, L.factors[f + 1].levels, -1.0, m);
      moves.push_back(std::move(m));
    }
  }
  // Exclusive pairs: a parent level whose observed child levels occur with no other parent level.
  for (int p = 0; p < F; ++p) {
    for (int c = 0; c < F; ++c) {
      if (p == c) continue;
      std::map<int, std::set<int>> kids, parents;
      for (std::size_t i = 0; i < u.size(); ++i) {
        const int cl = u.level[i * F + c];
        const int pl = u.level[i * F + p];
        kids[pl].insert(cl);
        parents[cl].insert(pl);
      }
      for (const auto& [pl, ks] : kids) {
        bool exclusive = true;
        for (int k : ks) exclusive = exclusive && parents[k].size() == 1;
        if (!exclusive) continue;
        // A one-to-one pair is found from both sides; keep one.
        if (ks.size() == 1 && p > c) continue;
        for (int pass = 0; pass < (spec.treatment_intercepts ? 2 : 1); ++pass) {
          const int pfirst = pass == 0 ? L.factors[p].alpha : L.factors[p].gamma;
          const int cfirst = pass == 0 ? L.factors[c].alpha : L.factors[c].gamma;
          Move m{{pfirst + pl}, {1.0}};
          for (int k : ks) {
            m.params.push_back(cfirst + k);
            m.coef.push_back(-1.0);
          }
          moves.push_back(std::move(m));
        }
      }
    }
  }
  return moves;
}

inline constexpr int kMoveKinds = 5;
inline constexpr std::array<const char*, kMoveKinds> kMoveLabels{"fixed_effects", "levels", "scales_centered",
                                                                 "scales_noncentered", "sigma"};

// Adaptive Metropolis-within-Gibbs for one chain.
class ChainSampler {
 public:
  ChainSampler(const ModelSpec& spec, const ParamLayout& L, const Units& u, const std::vector<Move>& moves,
               const FitOptions& opt, Rng rng)
      : spec_(spec), L_(L), u_(u), moves_(moves), opt_(opt), rng_(std::move(rng)) {
    const std::size_t P = L_.size();
    th_.assign(P, 0.0);
    step_.assign(P, 0.05);
    nc_step_.assign(3 * L_.factors.size(), 0.1);
    mu_.assign(u_.size(), 0.0);
    ll_.assign(u_.size(), 0.0);
    tmp_.assign(u_.size(), 0.0);
    dmu_.assign(u_.size(), 0.0);
    initialize();
    fixed_proposal();
  }

  // Post-warmup acceptance rate per move kind.
  std::array<double, kMoveKinds> acceptance() const {
    std::array<double, kMoveKinds> r{};
    for (int k = 0; k < kMoveKinds; ++k) r[k] = tries_[k] > 0 ? accepted_[k] / tries_[k] : std::nan("");
    return r;
  }

  // Runs warmup then keeps `draws` parameter vectors appended to `out`.
  void run(std::vector<double>& out) {
    const int total = opt_.warmup + opt_.draws;
    for (int it = 0; it < total; ++it) {
      adapting_ = it < opt_.warmup;
      eta_ = 1.0 / std::pow(static_cast<double>(it) + 2.0, 0.6);
      sweep();
      if (adapting_ && opt_.warmup >= 10 && (it + 1) % (opt_.warmup / 5) == 0 && it + 1 < opt_.warmup) {
        fixed_proposal();
      }
      if (!adapting_) out.insert(out.end(), th_.begin(), th_.end());
    }
  }

 private:
  const ModelSpec& spec_;
  const ParamLayout& L_;
  const Units& u_;
  const std::vector<Move>& moves_;
  const FitOptions& opt_;
  Rng rng_;
  std::vector<double> th_, step_, nc_step_, mu_, ll_, tmp_, dmu_;
  Eigen::MatrixXd chol_;
  Eigen::MatrixXd joint_chol_;    // fixed effects then levels, in collapse_ row order
  Eigen::MatrixXd collapse_;      // level shift per unit fixed-effect shift
  std::vector<int> random_;       // parameter index of each collapse_ row
  double block_scale_ = 1.0;
  double joint_scale_ = 1.0;
  bool adapting_ = true;
  std::array<double, kMoveKinds> tries_{}, accepted_{};
  double eta_ = 1.0;

  double normal() { return draw_normal(rng_); }
  bool accept(double log_ratio) { return log_ratio >= 0.0 || std::log(uniform_open01(rng_)) < log_ratio; }

  void adapt(double& step, bool accepted, double target, int kind) {
    if (!adapting_) {
      ++tries_[kind];
      accepted_[kind] += accepted;
      return;
    }
    step *= std::exp(eta_ * ((accepted ? 1.0 : 0.0) - target));
    step = std::clamp(step, 1e-6, 10.0);
  }

  double sigma() const { return th_[L_.sigma]; }

  // Unit log-likelihood up to a constant.
  double unit_ll(std::size_t i, double m, double s, double log_s) const {
    const double n = u_.count[i];
    const double log_z = math::log_normal_interval((spec_.lo - m) / s, (spec_.hi - m) / s);
    const double dev = u_.ybar[i] - m;
    return -n * (log_s + log_z) - (u_.ss[i] + n * dev * dev) / (2.0 * s * s);
  }

  double compute_mu(std::size_t i) const {
    double m = u_.offset[i];
    const double* x = &u_.x[i * u_.n_terms];
    for (int k = 0; k < u_.n_terms; ++k) m += x[k] * th_[k];
    const int* lv = &u_.level[i * u_.n_factors];
    for (int f = 0; f < u_.n_factors; ++f) {
      const auto& b = L_.factors[f];
      m += th_[b.alpha + lv[f]];
      if (b.gamma >= 0 && u_.z[i]) m += th_[b.gamma + lv[f]];
    }
    return m;
  }

  void refresh() {
    const double s = sigma(), ls = std::log(s);
    for (std::size_t i = 0; i < u_.size(); ++i) {
      mu_[i] = compute_mu(i);
      ll_[i] = unit_ll(i, mu_[i], s, ls);
    }
  }

  // Gaussian approximation of the location posterior at the current state.
  // Fixed effects are proposed from their marginal covariance and the levels
  // follow along their conditional regression on the fixed effects.
  void fixed_proposal() {
    const int d = L_.n_terms;
    random_.clear();
    std::vector<int> pos(L_.size(), -1);
    for (const auto& b : L_.factors) {
      for (int j = 0; j < b.levels; ++j) {
        pos[b.alpha + j] = d + static_cast<int>(random_.size());
        random_.push_back(b.alpha + j);
      }
      if (b.gamma < 0) continue;
      for (int j = 0; j < b.levels; ++j) {
        pos[b.gamma + j] = d + static_cast<int>(random_.size());
        random_.push_back(b.gamma + j);
      }
    }
    const int n = d + static_cast<int>(random_.size());
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
    for (int k = 0; k < d; ++k) h(k, k) = 1.0 / (spec_.beta_prior_sd * spec_.beta_prior_sd);
    for (const auto& b : L_.factors) {
      for (int j = 0; j < b.levels; ++j) {
        h(pos[b.alpha + j], pos[b.alpha + j]) = 1.0 / (th_[b.sigma] * th_[b.sigma]);
        if (b.gamma >= 0) h(pos[b.gamma + j], pos[b.gamma + j]) = 1.0 / (th_[b.sigma_gamma] * th_[b.sigma_gamma]);
      }
    }
    const double s2 = sigma() * sigma();
    const int F = u_.n_factors;
    std::vector<std::pair<int, double>> active;
    for (std::size_t i = 0; i < u_.size(); ++i) {
      active.clear();
      for (int k = 0; k < d; ++k) {
        if (u_.x[i * d + k] != 0.0) active.emplace_back(k, u_.x[i * d + k]);
      }
      for (int f = 0; f < F; ++f) {
        const auto& b = L_.factors[f];
        const int l = u_.level[i * F + f];
        active.emplace_back(pos[b.alpha + l], 1.0);
        if (b.gamma >= 0 && u_.z[i]) active.emplace_back(pos[b.gamma + l], 1.0);
      }
      const double w = u_.count[i] / s2;
      for (const auto& [r, xr] : active) {
        for (const auto& [c, xc] : active) h(r, c) += w * xr * xc;
      }
    }
    const int m = n - d;
    Eigen::MatrixXd marginal_precision = h.topLeftCorner(d, d);
    if (m > 0) {
      const Eigen::LDLT<Eigen::MatrixXd> hrr(h.bottomRightCorner(m, m));
      collapse_ = -hrr.solve(h.bottomLeftCorner(m, d));
      marginal_precision += h.topRightCorner(d, m) * collapse_;
    }
    const Eigen::MatrixXd cov = marginal_precision.ldlt().solve(Eigen::MatrixXd::Identity(d, d));
    chol_ = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
    block_scale_ = 2.38 / std::sqrt(static_cast<double>(d));
    if (m > 0) {
      const Eigen::MatrixXd joint_cov = h.ldlt().solve(Eigen::MatrixXd::Identity(n, n));
      joint_chol_ = Eigen::LLT<Eigen::MatrixXd>(joint_cov).matrixL();
      joint_scale_ = 2.38 / std::sqrt(static_cast<double>(n));
    }
  }

  void initialize() {
    double sum = 0.0, sumsq = 0.0;
    for (std::size_t i = 0; i < u_.size(); ++i) {
      const double r = u_.ybar[i] - u_.offset[i];
      sum += u_.count[i] * r;
      sumsq += u_.count[i] * r * r + u_.ss[i];
    }
    const bool has_data = u_.total > 1.0;
    const double mean = has_data ? sum / u_.total : spec_.beta0_prior_mean;
    const double sd = has_data ? std::sqrt(std::max(sumsq / u_.total - mean * mean, 1e-4)) : 1.0;
    th_[0] = mean + normal() * (has_data ? 0.02 : spec_.beta_prior_sd);
    for (int k = 1; k < L_.n_terms; ++k) th_[k] = 0.02 * normal();
    for (const auto& b : L_.factors) {
      th_[b.sigma] = 0.1 * std::exp(0.3 * normal());
      for (int j = 0; j < b.levels; ++j) th_[b.alpha + j] = 0.01 * normal();
      if (b.gamma >= 0) {
        th_[b.sigma_gamma] = 0.05 * std::exp(0.3 * normal());
        th_[b.cor] = 0.6 * uniform_open01(rng_) - 0.3;
        for (int j = 0; j < b.levels; ++j) th_[b.gamma + j] = 0.01 * normal();
        step_[b.cor] = 0.3;
      }
      step_[b.sigma] = 0.3;
      if (b.sigma_gamma >= 0) step_[b.sigma_gamma] = 0.3;
    }
    th_[L_.sigma] = sd * std::exp(0.1 * normal());
    step_[L_.sigma] = 0.02;
    refresh();
  }

  // Prior kernel of one level's (alpha, gamma) given the factor scales.
  double level_prior(const FactorBlock& b, double a, double g) const {
    const double sa = th_[b.sigma];
    if (b.gamma < 0) return -0.5 * (a / sa) * (a / sa);
    const double sg = th_[b.sigma_gamma], r = th_[b.cor];
    const double x = a / sa, y = g / sg;
    return -(x * x - 2.0 * r * x * y + y * y) / (2.0 * (1.0 - r * r));
  }

  double fixed_prior(int k, double v) const {
    const double m = k == 0 ? spec_.beta0_prior_mean : 0.0;
    const double z = (v - m) / spec_.beta_prior_sd;
    return -0.5 * z * z;
  }

  double location_prior() const {
    double lp = 0.0;
    for (int k = 0; k < L_.n_terms; ++k) lp += fixed_prior(k, th_[k]);
    for (const auto& b : L_.factors) {
      for (int j = 0; j < b.levels; ++j) lp += level_prior(b, th_[b.alpha + j], b.gamma >= 0 ? th_[b.gamma + j] : 0.0);
    }
    return lp;
  }

  double half_normal(double s) const { return -0.5 * (s / spec_.scale_prior_sd) * (s / spec_.scale_prior_sd); }

  double half_t(double s) const {
    const double nu = spec_.sigma_prior_df, z = s / spec_.sigma_prior_scale;
    return -0.5 * (nu + 1.0) * std::log1p(z * z / nu);
  }

  // Sum of level prior log densities including the normalizer that depends on the scales.
  double block_prior(const FactorBlock& b) const {
    double lp = 0.0;
    for (int j = 0; j < b.levels; ++j) lp += level_prior(b, th_[b.alpha + j], b.gamma >= 0 ? th_[b.gamma + j] : 0.0);
    double norm = std::log(th_[b.sigma]);
    if (b.gamma >= 0) norm += std::log(th_[b.sigma_gamma]) + 0.5 * std::log1p(-th_[b.cor] * th_[b.cor]);
    return lp - b.levels * norm;
  }

  void sweep() {
    for (int r = 0; r < opt_.fixed_rounds; ++r) update_fixed();
    update_joint();
    for (std::size_t f = 0; f < L_.factors.size(); ++f) {
      update_levels(f, false);
      if (L_.factors[f].gamma >= 0) update_levels(f, true);
    }
    if (opt_.noncentered_scales) {
      for (std::size_t f = 0; f < L_.factors.size(); ++f) {
        update_scale_noncentered(f, false);
        if (L_.factors[f].gamma >= 0) {
          update_scale_noncentered(f, true);
          update_cor_noncentered(f);
        }
      }
    }
    for (int r = 0; r < opt_.prior_rounds; ++r) {
      for (const auto& b : L_.factors) update_scales_centered(b);
      for (const auto& m : moves_) translate(m);
    }
    refresh();
    update_sigma();
  }

  // Fixed effects move by `delta` and every level by `collapse_ * delta`.
  bool try_fixed(const Eigen::VectorXd& delta) {
    const int d = L_.n_terms;
    std::vector<double> step(L_.size(), 0.0);
    for (int k = 0; k < d; ++k) step[k] = delta[k];
    if (collapse_.size() > 0) {
      const Eigen::VectorXd dr = collapse_ * delta;
      for (std::size_t r = 0; r < random_.size(); ++r) step[random_[r]] = dr[static_cast<Eigen::Index>(r)];
    }
    return try_location(step);
  }

  // Metropolis step on the location parameters (fixed effects and levels).
  bool try_location(const std::vector<double>& step) {
    const int d = L_.n_terms;
    const double s = sigma(), ls = std::log(s);
    const int F = u_.n_factors;
    double diff = 0.0;
    for (std::size_t i = 0; i < u_.size(); ++i) {
      const double* x = &u_.x[i * d];
      double dm = 0.0;
      for (int k = 0; k < d; ++k) dm += x[k] * step[k];
      const int* lv = &u_.level[i * F];
      for (int f = 0; f < F; ++f) {
        const auto& b = L_.factors[f];
        dm += step[b.alpha + lv[f]];
        if (b.gamma >= 0 && u_.z[i]) dm += step[b.gamma + lv[f]];
      }
      dmu_[i] = dm;
      tmp_[i] = unit_ll(i, mu_[i] + dm, s, ls);
      diff += tmp_[i] - ll_[i];
    }
    for (int k = 0; k < d; ++k) diff += fixed_prior(k, th_[k] + step[k]) - fixed_prior(k, th_[k]);
    for (const auto& b : L_.factors) {
      for (int j = 0; j < b.levels; ++j) {
        const double a = th_[b.alpha + j];
        const double g = b.gamma >= 0 ? th_[b.gamma + j] : 0.0;
        const double da = step[b.alpha + j];
        const double dg = b.gamma >= 0 ? step[b.gamma + j] : 0.0;
        diff += level_prior(b, a + da, g + dg) - level_prior(b, a, g);
      }
    }
    const bool ok = accept(diff);
    if (ok) {
      for (std::size_t p = 0; p < step.size(); ++p) th_[p] += step[p];
      for (std::size_t i = 0; i < u_.size(); ++i) {
        mu_[i] += dmu_[i];
        ll_[i] = tmp_[i];
      }
    }
    return ok;
  }

  // All location parameters at once from the Gaussian approximation's covariance.
  void update_joint() {
    if (joint_chol_.size() == 0) return;
    const int d = L_.n_terms;
    const auto n = joint_chol_.rows();
    Eigen::VectorXd xi(n);
    for (Eigen::Index k = 0; k < n; ++k) xi[k] = normal();
    const Eigen::VectorXd delta = joint_scale_ * (joint_chol_ * xi);
    std::vector<double> step(L_.size(), 0.0);
    for (int k = 0; k < d; ++k) step[k] = delta[k];
    for (std::size_t r = 0; r < random_.size(); ++r) step[random_[r]] = delta[d + static_cast<Eigen::Index>(r)];
    adapt(joint_scale_, try_location(step), 0.234, 0);
  }

  void update_fixed() {
    const int d = L_.n_terms;
    Eigen::VectorXd xi(d);
    for (int k = 0; k < d; ++k) xi[k] = normal();
    const Eigen::VectorXd delta = block_scale_ * (chol_ * xi);
    adapt(block_scale_, try_fixed(delta), d == 1 ? 0.44 : 0.234, 0);
  }

  void update_levels(std::size_t f, bool gamma) {
    const auto& b = L_.factors[f];
    const int first = gamma ? b.gamma : b.alpha;
    const int F = u_.n_factors;
    std::vector<double> delta(b.levels), dll(b.levels, 0.0);
    std::vector<char> ok(b.levels, 0);
    for (int j = 0; j < b.levels; ++j) delta[j] = step_[first + j] * normal();
    const double s = sigma(), ls = std::log(s);
    auto visit = [&](std::size_t i) {
      const int l = u_.level[i * F + f];
      tmp_[i] = unit_ll(i, mu_[i] + delta[l], s, ls);
      dll[l] += tmp_[i] - ll_[i];
    };
    if (gamma) {
      for (auto i : u_.treated) visit(i);
    } else {
      for (std::size_t i = 0; i < u_.size(); ++i) visit(i);
    }
    for (int j = 0; j < b.levels; ++j) {
      const double a = th_[b.alpha + j];
      const double g = b.gamma >= 0 ? th_[b.gamma + j] : 0.0;
      const double before = level_prior(b, a, g);
      const double after = gamma ? level_prior(b, a, g + delta[j]) : level_prior(b, a + delta[j], g);
      ok[j] = accept(dll[j] + after - before);
      if (ok[j]) th_[first + j] += delta[j];
      adapt(step_[first + j], ok[j], 0.44, 1);
    }
    auto commit = [&](std::size_t i) {
      const int l = u_.level[i * F + f];
      if (!ok[l]) return;
      mu_[i] += delta[l];
      ll_[i] = tmp_[i];
    };
    if (gamma) {
      for (auto i : u_.treated) commit(i);
    } else {
      for (std::size_t i = 0; i < u_.size(); ++i) commit(i);
    }
  }

  // Random-walk updates of the factor scales and correlation given the levels.
  void update_scales_centered(const FactorBlock& b) {
    std::vector<int> targets{b.sigma};
    if (b.sigma_gamma >= 0) targets.push_back(b.sigma_gamma);
    for (int p : targets) {
      const double old = th_[p];
      const double before = block_prior(b) + half_normal(old) + std::log(old);
      th_[p] = old * std::exp(step_[p] * normal());
      const double after = block_prior(b) + half_normal(th_[p]) + std::log(th_[p]);
      const bool ok = accept(after - before);
      if (!ok) th_[p] = old;
      adapt(step_[p], ok, 0.44, 2);
    }
    if (b.cor >= 0) {
      const double old = th_[b.cor];
      const double before = block_prior(b) + std::log1p(-old * old);
      const double proposed = std::tanh(std::atanh(old) + step_[b.cor] * normal());
      if (std::abs(proposed) >= 1.0) return;
      th_[b.cor] = proposed;
      const double after = block_prior(b) + std::log1p(-proposed * proposed);
      const bool ok = accept(after - before);
      if (!ok) th_[b.cor] = old;
      adapt(step_[b.cor], ok, 0.44, 2);
    }
  }

  // Rescales a factor's levels together with its scale (standardized levels held fixed).
  void update_scale_noncentered(std::size_t f, bool gamma) {
    const auto& b = L_.factors[f];
    const int sp = gamma ? b.sigma_gamma : b.sigma;
    const int first = gamma ? b.gamma : b.alpha;
    double& step = nc_step_[3 * f + (gamma ? 1 : 0)];
    const double eps = step * normal();
    const double ratio = std::exp(eps);
    const double s = sigma(), ls = std::log(s);
    const int F = u_.n_factors;
    double diff = 0.0;
    auto visit = [&](std::size_t i) {
      const double a = th_[first + u_.level[i * F + f]];
      dmu_[i] = a * (ratio - 1.0);
      tmp_[i] = unit_ll(i, mu_[i] + dmu_[i], s, ls);
      diff += tmp_[i] - ll_[i];
    };
    if (gamma) {
      for (auto i : u_.treated) visit(i);
    } else {
      for (std::size_t i = 0; i < u_.size(); ++i) visit(i);
    }
    const double old = th_[sp];
    diff += half_normal(old * ratio) - half_normal(old) + eps;
    const bool ok = accept(diff);
    if (ok) {
      th_[sp] = old * ratio;
      for (int j = 0; j < b.levels; ++j) th_[first + j] *= ratio;
      auto commit = [&](std::size_t i) {
        mu_[i] += dmu_[i];
        ll_[i] = tmp_[i];
      };
      if (gamma) {
        for (auto i : u_.treated) commit(i);
      } else {
        for (std::size_t i = 0; i < u_.size(); ++i) commit(i);
      }
    }
    adapt(step, ok, 0.44, 3);
  }

  // Changes the correlation with the standardized (alpha, gamma) pairs held
  // fixed, so only the gamma levels move.
  void update_cor_noncentered(std::size_t f) {
    const auto& b = L_.factors[f];
    double& step = nc_step_[3 * f + 2];
    const double sa = th_[b.sigma], sg = th_[b.sigma_gamma], r = th_[b.cor];
    const double proposed = std::tanh(std::atanh(r) + step * normal());
    if (std::abs(proposed) >= 1.0) return;
    const double root = std::sqrt(1.0 - r * r), root_new = std::sqrt(1.0 - proposed * proposed);
    std::vector<double> delta(b.levels);
    for (int j = 0; j < b.levels; ++j) {
      const double ea = th_[b.alpha + j] / sa;
      const double eb = (th_[b.gamma + j] / sg - r * ea) / root;
      delta[j] = sg * (proposed * ea + root_new * eb) - th_[b.gamma + j];
    }
    const double s = sigma(), ls = std::log(s);
    const int F = u_.n_factors;
    double diff = 0.0;
    for (auto i : u_.treated) {
      dmu_[i] = delta[u_.level[i * F + f]];
      tmp_[i] = unit_ll(i, mu_[i] + dmu_[i], s, ls);
      diff += tmp_[i] - ll_[i];
    }
    diff += std::log1p(-proposed * proposed) - std::log1p(-r * r);
    const bool ok = accept(diff);
    if (ok) {
      th_[b.cor] = proposed;
      for (int j = 0; j < b.levels; ++j) th_[b.gamma + j] += delta[j];
      for (auto i : u_.treated) {
        mu_[i] += dmu_[i];
        ll_[i] = tmp_[i];
      }
    }
    adapt(step, ok, 0.44, 3);
  }

  // Exact Gibbs draw along a likelihood-invariant direction; the log prior is
  // quadratic in the shift.
  void translate(const Move& m) {
    auto shifted = [&](double c) {
      for (std::size_t q = 0; q < m.params.size(); ++q) th_[m.params[q]] += c * m.coef[q];
      const double lp = location_prior();
      for (std::size_t q = 0; q < m.params.size(); ++q) th_[m.params[q]] -= c * m.coef[q];
      return lp;
    };
    const double h = 0.1;
    const double f0 = location_prior(), fp = shifted(h), fm = shifted(-h);
    const double curv = (fp + fm - 2.0 * f0) / (2.0 * h * h);
    if (!(curv < 0.0)) return;
    const double slope = (fp - fm) / (2.0 * h);
    const double c = -slope / (2.0 * curv) + normal() / std::sqrt(-2.0 * curv);
    for (std::size_t q = 0; q < m.params.size(); ++q) th_[m.params[q]] += c * m.coef[q];
  }

  void update_sigma() {
    const double old = sigma();
    const double prop = old * std::exp(step_[L_.sigma] * normal());
    const double lp = std::log(prop);
    double diff = 0.0;
    for (std::size_t i = 0; i < u_.size(); ++i) {
      tmp_[i] = unit_ll(i, mu_[i], prop, lp);
      diff += tmp_[i] - ll_[i];
    }
    diff += half_t(prop) - half_t(old) + lp - std::log(old);
    const bool ok = accept(diff);
    if (ok) {
      th_[L_.sigma] = prop;
      ll_.swap(tmp_);
    }
    adapt(step_[L_.sigma], ok, 0.44, 4);
  }
};

}  // namespace detail

inline std::vector<std::uint32_t> fitted_schools(const design::ObservedSample& d) {
  std::vector<std::uint32_t> s = d.schools;
  for (const auto& r : d.rows) s.push_back(r.c.school);
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

inline void compute_diagnostics(PosteriorDraws& d, double threshold) {
  const std::size_t P = d.n_params(), D = d.draws_per_chain;
  d.diagnostics = {};
  d.diagnostics.rhat.assign(P, detail::kNaN);
  d.diagnostics.ess_bulk.assign(P, detail::kNaN);
  d.diagnostics.rhat_available = d.chains >= 2;
  if (!d.diagnostics.rhat_available) d.diagnostics.notices.push_back("R-hat needs at least two chains; omitted");
  std::vector<std::string> flagged;
  double worst = detail::kNaN;
  for (std::size_t p = 0; p < P; ++p) {
    ChainSet chains(d.chains, std::vector<double>(D));
    for (int c = 0; c < d.chains; ++c) {
      for (std::size_t k = 0; k < D; ++k) chains[c][k] = d(c * D + k, p);
    }
    d.diagnostics.ess_bulk[p] = ess_bulk(chains);
    if (!d.diagnostics.rhat_available) continue;
    const double r = split_rhat(chains);
    d.diagnostics.rhat[p] = r;
    const bool monitored = static_cast<int>(p) < d.layout.n_terms || d.layout.is_scale(p) || d.layout.is_cor(p);
    if (!monitored || std::isnan(r)) continue;
    if (std::isnan(worst) || r > worst) worst = r;
    if (r > threshold) flagged.push_back(d.layout.names[p]);
  }
  d.diagnostics.max_monitored_rhat = worst;
  if (!flagged.empty()) {
    std::string msg = "R-hat above " + io::fmt(threshold) + " for";
    for (const auto& n : flagged) msg += " " + n;
    d.warnings.push_back(msg);
  }
}

// Posterior draws of `spec` given the observed sample.
inline PosteriorDraws fit(const ModelSpec& spec, const design::ObservedSample& data, const FitOptions& opt) {
  spec.validate();
  opt.validate();
  PosteriorDraws out;
  out.spec = spec;
  out.schools = fitted_schools(data);
  out.layout = make_layout(spec, out.schools);
  out.chains = opt.chains;
  out.draws_per_chain = opt.draws;
  const auto units = detail::build_units(spec, data, out.schools);
  const auto moves = detail::translation_moves(spec, out.layout, units);

  std::vector<std::vector<double>> per_chain(opt.chains);
  std::vector<std::array<double, detail::kMoveKinds>> rates(opt.chains);
  auto run_chain = [&](int c) {
    detail::ChainSampler sampler(spec, out.layout, units, moves, opt, make_stream({opt.seed, 0xc4a1u, std::uint64_t(c)}));
    per_chain[c].reserve(static_cast<std::size_t>(opt.draws) * out.layout.size());
    sampler.run(per_chain[c]);
    rates[c] = sampler.acceptance();
  };
  const int threads = std::clamp(opt.threads, 1, opt.chains);
  if (threads == 1) {
    for (int c = 0; c < opt.chains; ++c) run_chain(c);
  } else {
    for (int start = 0; start < opt.chains; start += threads) {
      std::vector<std::thread> pool;
      for (int c = start; c < std::min(opt.chains, start + threads); ++c) pool.emplace_back(run_chain, c);
      for (auto& t : pool) t.join();
    }
  }
  for (const auto& c : per_chain) out.values.insert(out.values.end(), c.begin(), c.end());
  for (int k = 0; k < detail::kMoveKinds; ++k) {
    double sum = 0.0;
    for (const auto& r : rates) sum += r[k];
    out.acceptance.emplace_back(detail::kMoveLabels[k], sum / opt.chains);
  }
  compute_diagnostics(out, opt.rhat_threshold);
  return out;
}

// Independent draws from the joint prior.
inline PosteriorDraws sample_prior(const ModelSpec& spec, std::vector<std::uint32_t> schools, int n_draws,
                                   std::uint64_t seed) {
  spec.validate();
  if (n_draws < 1) throw std::invalid_argument("sample_prior: at least one draw required");
  std::sort(schools.begin(), schools.end());
  PosteriorDraws out;
  out.spec = spec;
  out.schools = std::move(schools);
  out.layout = make_layout(spec, out.schools);
  out.chains = 1;
  out.draws_per_chain = n_draws;
  Rng rng = make_stream({seed, 0x9a10u});
  const auto& L = out.layout;
  std::vector<double> th(L.size());
  for (int s = 0; s < n_draws; ++s) {
    for (int k = 0; k < L.n_terms; ++k) {
      th[k] = draw_normal(rng, k == 0 ? spec.beta0_prior_mean : 0.0, spec.beta_prior_sd);
    }
    for (const auto& b : L.factors) {
      th[b.sigma] = std::abs(draw_normal(rng, 0.0, spec.scale_prior_sd));
      if (b.gamma >= 0) {
        th[b.sigma_gamma] = std::abs(draw_normal(rng, 0.0, spec.scale_prior_sd));
        th[b.cor] = 2.0 * uniform_open01(rng) - 1.0;
      }
      for (int j = 0; j < b.levels; ++j) {
        const double e1 = draw_normal(rng), e2 = draw_normal(rng);
        th[b.alpha + j] = th[b.sigma] * e1;
        if (b.gamma >= 0) {
          const double r = th[b.cor];
          th[b.gamma + j] = th[b.sigma_gamma] * (r * e1 + std::sqrt(1.0 - r * r) * e2);
        }
      }
    }
    std::student_t_distribution<double> t(spec.sigma_prior_df);
    th[L.sigma] = std::abs(t(rng)) * spec.sigma_prior_scale;
    out.values.insert(out.values.end(), th.begin(), th.end());
  }
  return out;
}

// Outcome replicates under parameters drawn from the prior: replicate r holds
// one outcome per row of `d`, using the row's covariates (and Z, V for Post-GPA).
inline std::vector<std::vector<double>> prior_predictive(const ModelSpec& spec, const design::ObservedSample& d,
                                                         int n_draws, std::uint64_t seed) {
  const auto prior = sample_prior(spec, fitted_schools(d), n_draws, seed);
  const Predictor p(prior);
  Rng rng = make_stream({seed, 0x9a11u});
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n_draws));
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j].reserve(d.n());
    for (const auto& r : d.rows) {
      const int z = spec.outcome == Outcome::PostGpa ? r.z : 0;
      const auto se = p.school_effect(j, r.c.school, rng);
      out[j].push_back(p.draw_outcome(p.linear_predictor(j, r.c, z, r.v, se), j, rng));
    }
  }
  return out;
}

}  // namespace mrpsim::bayes
