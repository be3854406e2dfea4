#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mrpsim/bayes/model.hpp"
#include "mrpsim/math/rng.hpp"
#include "mrpsim/math/truncnorm.hpp"

namespace mrpsim::bayes {

struct SchoolEffect {
  double alpha = 0.0;
  double gamma = 0.0;
};

// Draw-level posterior predictions for poststratification cells.
class Predictor {
 public:
  explicit Predictor(const PosteriorDraws& d) : d_(d) {
    if (d.n_draws() == 0) throw std::invalid_argument("Predictor: no posterior draws");
    school_ = d.layout.block(Factor::School);
  }

  const PosteriorDraws& draws() const { return d_; }
  std::size_t n_draws() const { return d_.n_draws(); }

  bool is_observed(std::uint32_t school) const { return !school_ || d_.school_level(school) >= 0; }

  // Fitted effect for an observed school; a fresh draw from the school-level
  // distribution of draw j otherwise.
  SchoolEffect school_effect(std::size_t j, std::uint32_t school, Rng& rng) const {
    if (!school_) return {};
    const double* th = d_.draw(j);
    const int level = d_.school_level(school);
    if (level >= 0) {
      return {th[school_->alpha + level], school_->gamma >= 0 ? th[school_->gamma + level] : 0.0};
    }
    return new_school_effect(j, rng);
  }

  SchoolEffect new_school_effect(std::size_t j, Rng& rng) const {
    if (!school_) return {};
    const double* th = d_.draw(j);
    const double e1 = draw_normal(rng);
    SchoolEffect e{th[school_->sigma] * e1, 0.0};
    if (school_->gamma >= 0) {
      const double r = th[school_->cor];
      const double e2 = draw_normal(rng);
      e.gamma = th[school_->sigma_gamma] * (r * e1 + std::sqrt(1.0 - r * r) * e2);
    }
    return e;
  }

  // Linear predictor of draw j; the school contribution comes from `se`.
  double linear_predictor(std::size_t j, const Covariates& c, int z, double offset, SchoolEffect se) const {
    const double* th = d_.draw(j);
    const auto& L = d_.layout;
    double m = d_.spec.offset_prev_gpa ? offset : 0.0;
    for (int k = 0; k < L.n_terms; ++k) m += term_value(d_.spec.terms[k], c, z) * th[k];
    for (const auto& b : L.factors) {
      if (b.factor == Factor::School) {
        m += se.alpha + (z ? se.gamma : 0.0);
        continue;
      }
      const int l = fixed_level(b.factor, c);
      m += th[b.alpha + l];
      if (b.gamma >= 0 && z) m += th[b.gamma + l];
    }
    return m;
  }

  double sigma(std::size_t j) const { return d_(j, d_.layout.sigma); }

  double draw_outcome(double mu, std::size_t j, Rng& rng) const {
    return math::sample_truncnorm_unchecked(mu, sigma(j), d_.spec.lo, d_.spec.hi, rng);
  }

  double expected_outcome(double mu, std::size_t j) const {
    return math::truncnorm_mean_unchecked(mu, sigma(j), d_.spec.lo, d_.spec.hi);
  }

 private:
  const PosteriorDraws& d_;
  const FactorBlock* school_ = nullptr;
};

// One posterior predictive Prev-GPA draw for a cell under draw j.
inline double predictive_prev(const Predictor& p, const Covariates& c, std::size_t j, Rng& rng) {
  const auto se = p.school_effect(j, c.school, rng);
  return p.draw_outcome(p.linear_predictor(j, c, 0, 0.0, se), j, rng);
}

// One posterior predictive Post-GPA draw for a cell under arm z with Prev-GPA v.
inline double predictive_post(const Predictor& p, const Covariates& c, int z, double v, std::size_t j, Rng& rng) {
  if (z != 0 && z != 1) throw std::invalid_argument("predictive_post: z must be 0 or 1");
  const auto se = p.school_effect(j, c.school, rng);
  return p.draw_outcome(p.linear_predictor(j, c, z, v, se), j, rng);
}

}  // namespace mrpsim::bayes
