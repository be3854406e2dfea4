#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrpsim/covariates.hpp"
#include "mrpsim/io.hpp"
#include "mrpsim/math/rng.hpp"
#include "mrpsim/math/truncnorm.hpp"

namespace mrpsim::dgp {

// Constants of the simulated student population. Defaults reproduce the
// published NSLM-style setup.
struct Coefficients {
  std::array<double, 3> mu_x{2.1, 2.8, 3.5};      // Prev-GPA mean by achievement (Low, Medium, High)
  std::array<double, 3> sigma_x{0.8, 1.0, 0.6};
  std::array<std::array<double, 5>, 5> p_re{{
      {0.026, 0.127, 0.280, 0.367, 0.200},
      {0.053, 0.102, 0.234, 0.445, 0.166},
      {0.023, 0.122, 0.254, 0.415, 0.186},
      {0.066, 0.086, 0.195, 0.514, 0.139},
      {0.036, 0.106, 0.215, 0.484, 0.159},
  }};
  std::array<double, 3> p_me_low_mc{0.238, 0.309, 0.386};
  std::array<double, 3> p_me_high_mc{0.198, 0.269, 0.346};
  double p_g = 0.49;
  std::array<double, 3> tau_sa{0.1, 0.07, 0.01};
  std::array<double, 3> tau_mc{0.0, -0.01, 0.01};  // Both, Low, High
  std::array<double, 2> tau_g{0.01, 0.01};          // G = 0, G = 1
  std::array<double, 5> tau_re{0.02, 0.1, 0.07, 0.1, 0.02};
  std::array<double, 2> tau_me{0.0, 0.01};          // ME = 0, ME = 1
  double school_noise_sd = 0.04;
  double outcome_sd = 0.6;
  double gpa_lo = 0.0;
  double gpa_hi = 4.33;
  double school_size_mean = 200.0;
  std::array<int, 5> schools_per_stratum{2806, 3040, 2570, 2239, 566};

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    for (const auto& row : p_re) {
      double sum = 0.0;
      for (double p : row) {
        if (!prob(p)) throw std::invalid_argument("p_re entry outside [0,1]");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("p_re row does not sum to 1");
    }
    for (double p : p_me_low_mc) if (!prob(p)) throw std::invalid_argument("p_me outside [0,1]");
    for (double p : p_me_high_mc) if (!prob(p)) throw std::invalid_argument("p_me outside [0,1]");
    if (!prob(p_g)) throw std::invalid_argument("p_g outside [0,1]");
    for (double s : sigma_x) if (!(s > 0.0)) throw std::invalid_argument("sigma_x must be positive");
    if (!(school_noise_sd > 0.0) || !(outcome_sd > 0.0)) {
      throw std::invalid_argument("noise standard deviations must be positive");
    }
    if (!(gpa_lo < gpa_hi)) throw std::invalid_argument("gpa_lo must be below gpa_hi");
    if (!(school_size_mean > 0.0)) throw std::invalid_argument("school_size_mean must be positive");
  }

  // Stratum 1 pools both compositions, so its probability averages the two vectors.
  double p_me(MinorityComposition mc, SchoolAchievement sa) const {
    const auto k = static_cast<int>(sa);
    switch (mc) {
      case MinorityComposition::Low: return p_me_low_mc[k];
      case MinorityComposition::High: return p_me_high_mc[k];
      case MinorityComposition::Both: return 0.5 * (p_me_low_mc[k] + p_me_high_mc[k]);
    }
    return 0.0;
  }

  // Additive treatment shift of a student before school noise.
  double effect(const Covariates& c) const {
    return tau_sa[static_cast<int>(c.sa())] + tau_mc[static_cast<int>(c.mc())] + tau_g[c.g] +
           tau_re[c.re - 1] + tau_me[c.me];
  }

  // Mean of the Post-GPA truncated normal under arm z, clamped into the GPA range.
  double latent_mean(double v, const Covariates& c, int z, double u, double t) const {
    const double m = v + (effect(c) + u) * z + t;
    return std::clamp(m, gpa_lo, gpa_hi);
  }
};

// Validated truncated-normal draw on (lo, hi).
inline double sample_truncnorm(double mu, double sigma, double lo, double hi, Rng& rng) {
  if (!std::isfinite(mu) || !std::isfinite(sigma) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw std::invalid_argument("sample_truncnorm: non-finite argument");
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("sample_truncnorm: sigma must be positive");
  if (!(lo < hi)) throw std::invalid_argument("sample_truncnorm: lo must be below hi");
  return math::sample_truncnorm_unchecked(mu, sigma, lo, hi, rng);
}

struct StratumInfo {
  int id = 1;
  MinorityComposition mc = MinorityComposition::Both;
  SchoolAchievement sa = SchoolAchievement::Low;
  int school_count = 0;
};

struct School {
  std::uint32_t id = 0;
  std::uint8_t stratum = 1;
  std::uint32_t size = 0;
  double u = 0.0;  // noise on the treatment effect
  double t = 0.0;  // noise on both arms
};

struct StrataLayout {
  std::array<StratumInfo, kNumStrata> strata{};
  std::vector<School> schools;  // ordered by stratum; id == position

  std::size_t expected_population() const {
    std::size_t n = 0;
    for (const auto& s : schools) n += s.size;
    return n;
  }
};

// Enumerates schools per stratum with Poisson sizes and draws each school's
// noise pair once. `scale` shrinks the school counts for quick runs.
inline StrataLayout build_strata(const Coefficients& coeffs, double scale, Rng& rng) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("build_strata: scale must be positive");
  coeffs.validate();
  StrataLayout layout;
  std::poisson_distribution<std::uint32_t> size_dist(coeffs.school_size_mean);
  std::uint32_t next_id = 0;
  for (int s = 1; s <= kNumStrata; ++s) {
    auto& info = layout.strata[s - 1];
    info.id = s;
    info.mc = stratum_levels(s).mc;
    info.sa = stratum_levels(s).sa;
    info.school_count =
        std::max(1, static_cast<int>(std::lround(coeffs.schools_per_stratum[s - 1] * scale)));
    for (int k = 0; k < info.school_count; ++k) {
      School school;
      school.id = next_id++;
      school.stratum = static_cast<std::uint8_t>(s);
      school.size = size_dist(rng);
      school.u = draw_normal(rng, 0.0, coeffs.school_noise_sd);
      school.t = draw_normal(rng, 0.0, coeffs.school_noise_sd);
      layout.schools.push_back(school);
    }
  }
  return layout;
}

struct Individual {
  std::uint32_t id = 0;
  std::uint32_t school = 0;
  std::uint8_t stratum = 1;
  std::uint8_t g = 0;
  std::uint8_t re = 1;
  std::uint8_t me = 0;
  std::uint8_t z = 0;
  double v = 0.0;
  double y0 = 0.0;
  double y1 = 0.0;

  Covariates covariates() const { return {me, g, re, school, stratum}; }
  double observed() const { return z ? y1 : y0; }
};

struct FinitePopulation {
  StrataLayout layout;
  std::vector<Individual> individuals;        // grouped by school, school order
  std::vector<std::size_t> school_offsets;    // individuals of school k: [off[k], off[k+1])

  std::size_t size() const { return individuals.size(); }
};

// Per-school streams make generation order-independent; every student gets
// both potential outcomes.
inline FinitePopulation generate_population(const StrataLayout& layout, const Coefficients& coeffs,
                                            Rng& rng) {
  coeffs.validate();
  const std::uint64_t base = rng();
  FinitePopulation pop;
  pop.layout = layout;
  pop.individuals.reserve(layout.expected_population());
  pop.school_offsets.reserve(layout.schools.size() + 1);
  std::uint32_t next_id = 0;
  for (const auto& school : layout.schools) {
    pop.school_offsets.push_back(pop.individuals.size());
    Rng srng = make_stream({base, school.id});
    const auto levels = stratum_levels(school.stratum);
    const int sa = static_cast<int>(levels.sa);
    const auto& p_re = coeffs.p_re[school.stratum - 1];
    const double p_me = coeffs.p_me(levels.mc, levels.sa);
    for (std::uint32_t i = 0; i < school.size; ++i) {
      Individual ind;
      ind.id = next_id++;
      ind.school = school.id;
      ind.stratum = school.stratum;
      ind.g = draw_bernoulli(srng, coeffs.p_g) ? 1 : 0;
      ind.v = math::sample_truncnorm_unchecked(coeffs.mu_x[sa], coeffs.sigma_x[sa], coeffs.gpa_lo,
                                               coeffs.gpa_hi, srng);
      const double u = uniform_open01(srng);
      double cum = 0.0;
      ind.re = kNumRace;
      for (int r = 0; r < kNumRace; ++r) {
        cum += p_re[r];
        if (u < cum) {
          ind.re = static_cast<std::uint8_t>(r + 1);
          break;
        }
      }
      ind.me = draw_bernoulli(srng, p_me) ? 1 : 0;
      const auto cov = ind.covariates();
      const double m0 = coeffs.latent_mean(ind.v, cov, 0, school.u, school.t);
      const double m1 = coeffs.latent_mean(ind.v, cov, 1, school.u, school.t);
      ind.y0 = math::sample_truncnorm_unchecked(m0, coeffs.outcome_sd, coeffs.gpa_lo, coeffs.gpa_hi, srng);
      ind.y1 = math::sample_truncnorm_unchecked(m1, coeffs.outcome_sd, coeffs.gpa_lo, coeffs.gpa_hi, srng);
      pop.individuals.push_back(ind);
    }
  }
  pop.school_offsets.push_back(pop.individuals.size());
  return pop;
}

// Complete randomization: exactly floor(n/2) ones. Depends on n and the stream only.
inline std::vector<std::uint8_t> complete_randomization(std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("complete_randomization: empty population");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t treated = n / 2;
  for (std::size_t i = 0; i < treated; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<std::uint8_t> z(n, 0);
  for (std::size_t i = 0; i < treated; ++i) z[idx[i]] = 1;
  return z;
}

inline FinitePopulation assign_treatment(FinitePopulation pop, Rng& rng) {
  if (pop.individuals.empty()) throw std::invalid_argument("assign_treatment: empty population");
  const auto z = complete_randomization(pop.size(), rng);
  for (std::size_t i = 0; i < pop.size(); ++i) pop.individuals[i].z = z[i];
  return pop;
}

inline void write_population_csv(const FinitePopulation& pop, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "individual_id,school_id,stratum,G,RE,ME,V,Y0,Y1,Z\n";
  for (const auto& p : pop.individuals) {
    out << p.id << ',' << p.school << ',' << int(p.stratum) << ',' << int(p.g) << ',' << int(p.re)
        << ',' << int(p.me) << ',' << io::fmt(p.v) << ',' << io::fmt(p.y0) << ',' << io::fmt(p.y1)
        << ',' << int(p.z) << '\n';
  }
}

}  // namespace mrpsim::dgp
