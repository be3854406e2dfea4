#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "mrpsim/covariates.hpp"
#include "mrpsim/design.hpp"
#include "mrpsim/dgp.hpp"
#include "mrpsim/io.hpp"

namespace mrpsim::poststrat {

struct Cell {
  Covariates c;
  double n = 0.0;  // population count N_c
};

inline std::uint64_t cell_key(const Covariates& c) {
  return (std::uint64_t{c.school} << 24) | (std::uint64_t{c.stratum} << 16) |
         (std::uint64_t{c.re} << 8) | (std::uint64_t{c.g} << 4) | c.me;
}

inline std::string describe(const Covariates& c) {
  return "(ME=" + std::to_string(c.me) + ", G=" + std::to_string(c.g) + ", RE=" +
         std::string(race_name(c.re)) + ", School=" + std::to_string(c.school) + ", MC=" +
         std::string(composition_name(c.mc())) + ", SA=" + std::string(achievement_name(c.sa())) + ")";
}

// Realized covariate cells with their population counts, ordered by
// (SA, MC, School, RE, G, ME).
class PoststratMatrix {
 public:
  PoststratMatrix() = default;

  explicit PoststratMatrix(std::vector<Cell> cells) : cells_(std::move(cells)) {
    std::sort(cells_.begin(), cells_.end(), [](const Cell& a, const Cell& b) {
      return std::tuple(int(a.c.sa()), int(a.c.mc()), a.c.school, a.c.re, a.c.g, a.c.me) <
             std::tuple(int(b.c.sa()), int(b.c.mc()), b.c.school, b.c.re, b.c.g, b.c.me);
    });
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      if (cells_[i].n < 0.0) throw std::invalid_argument("negative cell count at " + describe(cells_[i].c));
      if (!index_.emplace(cell_key(cells_[i].c), i).second) {
        throw std::invalid_argument("duplicate cell " + describe(cells_[i].c));
      }
      total_ += cells_[i].n;
    }
  }

  std::size_t size() const { return cells_.size(); }
  const Cell& operator[](std::size_t i) const { return cells_[i]; }
  const std::vector<Cell>& cells() const { return cells_; }
  double total() const { return total_; }

  std::optional<std::size_t> find(const Covariates& c) const {
    const auto it = index_.find(cell_key(c));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<Cell> cells_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  double total_ = 0.0;
};

// One cell per realized (ME, G, RE, School) combination; empty cells omitted.
inline PoststratMatrix build_poststrat_matrix(const dgp::FinitePopulation& pop) {
  std::vector<Cell> cells;
  for (std::size_t k = 0; k + 1 < pop.school_offsets.size(); ++k) {
    std::array<std::uint32_t, 2 * 2 * kNumRace> counts{};
    for (auto i = pop.school_offsets[k]; i < pop.school_offsets[k + 1]; ++i) {
      const auto& p = pop.individuals[i];
      ++counts[(p.re - 1) * 4 + p.g * 2 + p.me];
    }
    const auto& school = pop.layout.schools[k];
    for (int re = 1; re <= kNumRace; ++re) {
      for (int g = 0; g < 2; ++g) {
        for (int me = 0; me < 2; ++me) {
          const auto n = counts[(re - 1) * 4 + g * 2 + me];
          if (n == 0) continue;
          Covariates c{static_cast<std::uint8_t>(me), static_cast<std::uint8_t>(g),
                       static_cast<std::uint8_t>(re), school.id, school.stratum};
          cells.push_back({c, static_cast<double>(n)});
        }
      }
    }
  }
  return PoststratMatrix(std::move(cells));
}

// Expected counts given the school layout: school size times the student-level
// covariate probabilities. Invariant to regenerating the students.
inline PoststratMatrix build_expected_matrix(const dgp::StrataLayout& layout, const dgp::Coefficients& coeffs) {
  std::vector<Cell> cells;
  for (const auto& school : layout.schools) {
    if (school.size == 0) continue;
    const auto lv = stratum_levels(school.stratum);
    const double p_me = coeffs.p_me(lv.mc, lv.sa);
    for (int re = 1; re <= kNumRace; ++re) {
      for (int g = 0; g < 2; ++g) {
        for (int me = 0; me < 2; ++me) {
          const double p = coeffs.p_re[school.stratum - 1][re - 1] * (g ? coeffs.p_g : 1.0 - coeffs.p_g) *
                           (me ? p_me : 1.0 - p_me);
          if (p <= 0.0) continue;
          Covariates c{static_cast<std::uint8_t>(me), static_cast<std::uint8_t>(g),
                       static_cast<std::uint8_t>(re), school.id, school.stratum};
          cells.push_back({c, school.size * p});
        }
      }
    }
  }
  return PoststratMatrix(std::move(cells));
}

// Conjunction of covariate equalities, e.g. "SA=High&MC=Low&RE=Asian"; "all" matches everything.
struct CellFilter {
  std::string label = "all";
  std::optional<SchoolAchievement> sa;
  std::optional<MinorityComposition> mc;
  std::optional<int> re;
  std::optional<int> g;
  std::optional<int> me;
  std::optional<std::uint32_t> school;
  std::optional<int> stratum;

  bool matches(const Covariates& c) const {
    return (!sa || c.sa() == *sa) && (!mc || c.mc() == *mc) && (!re || c.re == *re) &&
           (!g || c.g == *g) && (!me || c.me == *me) && (!school || c.school == *school) &&
           (!stratum || c.stratum == *stratum);
  }

  static CellFilter parse(const std::string& text) {
    CellFilter f;
    f.label = io::trim(text);
    if (f.label == "all" || f.label == "ATE") return f;
    for (const auto& term : io::split(f.label, '&')) {
      const auto eq = term.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("bad subpopulation term '" + term + "'");
      const auto key = io::trim(term.substr(0, eq));
      const auto value = io::trim(term.substr(eq + 1));
      if (key == "SA") f.sa = parse_achievement(value);
      else if (key == "MC") f.mc = parse_composition(value);
      else if (key == "RE") f.re = parse_race(value);
      else if (key == "G") f.g = static_cast<int>(io::parse_int(value));
      else if (key == "ME") f.me = static_cast<int>(io::parse_int(value));
      else if (key == "School") f.school = static_cast<std::uint32_t>(io::parse_int(value));
      else if (key == "Stratum") f.stratum = static_cast<int>(io::parse_int(value));
      else throw std::invalid_argument("unknown covariate '" + key + "' in subpopulation");
    }
    return f;
  }

  static CellFilter for_school(std::uint32_t id) {
    CellFilter f;
    f.label = "School=" + std::to_string(id);
    f.school = id;
    return f;
  }
};

struct SubpopIndex {
  std::vector<std::size_t> cells;
  std::string label;
  double population_share = 0.0;
};

template <typename Predicate>
SubpopIndex subpop_index(const PoststratMatrix& m, Predicate&& pred, std::string label) {
  SubpopIndex idx;
  idx.label = std::move(label);
  double n = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (pred(m[i].c)) {
      idx.cells.push_back(i);
      n += m[i].n;
    }
  }
  if (idx.cells.empty()) throw std::invalid_argument("subpopulation '" + idx.label + "' matches no cells");
  idx.population_share = n / m.total();
  return idx;
}

inline SubpopIndex subpop_index(const PoststratMatrix& m, const CellFilter& f) {
  return subpop_index(m, [&](const Covariates& c) { return f.matches(c); }, f.label);
}

inline double subpop_count(const PoststratMatrix& m, const SubpopIndex& idx) {
  double n = 0.0;
  for (auto c : idx.cells) n += m[c].n;
  return n;
}

// sum_c values_c N_c / sum_c N_c over the subpopulation; `values` is indexed by
// matrix position and NaN marks an unavailable cell.
inline double poststratify_point(std::span<const double> values, const SubpopIndex& idx,
                                 const PoststratMatrix& m) {
  double num = 0.0, den = 0.0;
  for (auto c : idx.cells) {
    if (c >= values.size() || std::isnan(values[c])) {
      throw std::invalid_argument("poststratify_point: no value for cell " + describe(m[c].c));
    }
    num += values[c] * m[c].n;
    den += m[c].n;
  }
  if (!(den > 0.0)) throw std::invalid_argument("poststratify_point: subpopulation has zero population");
  return num / den;
}

// Draw-by-draw poststratified difference; `yrep1[c]` / `yrep0[c]` hold S draws for cell c.
inline std::vector<double> poststratify_draws(const std::vector<std::vector<double>>& yrep1,
                                              const std::vector<std::vector<double>>& yrep0,
                                              const SubpopIndex& idx, const PoststratMatrix& m) {
  if (idx.cells.empty()) throw std::invalid_argument("poststratify_draws: empty subpopulation");
  std::size_t s = 0;
  double den = 0.0;
  for (auto c : idx.cells) {
    if (c >= yrep1.size() || c >= yrep0.size()) {
      throw std::invalid_argument("poststratify_draws: no draws for cell " + describe(m[c].c));
    }
    if (s == 0) s = yrep1[c].size();
    if (yrep1[c].size() != s || yrep0[c].size() != s || s == 0) {
      throw std::invalid_argument("poststratify_draws: draw-count mismatch at cell " + describe(m[c].c));
    }
    den += m[c].n;
  }
  std::vector<double> out(s, 0.0);
  for (auto c : idx.cells) {
    const double w = m[c].n / den;
    for (std::size_t j = 0; j < s; ++j) out[j] += w * (yrep1[c][j] - yrep0[c][j]);
  }
  return out;
}

// Sample counts n_c per matrix cell; rows outside the matrix are rejected.
inline std::vector<double> sample_cell_counts(const design::ObservedSample& d, const PoststratMatrix& m) {
  std::vector<double> n(m.size(), 0.0);
  for (const auto& r : d.rows) {
    const auto pos = m.find(r.c);
    if (!pos) throw std::invalid_argument("sample row outside the poststratification matrix: " + describe(r.c));
    n[*pos] += 1.0;
  }
  return n;
}

// Bias of the in-sample-frequency estimator when every cell effect is exact:
// sum_c tau_c (n_c / sum n - N_c / sum N).
inline double in_sample_bias(std::span<const double> tau, std::span<const double> n_sample,
                             const SubpopIndex& idx, const PoststratMatrix& m) {
  double n_tot = 0.0, pop_tot = 0.0;
  for (auto c : idx.cells) {
    if (n_sample[c] < 0.0) throw std::invalid_argument("in_sample_bias: negative sample count");
    n_tot += n_sample[c];
    pop_tot += m[c].n;
  }
  if (!(n_tot > 0.0)) throw std::invalid_argument("in_sample_bias: subpopulation has no sampled units");
  double bias = 0.0;
  for (auto c : idx.cells) bias += tau[c] * (n_sample[c] / n_tot - m[c].n / pop_tot);
  return bias;
}

inline void write_matrix_csv(const PoststratMatrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "Maternal Education,Gender,Race/Ethnicity,School,MC,SA,N_c\n";
  for (const auto& cell : m.cells()) {
    out << int(cell.c.me) << ',' << int(cell.c.g) << ',' << race_name(cell.c.re) << ',' << cell.c.school
        << ',' << composition_name(cell.c.mc()) << ',' << achievement_name(cell.c.sa()) << ','
        << io::fmt(cell.n) << '\n';
  }
}

}  // namespace mrpsim::poststrat
