#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrpsim/covariates.hpp"
#include "mrpsim/dgp.hpp"
#include "mrpsim/io.hpp"
#include "mrpsim/math/rng.hpp"

namespace mrpsim::design {

enum class ResponseModel { LogisticOfPrevGpa, Always };

struct DesignConfig {
  std::array<int, kNumStrata> schools_per_stratum{28, 34, 32, 19, 27};
  double school_keep_prob = 0.5;
  ResponseModel response_model = ResponseModel::LogisticOfPrevGpa;
};

struct SampleRow {
  std::uint32_t individual_id = 0;
  Covariates c;
  double v = 0.0;
  double y = 0.0;
  std::uint8_t z = 0;
};

struct ObservedSample {
  std::vector<SampleRow> rows;
  std::vector<std::uint32_t> schools;  // retained school ids, sorted
  std::uint64_t seed = 0;
  std::size_t requested_schools = 0;    // size of the stratified draw before retention
  std::size_t eligible_students = 0;    // students in retained schools

  std::size_t n() const { return rows.size(); }
  double response_rate() const {
    return eligible_students ? static_cast<double>(rows.size()) / eligible_students : 0.0;
  }
};

inline double response_probability(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Draws cfg.schools_per_stratum[s] distinct schools from each stratum.
inline std::vector<std::uint32_t> stratified_cluster_sample(const dgp::StrataLayout& layout,
                                                            const DesignConfig& cfg, Rng& rng) {
  std::vector<std::uint32_t> chosen;
  for (int s = 1; s <= kNumStrata; ++s) {
    std::vector<std::uint32_t> pool;
    for (const auto& school : layout.schools) {
      if (school.stratum == s) pool.push_back(school.id);
    }
    const int want = cfg.schools_per_stratum[s - 1];
    if (want < 0 || static_cast<std::size_t>(want) > pool.size()) {
      throw std::invalid_argument("stratified_cluster_sample: stratum " + std::to_string(s) +
                                  " has " + std::to_string(pool.size()) + " schools, " +
                                  std::to_string(want) + " requested");
    }
    std::sample(pool.begin(), pool.end(), std::back_inserter(chosen), want, rng);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline std::vector<std::uint32_t> subsample_schools(const std::vector<std::uint32_t>& schools,
                                                    double keep_prob, Rng& rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw std::invalid_argument("subsample_schools: keep_prob must lie in (0, 1]");
  }
  std::vector<std::uint32_t> kept;
  for (auto id : schools) {
    if (draw_bernoulli(rng, keep_prob)) kept.push_back(id);
  }
  return kept;
}

// Students of the given schools respond independently with probability
// logistic(V); responders reveal the potential outcome of their arm.
inline ObservedSample student_response(const dgp::FinitePopulation& pop,
                                       const std::vector<std::uint32_t>& schools, Rng& rng,
                                       ResponseModel model = ResponseModel::LogisticOfPrevGpa) {
  ObservedSample d;
  d.schools = schools;
  std::sort(d.schools.begin(), d.schools.end());
  for (auto id : d.schools) {
    const auto begin = pop.school_offsets.at(id);
    const auto end = pop.school_offsets.at(id + 1);
    for (auto i = begin; i < end; ++i) {
      const auto& p = pop.individuals[i];
      ++d.eligible_students;
      const bool responds = model == ResponseModel::Always ||
                            draw_bernoulli(rng, response_probability(p.v));
      if (!responds) continue;
      d.rows.push_back({p.id, p.covariates(), p.v, p.observed(), p.z});
    }
  }
  return d;
}

inline ObservedSample draw_sample(const dgp::FinitePopulation& pop, const DesignConfig& cfg,
                                  std::uint64_t seed) {
  Rng rng = make_stream({seed, 0x5a3d});
  const auto stratified = stratified_cluster_sample(pop.layout, cfg, rng);
  const auto kept = subsample_schools(stratified, cfg.school_keep_prob, rng);
  auto d = student_response(pop, kept, rng, cfg.response_model);
  d.seed = seed;
  d.requested_schools = stratified.size();
  return d;
}

inline void write_sample_csv(const ObservedSample& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "individual_id,school_id,stratum,G,RE,ME,V,Y,Z\n";
  for (const auto& r : d.rows) {
    out << r.individual_id << ',' << r.c.school << ',' << int(r.c.stratum) << ',' << int(r.c.g)
        << ',' << int(r.c.re) << ',' << int(r.c.me) << ',' << io::fmt(r.v) << ',' << io::fmt(r.y)
        << ',' << int(r.z) << '\n';
  }
}

inline void write_provenance(const ObservedSample& d, const std::string& path) {
  std::string ids;
  for (std::size_t i = 0; i < d.schools.size(); ++i) {
    if (i) ids += ' ';
    ids += std::to_string(d.schools[i]);
  }
  io::write_key_values(path, {{"seed", std::to_string(d.seed)},
                              {"school_ids", ids},
                              {"n", std::to_string(d.n())},
                              {"requested_schools", std::to_string(d.requested_schools)},
                              {"eligible_students", std::to_string(d.eligible_students)}});
}

inline ObservedSample read_sample(const std::string& csv_path, const std::string& provenance_path = {}) {
  const auto t = io::CsvTable::read(csv_path);
  ObservedSample d;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    SampleRow r;
    r.individual_id = static_cast<std::uint32_t>(t.integer(i, "individual_id"));
    r.c.school = static_cast<std::uint32_t>(t.integer(i, "school_id"));
    r.c.stratum = static_cast<std::uint8_t>(t.integer(i, "stratum"));
    r.c.g = static_cast<std::uint8_t>(t.integer(i, "G"));
    r.c.re = static_cast<std::uint8_t>(t.integer(i, "RE"));
    r.c.me = static_cast<std::uint8_t>(t.integer(i, "ME"));
    r.v = t.num(i, "V");
    r.y = t.num(i, "Y");
    r.z = static_cast<std::uint8_t>(t.integer(i, "Z"));
    if (r.c.stratum < 1 || r.c.stratum > kNumStrata || r.c.re < 1 || r.c.re > kNumRace) {
      throw std::runtime_error(csv_path + ": row " + std::to_string(i + 2) + " has an invalid level");
    }
    d.rows.push_back(r);
  }
  if (!provenance_path.empty()) {
    const auto kv = io::read_key_values(provenance_path);
    d.seed = std::stoull(kv.at("seed"));
    for (const auto& tok : io::split(kv.at("school_ids"), ' ')) {
      if (!tok.empty()) d.schools.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
    }
  } else {
    for (const auto& r : d.rows) d.schools.push_back(r.c.school);
    std::sort(d.schools.begin(), d.schools.end());
    d.schools.erase(std::unique(d.schools.begin(), d.schools.end()), d.schools.end());
  }
  return d;
}

}  // namespace mrpsim::design
