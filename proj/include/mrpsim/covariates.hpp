#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mrpsim {

enum class SchoolAchievement : std::uint8_t { Low = 0, Medium = 1, High = 2 };
enum class MinorityComposition : std::uint8_t { Both = 0, Low = 1, High = 2 };

inline constexpr int kNumStrata = 5;
inline constexpr int kNumRace = 5;      // Asian, Black, Hispanic, White, Other (coded 1..5)
inline constexpr int kNumAchievement = 3;
inline constexpr int kNumComposition = 3;

struct StratumLevels {
  MinorityComposition mc;
  SchoolAchievement sa;
};

// Stratum s in 1..5 and its (minority composition, achievement) pair.
inline constexpr std::array<StratumLevels, kNumStrata> kStrata{{
    {MinorityComposition::Both, SchoolAchievement::Low},
    {MinorityComposition::Low, SchoolAchievement::Medium},
    {MinorityComposition::High, SchoolAchievement::Medium},
    {MinorityComposition::Low, SchoolAchievement::High},
    {MinorityComposition::High, SchoolAchievement::High},
}};

inline constexpr StratumLevels stratum_levels(int stratum) { return kStrata.at(stratum - 1); }

inline std::string_view achievement_name(SchoolAchievement sa) {
  constexpr std::array<std::string_view, 3> n{"Low", "Medium", "High"};
  return n[static_cast<int>(sa)];
}
inline std::string_view composition_name(MinorityComposition mc) {
  constexpr std::array<std::string_view, 3> n{"Both", "Low", "High"};
  return n[static_cast<int>(mc)];
}
inline std::string_view race_name(int re) {
  constexpr std::array<std::string_view, 5> n{"Asian", "Black", "Hispanic", "White", "Other"};
  return n.at(re - 1);
}

inline SchoolAchievement parse_achievement(std::string_view s) {
  if (s == "Low" || s == "1") return SchoolAchievement::Low;
  if (s == "Medium" || s == "2") return SchoolAchievement::Medium;
  if (s == "High" || s == "3") return SchoolAchievement::High;
  throw std::invalid_argument("unknown school achievement level '" + std::string(s) + "'");
}
inline MinorityComposition parse_composition(std::string_view s) {
  if (s == "Both" || s == "0") return MinorityComposition::Both;
  if (s == "Low" || s == "1") return MinorityComposition::Low;
  if (s == "High" || s == "2") return MinorityComposition::High;
  throw std::invalid_argument("unknown minority composition level '" + std::string(s) + "'");
}
inline int parse_race(std::string_view s) {
  for (int re = 1; re <= kNumRace; ++re) {
    if (s == race_name(re) || s == std::to_string(re)) return re;
  }
  if (s == "African-American") return 2;
  throw std::invalid_argument("unknown race/ethnicity '" + std::string(s) + "'");
}

// Categorical covariates of one student or one poststratification cell.
struct Covariates {
  std::uint8_t me = 0;
  std::uint8_t g = 0;
  std::uint8_t re = 1;
  std::uint32_t school = 0;
  std::uint8_t stratum = 1;

  MinorityComposition mc() const { return stratum_levels(stratum).mc; }
  SchoolAchievement sa() const { return stratum_levels(stratum).sa; }

  friend bool operator==(const Covariates&, const Covariates&) = default;
};

}  // namespace mrpsim
