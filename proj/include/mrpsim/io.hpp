#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mrpsim::io {

// 17 significant digits: every double survives a text round trip.
inline std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::runtime_error("not a number: '" + s + "'");
  }
  if (used != s.size()) throw std::runtime_error("not a number: '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& s) {
  long long v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw std::runtime_error("not an integer: '" + s + "'");
  return v;
}

// Header-addressed comma-separated table held in memory.
class CsvTable {
 public:
  static CsvTable read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  static CsvTable parse(const std::string& text, const std::string& origin = "<text>") {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(origin + ": empty file");
    t.header_ = split(trim(line));
    for (std::size_t i = 0; i < t.header_.size(); ++i) t.col_[t.header_[i]] = i;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      auto row = split(trim(line));
      if (row.size() != t.header_.size()) {
        throw std::runtime_error(origin + ": row " + std::to_string(lineno) + " has " +
                                 std::to_string(row.size()) + " fields, expected " +
                                 std::to_string(t.header_.size()));
      }
      t.rows_.push_back(std::move(row));
    }
    return t;
  }

  std::size_t rows() const { return rows_.size(); }
  const std::vector<std::string>& header() const { return header_; }
  bool has(const std::string& name) const { return col_.count(name) > 0; }

  const std::string& at(std::size_t row, const std::string& name) const {
    const auto it = col_.find(name);
    if (it == col_.end()) throw std::runtime_error("missing column '" + name + "'");
    return rows_.at(row)[it->second];
  }
  double num(std::size_t row, const std::string& name) const { return parse_double(at(row, name)); }
  long long integer(std::size_t row, const std::string& name) const { return parse_int(at(row, name)); }

 private:
  std::vector<std::string> header_;
  std::map<std::string, std::size_t> col_;
  std::vector<std::vector<std::string>> rows_;
};

// `key = value` lines; '#' starts a comment.
using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("line " + std::to_string(lineno) + ": expected key = value");
    }
    kv[trim(body.substr(0, eq))] = trim(body.substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

inline void write_key_values(const std::string& path, const KeyValues& kv) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
}

}  // namespace mrpsim::io
