#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "bredinger/errors.hpp"

namespace bredinger::io {

/// Shortest decimal that parses back to the same double; "inf", "-inf",
/// "nan" for non-finite values.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ValidationError("io: cannot parse number '" + s + "'");
  return v;
}

/// Flat table of numbers with named columns.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) {
    if (row.size() != columns.size()) throw InconsistencyError("table: row width does not match the header");
    rows.push_back(std::move(row));
  }
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("io: cannot write " + path.string());
  out << text;
  if (!out) throw ValidationError("io: write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("io: cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t c = 0; c < t.columns.size(); ++c) out += (c ? "," : "") + t.columns[c];
  out += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out += ',';
      out += format_double(row[c]);
    }
    out += '\n';
  }
  return out;
}

inline Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(in, line)) throw ValidationError("csv: missing header");
  t.columns = split(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.columns.size())
      throw ValidationError("csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                            " cells, expected " + std::to_string(t.columns.size()));
    std::vector<double> row;
    for (const auto& c : cells) row.push_back(parse_double(c));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline void write_csv(const std::filesystem::path& path, const Table& t) { write_text(path, to_csv(t)); }
inline Table read_csv(const std::filesystem::path& path) { return parse_csv(read_text(path)); }

/// Ordered key=value record, one entry per line.
struct Summary {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, const std::string& value) {
    if (key.empty() || key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
      throw InconsistencyError("summary: malformed entry '" + key + "'");
    for (auto& e : entries)
      if (e.first == key) {
        e.second = value;
        return;
      }
    entries.emplace_back(key, value);
  }
  void set(const std::string& key, double v) { set(key, format_double(v)); }
  void set(const std::string& key, int v) { set(key, std::to_string(v)); }
  void set(const std::string& key, std::size_t v) { set(key, std::to_string(v)); }
  void set(const std::string& key, bool v) { set(key, std::string(v ? "1" : "0")); }

  bool has(const std::string& key) const {
    for (const auto& e : entries)
      if (e.first == key) return true;
    return false;
  }
  const std::string& get(const std::string& key) const {
    for (const auto& e : entries)
      if (e.first == key) return e.second;
    throw ValidationError("summary: no key '" + key + "'");
  }
  double number(const std::string& key) const { return parse_double(get(key)); }

  std::string text() const {
    std::string out;
    for (const auto& [k, v] : entries) out += k + "=" + v + "\n";
    return out;
  }
  static Summary parse(const std::string& text) {
    Summary s;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ValidationError("summary: line without '=': " + line);
      s.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return s;
  }
};

inline void write_summary(const std::filesystem::path& path, const Summary& s) { write_text(path, s.text()); }
inline Summary read_summary(const std::filesystem::path& path) { return Summary::parse(read_text(path)); }

}  // namespace bredinger::io
