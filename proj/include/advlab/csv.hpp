#pragma once

// Text output helpers shared by every exporter: round-trippable number
// formatting, the provenance header block, and a small CSV reader.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "advlab/errors.hpp"

namespace advlab {

/// 17 significant digits, so every double survives a text round trip.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// FNV-1a 64-bit, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Provenance written at the top of every CSV output.
struct OutputHeader {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string kind;

  std::string csv_lines() const {
    std::string s = "# advlab " + kind + "\n";
    s += "# config_hash=" + config_hash + "\n";
    s += "# seed=" + std::to_string(seed) + "\n";
    return s;
  }
};

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Rows of a CSV file with '#' comment lines skipped. The first non-comment
/// row is returned as the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw IoError("csv: missing column '" + std::string(name) + "'");
  }
};

inline CsvTable parse_csv(std::string_view text, const std::string& origin = "<memory>") {
  CsvTable t;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto cells = split(s, ',');
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw IoError(origin + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                    " columns");
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw IoError(origin + ": no header row");
  return t;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_csv(ss.str(), path);
}

inline double parse_double(const std::string& s, const std::string& what = "value") {
  if (s == "nan") return std::nan("");
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("cannot parse " + what + " '" + s + "' as a number");
  }
}

inline long long parse_int(const std::string& s, const std::string& what = "value") {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("cannot parse " + what + " '" + s + "' as an integer");
  }
}

}  // namespace advlab
