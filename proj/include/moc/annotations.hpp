#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "moc/counting.hpp"
#include "moc/error.hpp"

// Point annotations as CSV lines `x,y,category`. An optional header line
// `x,y,category` may open the file; blank lines are skipped.

namespace moc {

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(trim(line.substr(start)));
      return fields;
    }
    fields.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

template <class Num>
bool parse_number(std::string_view s, Num& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline bool is_header(const std::vector<std::string_view>& f) {
  return f.size() == 3 && f[0] == "x" && f[1] == "y" && f[2] == "category";
}

}  // namespace detail

/// Parses annotation CSV. Errors name the 1-based line number.
inline std::vector<PointAnnotation> parse_annotations(std::istream& in, int categories,
                                                      const std::string& source = "<stream>") {
  std::vector<PointAnnotation> points;
  std::string line;
  int line_no = 0;
  bool seen_content = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto fields = detail::split_csv(trimmed);
    if (!seen_content && detail::is_header(fields)) {
      seen_content = true;
      continue;
    }
    seen_content = true;
    const auto where = source + ":" + std::to_string(line_no);
    if (fields.size() != 3) {
      throw FormatError(where + ": expected 3 fields `x,y,category`, got " + std::to_string(fields.size()));
    }
    PointAnnotation p;
    if (!detail::parse_number(fields[0], p.x) || !std::isfinite(p.x)) {
      throw FormatError(where + ": bad x coordinate '" + std::string(fields[0]) + "'");
    }
    if (!detail::parse_number(fields[1], p.y) || !std::isfinite(p.y)) {
      throw FormatError(where + ": bad y coordinate '" + std::string(fields[1]) + "'");
    }
    if (!detail::parse_number(fields[2], p.category)) {
      throw FormatError(where + ": bad category '" + std::string(fields[2]) + "'");
    }
    if (p.category < 0 || p.category >= categories) {
      throw FormatError(where + ": category " + std::to_string(p.category) + " outside [0, " +
                        std::to_string(categories) + ")");
    }
    points.push_back(p);
  }
  return points;
}

inline std::vector<PointAnnotation> load_annotations(const std::filesystem::path& path, int categories) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations " + path.string());
  return parse_annotations(in, categories, path.string());
}

inline void write_annotations(std::ostream& out, const std::vector<PointAnnotation>& points) {
  out << "x,y,category\n";
  char buf[64];
  for (const auto& p : points) {
    // Shortest round-trip representation.
    auto r1 = std::to_chars(buf, buf + sizeof(buf), p.x);
    out.write(buf, r1.ptr - buf);
    out << ',';
    auto r2 = std::to_chars(buf, buf + sizeof(buf), p.y);
    out.write(buf, r2.ptr - buf);
    out << ',' << p.category << '\n';
  }
}

}  // namespace moc
