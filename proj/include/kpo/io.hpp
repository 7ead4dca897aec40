#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kpo/errors.hpp"

namespace kpo {

inline constexpr std::string_view kVersion = "1.0.0";

/// Shortest round-trip decimal form (at most 17 significant digits).
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("malformed number: '" + std::string(s) + "'");
  }
  return v;
}

/// 64-bit FNV-1a, used to fingerprint configurations in file headers.
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// Comment-line header block written at the top of every emitted data file.
struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string timestamp;  // empty under deterministic output
  std::vector<std::string> extra;

  void write(std::ostream& os) const {
    os << "# kpo-sense " << kVersion << "\n";
    if (!config_hash.empty()) os << "# config_hash: " << config_hash << "\n";
    os << "# seed: " << seed << "\n";
    if (!timestamp.empty()) os << "# generated: " << timestamp << "\n";
    for (const auto& line : extra) os << "# " << line << "\n";
  }
};

inline std::ofstream open_output(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_input(const std::string& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw IoError("cannot open for reading: " + path);
  return in;
}

/// Splits one CSV line on commas (no quoting; all emitted fields are numeric).
inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace kpo
