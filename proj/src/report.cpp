#include "ibgc/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>

#include "ibgc/error.hpp"

namespace ibgc {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  return out;
}

void write_pgm(const std::string& path, const std::vector<double>& values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw usage_error("write_pgm: size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot write " + path);
  os << "P5\n" << width << ' ' << height << "\n255\n";
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  for (double v : values) {
    const double t = range > 0 ? (v - *lo) / range : 0.0;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  if (!os) throw data_error("failed writing " + path);
}

void write_text(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot write " + path);
  os << text;
  if (!os) throw data_error("failed writing " + path);
}

}  // namespace ibgc
