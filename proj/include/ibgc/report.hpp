#pragma once

// Small helpers for the CSV reports and image dumps.

#include <string>
#include <vector>

namespace ibgc {

/// Shortest decimal text that round-trips to the same double; "inf", "-inf",
/// "nan" for non-finite values.
std::string format_double(double v);

/// RFC 4180 field quoting (only when needed).
std::string csv_field(const std::string& s);
std::string csv_row(const std::vector<std::string>& fields);

/// Binary PGM (P5) with per-image min/max normalization to 0..255.
void write_pgm(const std::string& path, const std::vector<double>& values, std::size_t height, std::size_t width);

/// Writes text to a file or, for path "-", to stdout.
void write_text(const std::string& path, const std::string& text);

}  // namespace ibgc
