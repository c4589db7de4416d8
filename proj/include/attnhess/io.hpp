#pragma once

#include <string>
#include <vector>

// CSV and SVG emission. CSV cells hold UTF-8 text, '.' decimal separator,
// and doubles formatted with shortest round-trip precision so re-parsing
// reproduces the exact bits.

namespace attnhess::io {

/// Shortest decimal string that round-trips the double exactly.
std::string format_double(double value);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row);
  std::string to_string() const;
};

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

/// Appends rows (label, bin, lo, hi, count) binning `values` into 64
/// log-spaced bins spanning their range. Values must be positive and sorted.
/// Degenerate inputs collapse gracefully: no rows when empty, a single bin
/// when all values coincide.
void append_log_histogram(CsvTable& csv, const std::string& label,
                          const std::vector<double>& values);

/// One data series of an SVG line chart.
struct SvgSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Self-contained SVG line chart; log-log axes when requested (non-positive
/// points are dropped from log axes).
std::string render_line_chart(const std::string& title, const std::vector<SvgSeries>& series,
                              bool log_x, bool log_y);

}  // namespace attnhess::io
