#include "attnhess/io.hpp"

#include "attnhess/tensor_ops.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <utility>

namespace attnhess::io {

std::string format_double(double value) {
  char buffer[64];
  const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, result.ptr);
}

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header.size()) throw ShapeError("csv: row width does not match header");
  rows.push_back(std::move(row));
}

std::string CsvTable::to_string() const {
  std::ostringstream out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out << ',';
    out << header[i];
  }
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << row[i];
    }
    out << '\n';
  }
  return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw ValidationError("cannot open for writing: " + path);
  file << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw ValidationError("cannot open for reading: " + path);
  std::ostringstream out;
  out << file.rdbuf();
  return out.str();
}

void append_log_histogram(CsvTable& csv, const std::string& label,
                          const std::vector<double>& values) {
  if (values.empty()) return;
  const double lo = values.front();
  const double hi = values.back();
  if (lo <= 0) throw ValidationError("append_log_histogram: values must be positive");
  if (lo == hi) {
    csv.add_row({label, "0", format_double(lo), format_double(hi), std::to_string(values.size())});
    return;
  }
  constexpr int kBins = 64;
  const double log_lo = std::log10(lo), log_hi = std::log10(hi);
  std::vector<std::size_t> counts(kBins, 0);
  for (double v : values) {
    int bin = static_cast<int>((std::log10(v) - log_lo) / (log_hi - log_lo) * kBins);
    bin = std::clamp(bin, 0, kBins - 1);
    ++counts[static_cast<std::size_t>(bin)];
  }
  for (int b = 0; b < kBins; ++b) {
    const double bin_lo = std::pow(10.0, log_lo + (log_hi - log_lo) * b / kBins);
    const double bin_hi = std::pow(10.0, log_lo + (log_hi - log_lo) * (b + 1) / kBins);
    csv.add_row({label, std::to_string(b), format_double(bin_lo), format_double(bin_hi),
                 std::to_string(counts[static_cast<std::size_t>(b)])});
  }
}

namespace {

struct AxisScale {
  double lo = 0, hi = 1;
  bool log = false;

  double to_unit(double v) const {
    const double a = log ? std::log10(v) : v;
    const double l = log ? std::log10(lo) : lo;
    const double h = log ? std::log10(hi) : hi;
    if (h == l) return 0.5;
    return (a - l) / (h - l);
  }
};

std::string color_for(std::size_t i) {
  static const char* palette[] = {"#4363d8", "#e6194b", "#3cb44b", "#f58231",
                                  "#911eb4", "#46f0f0", "#808000", "#000075"};
  return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

}  // namespace

std::string render_line_chart(const std::string& title, const std::vector<SvgSeries>& series,
                              bool log_x, bool log_y) {
  const double width = 720, height = 480;
  const double ml = 70, mr = 160, mt = 40, mb = 50;

  AxisScale xs{0, 1, log_x}, ys{0, 1, log_y};
  bool have_point = false;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double x = s.x[i], y = s.y[i];
      if ((log_x && x <= 0) || (log_y && y <= 0)) continue;
      if (!have_point) {
        xs.lo = xs.hi = x;
        ys.lo = ys.hi = y;
        have_point = true;
      } else {
        xs.lo = std::min(xs.lo, x);
        xs.hi = std::max(xs.hi, x);
        ys.lo = std::min(ys.lo, y);
        ys.hi = std::max(ys.hi, y);
      }
    }
  }

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"16\">"
      << title << "</text>\n";
  svg << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << width - ml - mr << "\" height=\""
      << height - mt - mb << "\" fill=\"none\" stroke=\"#444\"/>\n";

  const auto px = [&](double v) { return ml + xs.to_unit(v) * (width - ml - mr); };
  const auto py = [&](double v) { return height - mb - ys.to_unit(v) * (height - mt - mb); };

  if (have_point) {
    for (std::size_t si = 0; si < series.size(); ++si) {
      const auto& s = series[si];
      std::ostringstream points;
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if ((log_x && s.x[i] <= 0) || (log_y && s.y[i] <= 0)) continue;
        points << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
      }
      svg << "<polyline fill=\"none\" stroke=\"" << color_for(si)
          << "\" stroke-width=\"1.5\" points=\"" << points.str() << "\"/>\n";
      const double ly = mt + 16.0 * (static_cast<double>(si) + 1);
      svg << "<line x1=\"" << width - mr + 10 << "\" y1=\"" << ly << "\" x2=\"" << width - mr + 30
          << "\" y2=\"" << ly << "\" stroke=\"" << color_for(si) << "\" stroke-width=\"2\"/>\n";
      svg << "<text x=\"" << width - mr + 36 << "\" y=\"" << ly + 4
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.label << "</text>\n";
    }
    svg << "<text x=\"" << ml << "\" y=\"" << height - mb + 18
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << format_double(xs.lo)
        << (log_x ? " (log)" : "") << "</text>\n";
    svg << "<text x=\"" << width - mr << "\" y=\"" << height - mb + 18
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << format_double(xs.hi) << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << height - mb
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << format_double(ys.lo) << (log_y ? " (log)" : "") << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 10
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << format_double(ys.hi) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace attnhess::io
