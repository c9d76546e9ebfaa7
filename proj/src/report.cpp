#include "lidargen/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lidargen {

namespace {

void flush_to(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace

std::string format_double(double value) {
  std::ostringstream os;
  os << std::setprecision(17) << value;
  return os.str();
}

CsvWriter::CsvWriter(const std::filesystem::path& path) : path_(path) {}

CsvWriter::~CsvWriter() {
  if (row_open_) buffer_ << '\n';
  try {
    flush_to(path_, buffer_.str());
  } catch (...) {
    // Destructors must not throw; a failed flush surfaces as a missing file.
  }
}

void CsvWriter::header(std::initializer_list<std::string> columns) {
  bool first = true;
  for (const auto& c : columns) {
    if (!first) buffer_ << ',';
    buffer_ << c;
    first = false;
  }
  buffer_ << '\n';
}

CsvWriter& CsvWriter::cell(const std::string& value) {
  if (row_open_) buffer_ << ',';
  buffer_ << value;
  row_open_ = true;
  return *this;
}

CsvWriter& CsvWriter::cell(double value) { return cell(format_double(value)); }

CsvWriter& CsvWriter::cell(int value) { return cell(std::to_string(value)); }

CsvWriter& CsvWriter::cell(long long value) {
  return cell(std::to_string(value));
}

void CsvWriter::end_row() {
  buffer_ << '\n';
  row_open_ = false;
}

namespace {

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

Range span_of(const std::vector<Series>& series, bool use_x) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& s : series) {
    const auto& v = use_x ? s.x : s.y;
    for (double d : v) {
      if (!std::isfinite(d)) continue;
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
  }
  if (!(lo <= hi)) return {0.0, 1.0};
  if (lo == hi) {
    const double pad = (lo == 0.0) ? 1.0 : std::abs(lo) * 0.1;
    return {lo - pad, hi + pad};
  }
  return {lo, hi};
}

std::string trim_label(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                    "#9467bd", "#ff7f0e", "#8c564b"};

}  // namespace

void write_svg_chart(const std::filesystem::path& path,
                     const std::string& title, const std::string& x_label,
                     const std::string& y_label,
                     const std::vector<Series>& series) {
  constexpr int kWidth = 800;
  constexpr int kHeight = 500;
  constexpr double kLeft = 70.0;
  constexpr double kRight = 770.0;
  constexpr double kTop = 50.0;
  constexpr double kBottom = 440.0;

  const Range xr = span_of(series, true);
  const Range yr = span_of(series, false);
  const auto sx = [&](double v) {
    return kLeft + (v - xr.lo) / (xr.hi - xr.lo) * (kRight - kLeft);
  };
  const auto sy = [&](double v) {
    return kBottom - (v - yr.lo) / (yr.hi - yr.lo) * (kBottom - kTop);
  };

  std::ostringstream svg;
  svg << std::setprecision(8);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
      << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << ' '
      << kHeight << "\">\n";
  svg << "<rect width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kWidth / 2 << "\" y=\"28\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"18\">"
      << title << "</text>\n";

  // Axes.
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kBottom << "\" x2=\""
      << kRight << "\" y2=\"" << kBottom
      << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft
      << "\" y2=\"" << kBottom << "\" stroke=\"black\" stroke-width=\"1\"/>\n";

  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    const double t = static_cast<double>(i) / kTicks;
    const double xv = xr.lo + t * (xr.hi - xr.lo);
    const double yv = yr.lo + t * (yr.hi - yr.lo);
    const double px = sx(xv);
    const double py = sy(yv);
    svg << "<line x1=\"" << px << "\" y1=\"" << kBottom << "\" x2=\"" << px
        << "\" y2=\"" << (kBottom + 5)
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << px << "\" y=\"" << (kBottom + 20)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << trim_label(xv) << "</text>\n";
    svg << "<line x1=\"" << (kLeft - 5) << "\" y1=\"" << py << "\" x2=\""
        << kLeft << "\" y2=\"" << py
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << (kLeft - 9) << "\" y=\"" << (py + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << trim_label(yv) << "</text>\n";
  }

  svg << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"" << (kHeight - 18)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\">"
      << x_label << "</text>\n";
  svg << "<text x=\"20\" y=\"" << (kTop + kBottom) / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\" transform=\"rotate(-90 20 "
      << (kTop + kBottom) / 2 << ")\">" << y_label << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      svg << sx(s.x[i]) << ',' << sy(s.y[i]) << ' ';
    }
    svg << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(si);
    svg << "<line x1=\"" << (kRight - 140) << "\" y1=\"" << ly << "\" x2=\""
        << (kRight - 118) << "\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << (kRight - 112) << "\" y=\"" << (ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << s.label
        << "</text>\n";
  }

  svg << "</svg>\n";
  flush_to(path, svg.str());
}

}  // namespace lidargen
