#pragma once

#include <filesystem>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

namespace lidargen {

// Writes CSV with full round-trip precision for doubles so identical runs
// produce byte-identical files.
class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void header(std::initializer_list<std::string> columns);

  CsvWriter& cell(const std::string& value);
  CsvWriter& cell(double value);
  CsvWriter& cell(int value);
  CsvWriter& cell(long long value);
  void end_row();

 private:
  std::ostringstream buffer_;
  std::filesystem::path path_;
  bool row_open_ = false;
};

std::string format_double(double value);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Hand-rolled static line chart (800x500 SVG): axes, ticks, legend, one
// polyline per series.  Degenerate ranges are padded so the file is always
// valid.
void write_svg_chart(const std::filesystem::path& path,
                     const std::string& title, const std::string& x_label,
                     const std::string& y_label,
                     const std::vector<Series>& series);

}  // namespace lidargen
