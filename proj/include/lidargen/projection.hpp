#pragma once

// Spherical-grid projection of raw scans onto a fixed H x W image, the
// Cartesian/Polar cell representations, per-channel normalization statistics
// and the binary container used to store preprocessed grid datasets.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <vector>

#include "lidargen/errors.hpp"
#include "lidargen/scan_io.hpp"

namespace lidargen {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

using PointSet = std::vector<Point3>;

enum class Representation : std::uint8_t {
  cartesian = 0,  // channels (x, y, z)
  polar = 1,      // channels (sqrt(x^2 + y^2), z)
};

int channel_count(Representation repr);
std::string to_string(Representation repr);
Representation representation_from_string(const std::string& name);

enum class RowAssignment {
  // Split the scanner-ordered point stream into rings at azimuth
  // wrap-arounds, then map rings onto grid rows.
  ring_segmentation,
  // Bin each point by its elevation angle into H uniform bins.
  uniform_elevation,
};

struct GridConfig {
  int height = 40;
  int width = 256;
  RowAssignment rows = RowAssignment::ring_segmentation;
  // Elevation span for uniform_elevation binning, degrees, top row first.
  double elevation_max_deg = kElevationMaxDeg;
  double elevation_min_deg = kElevationMinDeg;
};

// Per-channel normalization statistics, computed over occupied cells only.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  double clip_range = 80.0;

  std::string to_json() const;
  static NormStats from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static NormStats load(const std::filesystem::path& path);
};

// A projected scan: `channels()` float values per cell plus an occupancy
// mask. Unoccupied cells hold zeros in every channel. Values are raw metric
// coordinates unless `normalized` is set, in which case they live in [-1, 1]
// and `stats` records the transform that produced them.
struct GridScan {
  Representation representation = Representation::cartesian;
  int height = 0;
  int width = 0;
  std::vector<float> data;          // height * width * channels(), cell-major
  std::vector<std::uint8_t> mask;   // height * width, 1 = occupied
  bool normalized = false;
  std::shared_ptr<const NormStats> stats;  // set while normalized

  int channels() const { return channel_count(representation); }
  std::size_t cell_count() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  float& at(int row, int col, int channel) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels() +
                channel];
  }
  float at(int row, int col, int channel) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels() +
                channel];
  }
  bool occupied(int row, int col) const {
    return mask[static_cast<std::size_t>(row) * width + col] != 0;
  }
  std::size_t occupied_count() const;
};

GridScan make_empty_grid(Representation repr, int height, int width);

// Projects a raw scan onto the grid: each point lands in the column given by
// its azimuth bin and the row given by the configured row assignment; each
// occupied cell stores the arithmetic mean of the points that fell in it.
// Runs in O(N + H*W).
GridScan project(const RawScan& scan, const GridConfig& config);

// Converts an unnormalized Cartesian grid to the Polar representation
// (planar range, height) cell by cell. Occupancy is preserved.
GridScan to_polar(const GridScan& grid);

// Reconstructs the point set of the occupied cells. Polar grids recover the
// azimuth from the cell's column centre. Normalized grids are denormalized
// first using `stats` if given, else the grid's attached stats; a normalized
// grid with neither throws precondition_error.
PointSet unproject(const GridScan& grid, const NormStats* stats = nullptr);

// Streaming accumulator for NormStats; mergeable so stats can be computed as
// a parallel reduction over shards of the dataset.
class StatsAccumulator {
 public:
  explicit StatsAccumulator(double clip_range = 80.0);

  void add(const GridScan& grid);
  void merge(const StatsAccumulator& other);
  // Throws empty_dataset_error when no occupied cell was ever added.
  NormStats finalize() const;

 private:
  double clip_range_;
  int channels_ = -1;
  std::vector<double> count_;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

NormStats compute_stats(std::span<const GridScan> grids,
                        double clip_range = 80.0);

enum class NormDirection { forward, inverse };

// Maps occupied-cell values to [-1, 1] (forward: subtract mean, divide by
// std, clamp to +-4 standard deviations, divide by 4) or back (inverse).
// Exact inverse for values whose z-score magnitude is at most 4. Unoccupied
// cells stay zero; the mask is untouched.
GridScan normalize(const GridScan& grid, const NormStats& stats,
                   NormDirection direction);

// --- Grid container ---------------------------------------------------------
//
// Binary layout: magic "LGRD", u32 version (1), u32 height/width/channels,
// u64 count, u8 representation, u8 normalized, then `count` records of
// H*W*C float32 (little-endian) followed by H*W occupancy bytes.

class GridWriter {
 public:
  GridWriter(const std::filesystem::path& path, Representation repr,
             int height, int width, bool normalized);
  ~GridWriter();

  GridWriter(const GridWriter&) = delete;
  GridWriter& operator=(const GridWriter&) = delete;

  void append(const GridScan& grid);
  // Patches the record count into the header. Called by the destructor if
  // not invoked explicitly.
  void close();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
  Representation repr_;
  int height_;
  int width_;
  bool normalized_;
  std::uint64_t count_ = 0;
  bool closed_ = false;
};

class GridReader {
 public:
  explicit GridReader(const std::filesystem::path& path);

  std::uint64_t size() const { return count_; }
  Representation representation() const { return repr_; }
  int height() const { return height_; }
  int width() const { return width_; }
  bool normalized() const { return normalized_; }

  GridScan read(std::uint64_t index);
  std::vector<GridScan> read_all();

 private:
  std::ifstream in_;
  std::filesystem::path path_;
  Representation repr_ = Representation::cartesian;
  int height_ = 0;
  int width_ = 0;
  bool normalized_ = false;
  std::uint64_t count_ = 0;
  std::uint64_t header_bytes_ = 0;
};

}  // namespace lidargen
