#include "lidargen/projection.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace lidargen {

int channel_count(Representation repr) {
  switch (repr) {
    case Representation::cartesian: return 3;
    case Representation::polar: return 2;
  }
  throw precondition_error("unknown representation");
}

std::string to_string(Representation repr) {
  switch (repr) {
    case Representation::cartesian: return "cartesian";
    case Representation::polar: return "polar";
  }
  throw precondition_error("unknown representation");
}

Representation representation_from_string(const std::string& name) {
  if (name == "cartesian") return Representation::cartesian;
  if (name == "polar") return Representation::polar;
  throw malformed_input_error("unknown representation '" + name + "'");
}

std::size_t GridScan::occupied_count() const {
  std::size_t n = 0;
  for (std::uint8_t m : mask) n += m != 0;
  return n;
}

GridScan make_empty_grid(Representation repr, int height, int width) {
  if (height < 1 || width < 1) {
    throw precondition_error("grid dimensions must be positive");
  }
  GridScan g;
  g.representation = repr;
  g.height = height;
  g.width = width;
  g.data.assign(static_cast<std::size_t>(height) * width * channel_count(repr),
                0.0f);
  g.mask.assign(static_cast<std::size_t>(height) * width, 0);
  return g;
}

namespace {

// Azimuth in [0, 2*pi): counter-clockwise angle of (x, y) from the +x axis.
inline double azimuth_of(double x, double y) {
  double az = std::atan2(y, x);
  if (az < 0.0) az += 2.0 * std::numbers::pi;
  return az;
}

inline int azimuth_column(double az, int width) {
  const int col = static_cast<int>(az * static_cast<double>(width) /
                                   (2.0 * std::numbers::pi));
  return std::min(col, width - 1);  // guard az == 2*pi after rounding
}

}  // namespace

GridScan project(const RawScan& scan, const GridConfig& config) {
  if (config.height < 1 || config.width < 1) {
    throw precondition_error("grid dimensions must be positive");
  }
  if (config.rows == RowAssignment::uniform_elevation &&
      !(config.elevation_max_deg > config.elevation_min_deg)) {
    throw precondition_error("elevation span must be non-empty");
  }

  const int h = config.height;
  const int w = config.width;
  GridScan grid = make_empty_grid(Representation::cartesian, h, w);

  const std::size_t n = scan.points.size();
  std::vector<double> azimuths(n);
  for (std::size_t i = 0; i < n; ++i) {
    azimuths[i] = azimuth_of(scan.points[i].x, scan.points[i].y);
  }

  // Row index per point.
  std::vector<int> rows(n);
  if (config.rows == RowAssignment::ring_segmentation) {
    // One pass to segment rings at azimuth wrap-arounds (the sweep restarts,
    // so the azimuth drops by more than pi), a second to map ring -> row.
    std::vector<int> ring_of(n);
    int ring = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && azimuths[i] + std::numbers::pi < azimuths[i - 1]) ++ring;
      ring_of[i] = ring;
    }
    const int n_rings = n == 0 ? 0 : ring + 1;
    for (std::size_t i = 0; i < n; ++i) {
      rows[i] = n_rings <= h
                    ? ring_of[i]
                    : static_cast<int>(static_cast<std::int64_t>(ring_of[i]) *
                                       h / n_rings);
    }
  } else {
    constexpr double kDeg = std::numbers::pi / 180.0;
    const double top = config.elevation_max_deg * kDeg;
    const double bottom = config.elevation_min_deg * kDeg;
    for (std::size_t i = 0; i < n; ++i) {
      const LidarPoint& p = scan.points[i];
      const double planar = std::hypot(static_cast<double>(p.x),
                                       static_cast<double>(p.y));
      const double elev = std::atan2(static_cast<double>(p.z), planar);
      const double frac = (top - elev) / (top - bottom);
      rows[i] = std::clamp(static_cast<int>(frac * h), 0, h - 1);
    }
  }

  // Accumulate per-cell sums in double, then finalize means.
  std::vector<double> sums(grid.data.size(), 0.0);
  std::vector<std::uint32_t> counts(grid.cell_count(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int col = azimuth_column(azimuths[i], w);
    const std::size_t cell = static_cast<std::size_t>(rows[i]) * w + col;
    sums[cell * 3 + 0] += scan.points[i].x;
    sums[cell * 3 + 1] += scan.points[i].y;
    sums[cell * 3 + 2] += scan.points[i].z;
    ++counts[cell];
  }
  for (std::size_t cell = 0; cell < counts.size(); ++cell) {
    if (counts[cell] == 0) continue;
    grid.mask[cell] = 1;
    const double inv = 1.0 / counts[cell];
    for (int ch = 0; ch < 3; ++ch) {
      grid.data[cell * 3 + ch] =
          static_cast<float>(sums[cell * 3 + ch] * inv);
    }
  }
  return grid;
}

GridScan to_polar(const GridScan& grid) {
  if (grid.representation != Representation::cartesian) {
    throw precondition_error("to_polar expects a Cartesian grid");
  }
  if (grid.normalized) {
    throw precondition_error("to_polar expects an unnormalized grid");
  }
  GridScan out = make_empty_grid(Representation::polar, grid.height,
                                 grid.width);
  out.mask = grid.mask;
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      if (!grid.occupied(r, c)) continue;
      const double x = grid.at(r, c, 0);
      const double y = grid.at(r, c, 1);
      out.at(r, c, 0) = static_cast<float>(std::hypot(x, y));
      out.at(r, c, 1) = grid.at(r, c, 2);
    }
  }
  return out;
}

PointSet unproject(const GridScan& grid, const NormStats* stats) {
  const GridScan* source = &grid;
  GridScan denorm;
  if (grid.normalized) {
    const NormStats* s = stats ? stats : grid.stats.get();
    if (s == nullptr) {
      throw precondition_error(
          "unproject needs NormStats to undo normalization");
    }
    denorm = normalize(grid, *s, NormDirection::inverse);
    source = &denorm;
  }

  PointSet points;
  points.reserve(source->occupied_count());
  const double bin = 2.0 * std::numbers::pi / source->width;
  for (int r = 0; r < source->height; ++r) {
    for (int c = 0; c < source->width; ++c) {
      if (!source->occupied(r, c)) continue;
      if (source->representation == Representation::cartesian) {
        points.push_back({source->at(r, c, 0), source->at(r, c, 1),
                          source->at(r, c, 2)});
      } else {
        // The column only pins azimuth down to its bin; use the bin centre.
        const double az = (static_cast<double>(c) + 0.5) * bin;
        const double d = source->at(r, c, 0);
        points.push_back({d * std::cos(az), d * std::sin(az),
                          source->at(r, c, 1)});
      }
    }
  }
  return points;
}

StatsAccumulator::StatsAccumulator(double clip_range)
    : clip_range_(clip_range) {
  if (!(clip_range > 0.0)) {
    throw precondition_error("clip range must be positive");
  }
}

void StatsAccumulator::add(const GridScan& grid) {
  if (grid.normalized) {
    throw precondition_error("stats are computed over unnormalized grids");
  }
  const int ch = grid.channels();
  if (channels_ == -1) {
    channels_ = ch;
    count_.assign(ch, 0.0);
    mean_.assign(ch, 0.0);
    m2_.assign(ch, 0.0);
  } else if (channels_ != ch) {
    throw precondition_error("mixed channel counts in stats stream");
  }
  for (std::size_t cell = 0; cell < grid.cell_count(); ++cell) {
    if (grid.mask[cell] == 0) continue;
    for (int k = 0; k < ch; ++k) {
      const double v = std::clamp(
          static_cast<double>(grid.data[cell * ch + k]), -clip_range_,
          clip_range_);
      // Welford update.
      count_[k] += 1.0;
      const double delta = v - mean_[k];
      mean_[k] += delta / count_[k];
      m2_[k] += delta * (v - mean_[k]);
    }
  }
}

void StatsAccumulator::merge(const StatsAccumulator& other) {
  if (other.channels_ == -1) return;
  if (channels_ == -1) {
    *this = other;
    return;
  }
  if (channels_ != other.channels_) {
    throw precondition_error("cannot merge stats with different channels");
  }
  for (int k = 0; k < channels_; ++k) {
    const double na = count_[k];
    const double nb = other.count_[k];
    if (nb == 0.0) continue;
    if (na == 0.0) {
      count_[k] = other.count_[k];
      mean_[k] = other.mean_[k];
      m2_[k] = other.m2_[k];
      continue;
    }
    // Chan et al. pairwise combination of means and M2 moments.
    const double delta = other.mean_[k] - mean_[k];
    const double n = na + nb;
    mean_[k] += delta * nb / n;
    m2_[k] += other.m2_[k] + delta * delta * na * nb / n;
    count_[k] = n;
  }
}

NormStats StatsAccumulator::finalize() const {
  if (channels_ == -1 || count_[0] == 0.0) {
    throw empty_dataset_error("no occupied cells in stats stream");
  }
  NormStats stats;
  stats.clip_range = clip_range_;
  stats.mean.resize(channels_);
  stats.std.resize(channels_);
  for (int k = 0; k < channels_; ++k) {
    stats.mean[k] = mean_[k];
    stats.std[k] = std::max(std::sqrt(m2_[k] / count_[k]), 1e-6);
  }
  return stats;
}

NormStats compute_stats(std::span<const GridScan> grids, double clip_range) {
  StatsAccumulator acc(clip_range);
  for (const GridScan& g : grids) acc.add(g);
  return acc.finalize();
}

std::string NormStats::to_json() const {
  nlohmann::json j;
  j["mean"] = mean;
  j["std"] = std;
  j["clip_range"] = clip_range;
  return j.dump(2);
}

NormStats NormStats::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw malformed_input_error(std::string("bad stats JSON: ") + ex.what());
  }
  NormStats stats;
  try {
    stats.mean = j.at("mean").get<std::vector<double>>();
    stats.std = j.at("std").get<std::vector<double>>();
    stats.clip_range = j.at("clip_range").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw malformed_input_error(std::string("bad stats fields: ") + ex.what());
  }
  if (stats.mean.size() != stats.std.size() || stats.mean.empty()) {
    throw malformed_input_error("stats mean/std must be equal-length");
  }
  for (double s : stats.std) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw malformed_input_error("stats std values must be positive");
    }
  }
  if (!(stats.clip_range > 0.0)) {
    throw malformed_input_error("stats clip_range must be positive");
  }
  return stats;
}

void NormStats::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw malformed_input_error("cannot open " + path.string() +
                                " for writing");
  }
  out << to_json() << '\n';
}

NormStats NormStats::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw malformed_input_error("cannot open stats file " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

GridScan normalize(const GridScan& grid, const NormStats& stats,
                   NormDirection direction) {
  const int ch = grid.channels();
  if (static_cast<int>(stats.mean.size()) != ch) {
    throw precondition_error("stats channel count does not match grid");
  }
  if (direction == NormDirection::forward && grid.normalized) {
    throw precondition_error("grid is already normalized");
  }
  if (direction == NormDirection::inverse && !grid.normalized) {
    throw precondition_error("grid is not normalized");
  }

  GridScan out = grid;
  for (std::size_t cell = 0; cell < grid.cell_count(); ++cell) {
    if (grid.mask[cell] == 0) continue;
    for (int k = 0; k < ch; ++k) {
      const double v = grid.data[cell * ch + k];
      double r;
      if (direction == NormDirection::forward) {
        // z-score, clamped to +-4 sigma, squeezed into [-1, 1] so that a
        // tanh output head can represent the whole range.
        const double z = (v - stats.mean[k]) / stats.std[k];
        r = std::clamp(z, -4.0, 4.0) / 4.0;
      } else {
        r = v * 4.0 * stats.std[k] + stats.mean[k];
      }
      out.data[cell * ch + k] = static_cast<float>(r);
    }
  }
  if (direction == NormDirection::forward) {
    out.normalized = true;
    out.stats = std::make_shared<NormStats>(stats);
  } else {
    out.normalized = false;
    out.stats.reset();
  }
  return out;
}

// --- Grid container ---------------------------------------------------------

namespace {

constexpr char kGridMagic[4] = {'L', 'G', 'R', 'D'};
constexpr std::uint32_t kGridVersion = 1;
// magic + version + height + width + channels + count + repr + normalized
constexpr std::uint64_t kGridHeaderBytes = 4 + 4 + 4 + 4 + 4 + 8 + 1 + 1;
constexpr std::uint64_t kCountOffset = 4 + 4 + 4 + 4 + 4;

void put_u32(std::ostream& out, std::uint32_t v) {
  std::uint8_t b[4] = {static_cast<std::uint8_t>(v & 0xff),
                       static_cast<std::uint8_t>((v >> 8) & 0xff),
                       static_cast<std::uint8_t>((v >> 16) & 0xff),
                       static_cast<std::uint8_t>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) {
    b[i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in) {
  std::uint8_t b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) |
         static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 |
         static_cast<std::uint32_t>(b[3]) << 24;
}

std::uint64_t get_u64(std::istream& in) {
  std::uint8_t b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  }
  return v;
}

void put_f32_block(std::ostream& out, const std::vector<float>& values) {
  static_assert(std::endian::native == std::endian::little,
                "float block I/O assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
}

void get_f32_block(std::istream& in, std::vector<float>& values) {
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
}

}  // namespace

GridWriter::GridWriter(const std::filesystem::path& path, Representation repr,
                       int height, int width, bool normalized)
    : out_(path, std::ios::binary | std::ios::trunc),
      path_(path),
      repr_(repr),
      height_(height),
      width_(width),
      normalized_(normalized) {
  if (height < 1 || width < 1) {
    throw precondition_error("grid dimensions must be positive");
  }
  if (!out_) {
    throw malformed_input_error("cannot open " + path.string() +
                                " for writing");
  }
  out_.write(kGridMagic, 4);
  put_u32(out_, kGridVersion);
  put_u32(out_, static_cast<std::uint32_t>(height_));
  put_u32(out_, static_cast<std::uint32_t>(width_));
  put_u32(out_, static_cast<std::uint32_t>(channel_count(repr_)));
  put_u64(out_, 0);  // count, patched on close
  out_.put(static_cast<char>(static_cast<std::uint8_t>(repr_)));
  out_.put(static_cast<char>(normalized_ ? 1 : 0));
}

GridWriter::~GridWriter() {
  try {
    close();
  } catch (...) {
    // Destructor must not throw; an explicit close() reports errors.
  }
}

void GridWriter::append(const GridScan& grid) {
  if (closed_) {
    throw precondition_error("append to a closed grid writer");
  }
  if (grid.representation != repr_ || grid.height != height_ ||
      grid.width != width_ || grid.normalized != normalized_) {
    throw precondition_error(
        "grid does not match the container header of " + path_.string());
  }
  put_f32_block(out_, grid.data);
  out_.write(reinterpret_cast<const char*>(grid.mask.data()),
             static_cast<std::streamsize>(grid.mask.size()));
  ++count_;
}

void GridWriter::close() {
  if (closed_) return;
  closed_ = true;
  out_.seekp(static_cast<std::streamoff>(kCountOffset));
  put_u64(out_, count_);
  out_.flush();
  if (!out_) {
    throw malformed_input_error("failed to finalize " + path_.string());
  }
  out_.close();
}

GridReader::GridReader(const std::filesystem::path& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) {
    throw malformed_input_error("cannot open grid file " + path.string());
  }
  char magic[4];
  in_.read(magic, 4);
  if (!in_ || std::memcmp(magic, kGridMagic, 4) != 0) {
    throw malformed_input_error(path.string() + " is not a grid container");
  }
  const std::uint32_t version = get_u32(in_);
  if (version != kGridVersion) {
    throw malformed_input_error("unsupported grid container version " +
                                std::to_string(version));
  }
  height_ = static_cast<int>(get_u32(in_));
  width_ = static_cast<int>(get_u32(in_));
  const std::uint32_t channels = get_u32(in_);
  count_ = get_u64(in_);
  const int repr_raw = in_.get();
  const int norm_raw = in_.get();
  if (!in_ || repr_raw < 0 || repr_raw > 1 || norm_raw < 0 || norm_raw > 1) {
    throw malformed_input_error("truncated or invalid grid header in " +
                                path.string());
  }
  repr_ = static_cast<Representation>(repr_raw);
  normalized_ = norm_raw != 0;
  if (height_ < 1 || width_ < 1 ||
      channels != static_cast<std::uint32_t>(channel_count(repr_))) {
    throw malformed_input_error("inconsistent grid header in " +
                                path.string());
  }
  header_bytes_ = kGridHeaderBytes;

  const std::uint64_t cell = static_cast<std::uint64_t>(height_) * width_;
  const std::uint64_t record = cell * channels * 4 + cell;
  const std::uint64_t expected = header_bytes_ + count_ * record;
  if (std::filesystem::file_size(path) != expected) {
    throw malformed_input_error("grid container " + path.string() +
                                " has unexpected size");
  }
}

GridScan GridReader::read(std::uint64_t index) {
  if (index >= count_) {
    throw precondition_error("grid index " + std::to_string(index) +
                             " out of range");
  }
  GridScan grid = make_empty_grid(repr_, height_, width_);
  grid.normalized = normalized_;
  const std::uint64_t record =
      grid.data.size() * 4 + grid.mask.size();
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(header_bytes_ + index * record));
  get_f32_block(in_, grid.data);
  in_.read(reinterpret_cast<char*>(grid.mask.data()),
           static_cast<std::streamsize>(grid.mask.size()));
  if (!in_) {
    throw corrupt_record_error("short read of grid record " +
                               std::to_string(index) + " in " +
                               path_.string(),
                               index);
  }
  for (std::size_t i = 0; i < grid.data.size(); ++i) {
    if (!std::isfinite(grid.data[i])) {
      throw corrupt_record_error("non-finite cell value in grid record " +
                                 std::to_string(index),
                                 index);
    }
  }
  return grid;
}

std::vector<GridScan> GridReader::read_all() {
  std::vector<GridScan> grids;
  grids.reserve(count_);
  for (std::uint64_t i = 0; i < count_; ++i) grids.push_back(read(i));
  return grids;
}

}  // namespace lidargen
