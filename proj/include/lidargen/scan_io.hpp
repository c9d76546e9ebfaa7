#pragma once

// Raw lidar scan I/O: the 16-byte-per-point binary scan format used by the
// KITTI tooling ecosystem, dataset manifests with sequence-level splits, and
// an analytic scene ray-caster that synthesizes scanner-ordered scans for
// tests and offline experiments.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lidargen/errors.hpp"

namespace lidargen {

struct LidarPoint {
  float x = 0.0f;
  float y = 0.0f;
  float z = 0.0f;
  float intensity = 0.0f;

  bool operator==(const LidarPoint&) const = default;
};

struct RawScan {
  std::vector<LidarPoint> points;

  bool operator==(const RawScan&) const = default;
};

// Decodes a scan stored as consecutive 16-byte records of four little-endian
// float32 values (x, y, z, intensity). Throws malformed_input_error when the
// byte count is not a multiple of 16 and corrupt_record_error when a record
// holds non-finite values.
RawScan parse_velodyne_bin(std::span<const std::uint8_t> bytes);

// Inverse of parse_velodyne_bin. Throws invalid_scan_error on non-finite
// coordinates so that broken scans never reach disk.
std::vector<std::uint8_t> serialize_velodyne_bin(const RawScan& scan);

RawScan load_scan(const std::filesystem::path& path);
void save_scan(const std::filesystem::path& path, const RawScan& scan);

enum class Split { train, val, test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct ManifestEntry {
  std::string path;   // scan file, relative to the dataset root
  int frame = 0;      // frame index parsed from the file name
  Split split = Split::train;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  int subsample_factor = 1;
  std::vector<ManifestEntry> entries;

  bool operator==(const DatasetManifest&) const = default;

  std::vector<ManifestEntry> split_entries(Split split) const;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

// Walks `root` for *.bin scan files grouped into sequences by parent
// directory, keeps every subsample_factor-th frame of each sequence, and
// assigns whole sequences to train/val/test so that the realized frame
// counts track `fractions` (which must be non-negative and sum to 1).
// The assignment is a pure function of the directory listing, the fractions,
// the factor and the seed. Throws empty_dataset_error when no scan files are
// found.
DatasetManifest build_manifest(const std::filesystem::path& root,
                               const std::array<double, 3>& fractions,
                               int subsample_factor, std::uint64_t seed);

// Axis-aligned box used by the synthetic scene generator.
struct SceneBox {
  std::array<double, 3> center{0.0, 0.0, 0.0};
  std::array<double, 3> half_extents{1.0, 1.0, 1.0};

  bool operator==(const SceneBox&) const = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  double ground_height = -2.0;     // z of the ground plane, metres
  std::vector<SceneBox> boxes;
  double max_range = 80.0;         // hits beyond this are discarded

  bool operator==(const SceneSpec&) const = default;
};

// Draws a random scene: ground plane plus a handful of boxes scattered
// around the origin, none of which contain the sensor.
SceneSpec random_scene(std::uint64_t seed, int n_boxes = 6,
                       double max_range = 80.0);

// Vertical field of view of the reference 64-beam spinning scanner.
inline constexpr double kElevationMinDeg = -24.8;
inline constexpr double kElevationMaxDeg = 2.0;

// Casts rows x cols rays from the origin (elevation sweeping top row = +2.0
// deg down to -24.8 deg, azimuth sweeping 0..360 deg left-to-right per row
// at uniform bin-centre angles) and keeps the nearest ground/box hit within
// max_range. Points are emitted row-major in (elevation row, azimuth) order,
// mimicking native scanner order. Throws precondition_error on invalid scene
// or ray-grid parameters.
RawScan synth_scan(const SceneSpec& scene, int rows, int cols);

}  // namespace lidargen
