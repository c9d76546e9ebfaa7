#include "lidargen/scan_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

namespace lidargen {
namespace {

constexpr std::size_t kRecordBytes = 16;

float read_f32_le(const std::uint8_t* p) {
  std::uint32_t u = static_cast<std::uint32_t>(p[0]) |
                    static_cast<std::uint32_t>(p[1]) << 8 |
                    static_cast<std::uint32_t>(p[2]) << 16 |
                    static_cast<std::uint32_t>(p[3]) << 24;
  float f;
  std::memcpy(&f, &u, sizeof f);
  return f;
}

void write_f32_le(std::uint8_t* p, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof u);
  p[0] = static_cast<std::uint8_t>(u & 0xff);
  p[1] = static_cast<std::uint8_t>((u >> 8) & 0xff);
  p[2] = static_cast<std::uint8_t>((u >> 16) & 0xff);
  p[3] = static_cast<std::uint8_t>((u >> 24) & 0xff);
}

}  // namespace

RawScan parse_velodyne_bin(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kRecordBytes != 0) {
    throw malformed_input_error(
        "scan byte count " + std::to_string(bytes.size()) +
        " is not a multiple of the 16-byte point record size");
  }
  RawScan scan;
  const std::size_t n = bytes.size() / kRecordBytes;
  scan.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kRecordBytes;
    LidarPoint p;
    p.x = read_f32_le(rec + 0);
    p.y = read_f32_le(rec + 4);
    p.z = read_f32_le(rec + 8);
    p.intensity = read_f32_le(rec + 12);
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
        !std::isfinite(p.intensity)) {
      throw corrupt_record_error(
          "non-finite value in point record " + std::to_string(i), i);
    }
    scan.points.push_back(p);
  }
  return scan;
}

std::vector<std::uint8_t> serialize_velodyne_bin(const RawScan& scan) {
  std::vector<std::uint8_t> bytes(scan.points.size() * kRecordBytes);
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    const LidarPoint& p = scan.points[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
        !std::isfinite(p.intensity)) {
      throw invalid_scan_error("cannot serialize non-finite point " +
                               std::to_string(i));
    }
    std::uint8_t* rec = bytes.data() + i * kRecordBytes;
    write_f32_le(rec + 0, p.x);
    write_f32_le(rec + 4, p.y);
    write_f32_le(rec + 8, p.z);
    write_f32_le(rec + 12, p.intensity);
  }
  return bytes;
}

RawScan load_scan(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw malformed_input_error("cannot open scan file " + path.string());
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_velodyne_bin(bytes);
}

void save_scan(const std::filesystem::path& path, const RawScan& scan) {
  const std::vector<std::uint8_t> bytes = serialize_velodyne_bin(scan);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw malformed_input_error("cannot open " + path.string() +
                                " for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw malformed_input_error("short write to " + path.string());
  }
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  throw precondition_error("unknown split value");
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw malformed_input_error("unknown split name '" + name + "'");
}

std::vector<ManifestEntry> DatasetManifest::split_entries(Split split) const {
  std::vector<ManifestEntry> out;
  for (const ManifestEntry& e : entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["subsample_factor"] = subsample_factor;
  j["entries"] = nlohmann::json::array();
  for (const ManifestEntry& e : entries) {
    j["entries"].push_back({{"path", e.path},
                            {"frame", e.frame},
                            {"split", to_string(e.split)}});
  }
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw malformed_input_error(std::string("bad manifest JSON: ") + ex.what());
  }
  DatasetManifest m;
  try {
    m.subsample_factor = j.at("subsample_factor").get<int>();
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.path = je.at("path").get<std::string>();
      e.frame = je.at("frame").get<int>();
      e.split = split_from_string(je.at("split").get<std::string>());
      m.entries.push_back(e);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw malformed_input_error(std::string("bad manifest fields: ") +
                                ex.what());
  }
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw malformed_input_error("cannot open " + path.string() +
                                " for writing");
  }
  out << to_json() << '\n';
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw malformed_input_error("cannot open manifest " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {

// Frame index from a file name such as "0000000042.bin"; falls back to -1
// when the stem has no leading digits (the caller then numbers by position).
int parse_frame_index(const std::string& stem) {
  std::size_t i = 0;
  while (i < stem.size() && std::isdigit(static_cast<unsigned char>(stem[i]))) {
    ++i;
  }
  if (i == 0) return -1;
  // Clamp absurdly long digit runs instead of throwing; they still order.
  const std::string digits = stem.substr(0, std::min<std::size_t>(i, 9));
  return std::stoi(digits);
}

}  // namespace

DatasetManifest build_manifest(const std::filesystem::path& root,
                               const std::array<double, 3>& fractions,
                               int subsample_factor, std::uint64_t seed) {
  if (subsample_factor < 1) {
    throw precondition_error("subsample factor must be >= 1");
  }
  double total_fraction = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) {
      throw precondition_error("split fractions must be non-negative");
    }
    total_fraction += f;
  }
  if (std::abs(total_fraction - 1.0) > 1e-9) {
    throw precondition_error("split fractions must sum to 1");
  }
  if (!std::filesystem::is_directory(root)) {
    throw empty_dataset_error("dataset root " + root.string() +
                              " is not a directory");
  }

  // Group scan files into sequences keyed by parent directory.
  std::map<std::string, std::vector<std::pair<int, std::string>>> sequences;
  for (const auto& dirent :
       std::filesystem::recursive_directory_iterator(root)) {
    if (!dirent.is_regular_file() || dirent.path().extension() != ".bin") {
      continue;
    }
    const std::string rel =
        std::filesystem::relative(dirent.path(), root).generic_string();
    const std::string seq =
        std::filesystem::relative(dirent.path().parent_path(), root)
            .generic_string();
    sequences[seq].push_back({parse_frame_index(dirent.path().stem().string()),
                              rel});
  }
  if (sequences.empty()) {
    throw empty_dataset_error("no .bin scan files under " + root.string());
  }

  // Temporal subsampling first: adjacent frames are nearly identical, so each
  // sequence keeps every k-th frame of its sorted frame list.
  struct Seq {
    std::string name;
    std::vector<std::pair<int, std::string>> frames;
  };
  std::vector<Seq> kept;
  for (auto& [name, frames] : sequences) {
    std::sort(frames.begin(), frames.end());
    Seq s{name, {}};
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (i % static_cast<std::size_t>(subsample_factor) == 0) {
        auto frame = frames[i];
        if (frame.first < 0) frame.first = static_cast<int>(i);
        s.frames.push_back(frame);
      }
    }
    kept.push_back(std::move(s));
  }

  std::size_t total_frames = 0;
  for (const Seq& s : kept) total_frames += s.frames.size();

  // Whole sequences go to one split each (frames of a sequence are strongly
  // correlated). Greedy assignment over a seeded shuffle: each sequence goes
  // to the split with the largest remaining frame deficit.
  std::vector<std::size_t> order(kept.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::array<double, 3> assigned{0.0, 0.0, 0.0};
  std::array<Split, 3> split_ids{Split::train, Split::val, Split::test};
  std::vector<Split> seq_split(kept.size(), Split::train);
  for (std::size_t idx : order) {
    int best = 0;
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < 3; ++s) {
      const double deficit =
          fractions[static_cast<std::size_t>(s)] *
              static_cast<double>(total_frames) -
          assigned[static_cast<std::size_t>(s)];
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = s;
      }
    }
    seq_split[idx] = split_ids[static_cast<std::size_t>(best)];
    assigned[static_cast<std::size_t>(best)] +=
        static_cast<double>(kept[idx].frames.size());
  }

  DatasetManifest manifest;
  manifest.subsample_factor = subsample_factor;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    for (const auto& [frame, rel] : kept[i].frames) {
      manifest.entries.push_back({rel, frame, seq_split[i]});
    }
  }
  return manifest;
}

namespace {

struct RayHit {
  bool hit = false;
  double t = std::numeric_limits<double>::infinity();
};

RayHit intersect_ground(const std::array<double, 3>& dir, double ground_z) {
  RayHit h;
  if (std::abs(dir[2]) < 1e-12) return h;
  const double t = ground_z / dir[2];
  if (t > 1e-9) {
    h.hit = true;
    h.t = t;
  }
  return h;
}

// Slab test against an axis-aligned box for a ray from the origin.
RayHit intersect_box(const std::array<double, 3>& dir, const SceneBox& box) {
  double tmin = 0.0;
  double tmax = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double lo = box.center[a] - box.half_extents[a];
    const double hi = box.center[a] + box.half_extents[a];
    if (std::abs(dir[a]) < 1e-12) {
      if (lo > 0.0 || hi < 0.0) return {};
      continue;
    }
    double t0 = lo / dir[a];
    double t1 = hi / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return {};
  }
  RayHit h;
  if (tmin > 1e-9) {
    h.hit = true;
    h.t = tmin;
  }
  return h;
}

void validate_scene(const SceneSpec& scene) {
  if (!(scene.max_range > 0.0)) {
    throw precondition_error("scene max_range must be positive");
  }
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const SceneBox& b = scene.boxes[i];
    for (int a = 0; a < 3; ++a) {
      if (!(b.half_extents[a] > 0.0)) {
        throw precondition_error("box " + std::to_string(i) +
                                 " has non-positive extent");
      }
    }
    bool contains_origin = true;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(b.center[a]) > b.half_extents[a]) {
        contains_origin = false;
        break;
      }
    }
    if (contains_origin) {
      throw precondition_error("box " + std::to_string(i) +
                               " contains the sensor origin");
    }
  }
}

}  // namespace

SceneSpec random_scene(std::uint64_t seed, int n_boxes, double max_range) {
  if (n_boxes < 0) {
    throw precondition_error("n_boxes must be non-negative");
  }
  SceneSpec scene;
  scene.seed = seed;
  scene.max_range = max_range;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ground(-2.4, -1.6);
  scene.ground_height = ground(rng);

  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> radius(4.0, 30.0);
  std::uniform_real_distribution<double> extent(0.3, 2.0);
  for (int i = 0; i < n_boxes; ++i) {
    SceneBox box;
    const double a = angle(rng);
    const double r = radius(rng);
    box.half_extents = {extent(rng), extent(rng), extent(rng)};
    box.center = {r * std::cos(a), r * std::sin(a),
                  scene.ground_height + box.half_extents[2]};
    scene.boxes.push_back(box);
  }
  return scene;
}

RawScan synth_scan(const SceneSpec& scene, int rows, int cols) {
  if (rows < 1 || cols < 1) {
    throw precondition_error("ray grid must have at least one row and column");
  }
  validate_scene(scene);

  constexpr double kDeg = std::numbers::pi / 180.0;
  const double elev_top = kElevationMaxDeg * kDeg;
  const double elev_bottom = kElevationMinDeg * kDeg;

  RawScan scan;
  scan.points.reserve(static_cast<std::size_t>(rows) *
                      static_cast<std::size_t>(cols));
  for (int r = 0; r < rows; ++r) {
    const double frac =
        rows == 1 ? 0.5 : static_cast<double>(r) / static_cast<double>(rows - 1);
    const double elev = elev_top + frac * (elev_bottom - elev_top);
    const double ce = std::cos(elev);
    const double se = std::sin(elev);
    for (int c = 0; c < cols; ++c) {
      // Half-bin offset keeps rays away from azimuth-bin boundaries, so a
      // matching-width grid projection bins them unambiguously.
      const double az = 2.0 * std::numbers::pi *
                        (static_cast<double>(c) + 0.5) /
                        static_cast<double>(cols);
      const std::array<double, 3> dir{ce * std::cos(az), ce * std::sin(az),
                                      se};
      double t = std::numeric_limits<double>::infinity();
      const RayHit ground = intersect_ground(dir, scene.ground_height);
      if (ground.hit) t = std::min(t, ground.t);
      for (const SceneBox& box : scene.boxes) {
        const RayHit h = intersect_box(dir, box);
        if (h.hit) t = std::min(t, h.t);
      }
      if (!std::isfinite(t) || t > scene.max_range) continue;
      LidarPoint p;
      p.x = static_cast<float>(t * dir[0]);
      p.y = static_cast<float>(t * dir[1]);
      p.z = static_cast<float>(t * dir[2]);
      p.intensity = static_cast<float>(
          std::clamp(1.0 - t / scene.max_range, 0.0, 1.0));
      scan.points.push_back(p);
    }
  }
  return scan;
}

}  // namespace lidargen
