// Command-line front end for the lidargen library: dataset synthesis and
// preprocessing, model training, corruption-sweep evaluation, sampling, and
// feature-space nearest-neighbor matching.
//
// Exit codes: 0 success; 2 usage problems (unknown flags, missing files,
// conflicting options); 1 runtime failures (corrupt data, divergence, ...).

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lidargen/corruption.hpp"
#include "lidargen/errors.hpp"
#include "lidargen/harness.hpp"
#include "lidargen/metrics.hpp"
#include "lidargen/models.hpp"
#include "lidargen/projection.hpp"
#include "lidargen/report.hpp"
#include "lidargen/scan_io.hpp"

namespace fs = std::filesystem;
using namespace lidargen;

namespace {

// Thrown for problems the user can fix on the command line; mapped to exit 2.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string data_dir;
};

// Relative paths that do not exist from the working directory fall back to
// the dataset root (--data-dir / LIDARGEN_DATA_DIR) when they exist there.
fs::path resolve_input(const std::string& path, const GlobalOptions& global) {
  const fs::path p(path);
  if (p.is_absolute() || fs::exists(p) || global.data_dir.empty()) return p;
  const fs::path under_root = fs::path(global.data_dir) / p;
  if (fs::exists(under_root)) return under_root;
  return p;
}

fs::path require_file(const std::string& path, const GlobalOptions& global,
                      const std::string& what) {
  if (path.empty()) throw usage_error(what + " is required");
  const fs::path resolved = resolve_input(path, global);
  if (!fs::exists(resolved)) {
    throw usage_error(what + " not found: " + resolved.string());
  }
  return resolved;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

// Every command with an output directory echoes its resolved configuration
// there so runs are self-describing.
void echo_config(const fs::path& out_dir, const std::string& command,
                 const GlobalOptions& global, nlohmann::json options) {
  nlohmann::json j;
  j["command"] = command;
  j["seed"] = global.seed;
  j["threads"] = global.threads;
  j["options"] = std::move(options);
  write_text(out_dir / "run_config.json", j.dump(2) + "\n");
}

void write_xyz(const fs::path& path, const PointSet& points) {
  std::ostringstream out;
  char line[128];
  for (const Point3& p : points) {
    std::snprintf(line, sizeof(line), "%.6f %.6f %.6f\n", p.x, p.y, p.z);
    out << line;
  }
  write_text(path, out.str());
}

Representation representation_from_channels(int channels) {
  if (channels == channel_count(Representation::cartesian)) {
    return Representation::cartesian;
  }
  if (channels == channel_count(Representation::polar)) {
    return Representation::polar;
  }
  throw std::runtime_error("no representation has " +
                           std::to_string(channels) + " channels");
}

// Builds a conv geometry for an arbitrary grid by mirroring the default
// 40x256 recipe: halve the height while it stays integral, then halve the
// width at least as often and until it is at most 8 columns wide.
ArchSpec derive_arch(Representation repr, int height, int width,
                     int base_channels, int latent_dim) {
  ArchSpec arch;
  arch.grid_height = height;
  arch.grid_width = width;
  arch.data_channels = channel_count(repr);
  arch.base_channels = base_channels;
  arch.latent_dim = latent_dim;

  int row_stages = 0;
  int init_h = height;
  while (init_h % 2 == 0 && init_h > 1 && row_stages < 5) {
    init_h /= 2;
    ++row_stages;
  }
  int col_stages = 0;
  int init_w = width;
  while (init_w % 2 == 0 && init_w > 1 &&
         (init_w > 8 || col_stages < row_stages) && col_stages < 6) {
    init_w /= 2;
    ++col_stages;
  }
  if (col_stages < row_stages || row_stages + col_stages == 0) {
    throw usage_error("no conv geometry fits a " + std::to_string(height) +
                      "x" + std::to_string(width) +
                      " grid; pick power-of-two-friendly dimensions");
  }
  arch.init_h = init_h;
  arch.init_w = init_w;
  arch.stage_strides.clear();
  for (int i = 0; i < col_stages - row_stages; ++i) {
    arch.stage_strides.push_back({1, 2});
  }
  for (int i = 0; i < row_stages; ++i) {
    arch.stage_strides.push_back({2, 2});
  }
  try {
    arch.validate();
  } catch (const precondition_error& e) {
    throw usage_error(std::string("unsupported grid geometry: ") + e.what());
  }
  return arch;
}

std::vector<GridScan> load_metric_grids(const fs::path& path, int limit = 0) {
  GridReader reader(path);
  if (reader.normalized()) {
    throw usage_error(path.string() +
                      " holds normalized grids; commands expect the "
                      "metric-space containers written by preprocess");
  }
  if (limit <= 0 || static_cast<std::uint64_t>(limit) >= reader.size()) {
    return reader.read_all();
  }
  std::vector<GridScan> grids;
  grids.reserve(static_cast<std::size_t>(limit));
  for (int i = 0; i < limit; ++i) {
    grids.push_back(reader.read(static_cast<std::uint64_t>(i)));
  }
  return grids;
}

// --- synth ------------------------------------------------------------------

struct SynthOptions {
  std::string out_dir;
  int scans = 64;
  int sequences = 4;
  int rows = 40;
  int cols = 256;
  int boxes = 6;
};

void run_synth(const SynthOptions& opt, const GlobalOptions& global) {
  if (opt.scans < 1 || opt.sequences < 1 || opt.rows < 1 || opt.cols < 1 ||
      opt.boxes < 0) {
    throw usage_error("synth: counts must be positive");
  }
  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  for (int i = 0; i < opt.scans; ++i) {
    const int seq = i % opt.sequences;
    const int frame = i / opt.sequences;
    const SceneSpec scene =
        random_scene(derive_seed(global.seed, static_cast<std::uint64_t>(i)),
                     opt.boxes);
    const RawScan scan = synth_scan(scene, opt.rows, opt.cols);
    char name[64];
    std::snprintf(name, sizeof(name), "seq_%02d", seq);
    const fs::path seq_dir = out / name;
    fs::create_directories(seq_dir);
    std::snprintf(name, sizeof(name), "%06d.bin", frame);
    save_scan(seq_dir / name, scan);
  }
  echo_config(out, "synth", global,
              {{"out", opt.out_dir},
               {"scans", opt.scans},
               {"sequences", opt.sequences},
               {"rows", opt.rows},
               {"cols", opt.cols},
               {"boxes", opt.boxes}});
  std::cout << "wrote " << opt.scans << " scans across " << opt.sequences
            << " sequences to " << out.string() << "\n";
}

// --- preprocess -------------------------------------------------------------

struct PreprocessOptions {
  std::string input;
  std::string out_dir;
  int height = 40;
  int width = 256;
  std::string representation = "polar";
  std::string rows = "ring";
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  int subsample = 1;
};

void run_preprocess(const PreprocessOptions& opt, const GlobalOptions& global) {
  std::string input = opt.input;
  if (input.empty()) input = global.data_dir;
  if (input.empty()) {
    throw usage_error(
        "preprocess: give --input or set --data-dir / LIDARGEN_DATA_DIR");
  }
  const fs::path root = require_file(input, global, "input directory");
  if (!fs::is_directory(root)) {
    throw usage_error("input is not a directory: " + root.string());
  }
  if (opt.height < 1 || opt.width < 1) {
    throw usage_error("preprocess: grid dimensions must be positive");
  }
  const double frac_sum = opt.train_frac + opt.val_frac + opt.test_frac;
  if (opt.train_frac < 0.0 || opt.val_frac < 0.0 || opt.test_frac < 0.0 ||
      std::abs(frac_sum - 1.0) > 1e-9) {
    throw usage_error("preprocess: split fractions must be >= 0 and sum to 1");
  }
  if (opt.subsample < 1) {
    throw usage_error("preprocess: --subsample must be >= 1");
  }
  const Representation repr = representation_from_string(opt.representation);
  GridConfig config;
  config.height = opt.height;
  config.width = opt.width;
  if (opt.rows == "ring") {
    config.rows = RowAssignment::ring_segmentation;
  } else if (opt.rows == "elevation") {
    config.rows = RowAssignment::uniform_elevation;
  } else {
    throw usage_error("preprocess: --rows must be ring or elevation");
  }

  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  const DatasetManifest manifest = build_manifest(
      root, {opt.train_frac, opt.val_frac, opt.test_frac}, opt.subsample,
      global.seed);
  manifest.save(out / "manifest.json");

  StatsAccumulator stats_acc;
  std::size_t counts[3] = {0, 0, 0};
  for (const Split split : {Split::train, Split::val, Split::test}) {
    GridWriter writer(out / (to_string(split) + ".lgrd"), repr, opt.height,
                      opt.width, /*normalized=*/false);
    for (const ManifestEntry& entry : manifest.split_entries(split)) {
      const RawScan scan = load_scan(root / entry.path);
      GridScan grid = project(scan, config);
      if (repr == Representation::polar) grid = to_polar(grid);
      if (split == Split::train) stats_acc.add(grid);
      writer.append(grid);
      ++counts[static_cast<int>(split)];
    }
    writer.close();
  }
  stats_acc.finalize().save(out / "stats.json");

  echo_config(out, "preprocess", global,
              {{"input", root.string()},
               {"out", opt.out_dir},
               {"height", opt.height},
               {"width", opt.width},
               {"representation", opt.representation},
               {"rows", opt.rows},
               {"train_frac", opt.train_frac},
               {"val_frac", opt.val_frac},
               {"test_frac", opt.test_frac},
               {"subsample", opt.subsample}});
  std::cout << "projected " << (counts[0] + counts[1] + counts[2]) << " scans ("
            << counts[0] << " train, " << counts[1] << " val, " << counts[2]
            << " test) at " << opt.height << "x" << opt.width << " into "
            << out.string() << "\n";
}

// --- shared training plumbing ----------------------------------------------

struct DatasetPaths {
  std::string train;
  std::string val;
  std::string stats;
};

struct LoadedDataset {
  std::vector<GridScan> train;
  std::vector<GridScan> val;
  NormStats stats;
  Representation repr = Representation::cartesian;
  int height = 0;
  int width = 0;
};

LoadedDataset load_dataset(const DatasetPaths& paths,
                           const GlobalOptions& global) {
  const fs::path train_path = require_file(paths.train, global, "--train");
  const fs::path val_path = require_file(paths.val, global, "--val");
  std::string stats_name = paths.stats;
  if (stats_name.empty()) {
    stats_name = (train_path.parent_path() / "stats.json").string();
  }
  const fs::path stats_path = require_file(stats_name, global, "--stats");

  LoadedDataset data;
  data.train = load_metric_grids(train_path);
  data.val = load_metric_grids(val_path);
  data.stats = NormStats::load(stats_path);
  if (data.train.empty()) {
    throw usage_error("training container is empty: " + train_path.string());
  }
  data.repr = data.train[0].representation;
  data.height = data.train[0].height;
  data.width = data.train[0].width;
  if (!data.val.empty() && (data.val[0].representation != data.repr ||
                            data.val[0].height != data.height ||
                            data.val[0].width != data.width)) {
    throw usage_error("--train and --val hold different grid layouts");
  }
  if (static_cast<int>(data.stats.mean.size()) != channel_count(data.repr)) {
    throw usage_error("--stats channel count does not match the grids");
  }
  return data;
}

// --- train-vae --------------------------------------------------------------

struct TrainVaeOptions {
  DatasetPaths data;
  std::string out_dir;
  int latent = 128;
  int base = 32;
  double lr = 2e-4;
  double kl_weight = 1.0;
  int batch = 64;
  std::int64_t steps = 1000;
  int eval_every = 50;
  int eval_scans = 16;
  int emd_max_points = 512;
  double emd_epsilon = 0.05;
};

void run_train_vae(const TrainVaeOptions& opt, const GlobalOptions& global) {
  const LoadedDataset data = load_dataset(opt.data, global);
  TrainVaeConfig cfg;
  cfg.arch = derive_arch(data.repr, data.height, data.width, opt.base,
                         opt.latent);
  cfg.lr = opt.lr;
  cfg.kl_weight = opt.kl_weight;
  cfg.batch_size = opt.batch;
  cfg.max_steps = opt.steps;
  cfg.eval_every = opt.eval_every;
  cfg.seed = global.seed;
  cfg.eval_scans = opt.eval_scans;
  cfg.emd_max_points = opt.emd_max_points;
  cfg.emd_epsilon = opt.emd_epsilon;
  cfg.out_dir = opt.out_dir;

  fs::create_directories(cfg.out_dir);
  echo_config(cfg.out_dir, "train-vae", global,
              {{"train", opt.data.train},
               {"val", opt.data.val},
               {"stats", opt.data.stats},
               {"out", opt.out_dir},
               {"latent", opt.latent},
               {"base", opt.base},
               {"lr", opt.lr},
               {"kl_weight", opt.kl_weight},
               {"batch", opt.batch},
               {"steps", opt.steps},
               {"eval_every", opt.eval_every},
               {"eval_scans", opt.eval_scans},
               {"emd_max_points", opt.emd_max_points},
               {"emd_epsilon", opt.emd_epsilon}});

  const TrainVaeResult result = train_vae(data.train, data.val, data.stats,
                                          cfg);
  std::cout << "trained " << cfg.max_steps << " steps; best validation EMD "
            << format_double(result.best_val_emd) << " at step "
            << result.best_step << "\n"
            << "best checkpoint: " << result.best_checkpoint.string() << "\n"
            << "last checkpoint: " << result.last_checkpoint.string() << "\n";
}

// --- train-gan --------------------------------------------------------------

struct TrainGanOptions {
  DatasetPaths data;
  std::string out_dir;
  int latent = 128;
  int base = 32;
  double lr = 2e-4;
  std::string loss = "ragan";
  int batch = 64;
  std::int64_t steps = 1000;
  int eval_every = 50;
  int eval_scans = 16;
};

void run_train_gan(const TrainGanOptions& opt, const GlobalOptions& global) {
  const LoadedDataset data = load_dataset(opt.data, global);
  TrainGanConfig cfg;
  cfg.arch = derive_arch(data.repr, data.height, data.width, opt.base,
                         opt.latent);
  cfg.lr = opt.lr;
  if (opt.loss == "ragan") {
    cfg.loss_kind = GanLossKind::relativistic_average;
  } else if (opt.loss == "ns") {
    cfg.loss_kind = GanLossKind::non_saturating;
  } else {
    throw usage_error("train-gan: --loss must be ragan or ns");
  }
  cfg.batch_size = opt.batch;
  cfg.max_steps = opt.steps;
  cfg.eval_every = opt.eval_every;
  cfg.seed = global.seed;
  cfg.eval_scans = opt.eval_scans;
  cfg.out_dir = opt.out_dir;

  fs::create_directories(cfg.out_dir);
  echo_config(cfg.out_dir, "train-gan", global,
              {{"train", opt.data.train},
               {"val", opt.data.val},
               {"stats", opt.data.stats},
               {"out", opt.out_dir},
               {"latent", opt.latent},
               {"base", opt.base},
               {"lr", opt.lr},
               {"loss", opt.loss},
               {"batch", opt.batch},
               {"steps", opt.steps},
               {"eval_every", opt.eval_every},
               {"eval_scans", opt.eval_scans}});

  const TrainGanResult result = train_gan(data.train, data.val, data.stats,
                                          cfg);
  std::cout << "trained " << cfg.max_steps << " alternation rounds\n";
  if (!result.probes.empty()) {
    std::cout << "final real/fake score gap "
              << format_double(result.probes.back().score_gap)
              << ", probe accuracy "
              << format_double(result.probes.back().accuracy) << "\n";
  }
  std::cout << "checkpoint: " << result.checkpoint.string() << "\n";
}

// --- search -----------------------------------------------------------------

struct SearchOptions {
  DatasetPaths data;
  std::string out_dir;
  int trials = 10;
  std::int64_t steps = 500;
  double kl_weight = 1.0;
  int base = 32;
  int eval_every = 50;
  int eval_scans = 16;
  int emd_max_points = 512;
  double emd_epsilon = 0.05;
  std::vector<double> learning_rates;
  std::vector<int> latent_dims;
  std::vector<int> batch_sizes;
};

void run_search(const SearchOptions& opt, const GlobalOptions& global) {
  const LoadedDataset data = load_dataset(opt.data, global);
  TrainVaeConfig base;
  base.arch = derive_arch(data.repr, data.height, data.width, opt.base,
                          /*latent_dim=*/opt.latent_dims.empty()
                              ? 128
                              : opt.latent_dims.front());
  base.kl_weight = opt.kl_weight;
  base.max_steps = opt.steps;
  base.eval_every = opt.eval_every;
  base.eval_scans = opt.eval_scans;
  base.emd_max_points = opt.emd_max_points;
  base.emd_epsilon = opt.emd_epsilon;

  SearchSpace space;
  if (!opt.learning_rates.empty()) space.learning_rates = opt.learning_rates;
  if (!opt.latent_dims.empty()) space.latent_dims = opt.latent_dims;
  if (!opt.batch_sizes.empty()) space.batch_sizes = opt.batch_sizes;
  space.trials = opt.trials;
  space.seed = global.seed;

  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  echo_config(out, "search", global,
              {{"train", opt.data.train},
               {"val", opt.data.val},
               {"stats", opt.data.stats},
               {"out", opt.out_dir},
               {"trials", opt.trials},
               {"steps", opt.steps},
               {"kl_weight", opt.kl_weight},
               {"base", opt.base},
               {"eval_every", opt.eval_every},
               {"eval_scans", opt.eval_scans},
               {"learning_rates", space.learning_rates},
               {"latent_dims", space.latent_dims},
               {"batch_sizes", space.batch_sizes}});

  const SearchResult result =
      random_search_vae(data.train, data.val, data.stats, base, space, out);
  const SearchTrial& best =
      result.trials[static_cast<std::size_t>(result.best_index)];
  std::cout << "ran " << result.trials.size() << " trials; best trial "
            << best.index << " (lr " << format_double(best.lr) << ", latent "
            << best.latent_dim << ", batch " << best.batch_size
            << ") with validation EMD " << format_double(best.val_emd) << "\n"
            << "best checkpoint: " << best.checkpoint.string() << "\n";
}

// --- eval-recon -------------------------------------------------------------

struct EvalReconOptions {
  std::vector<std::string> checkpoints;
  std::vector<std::string> tests;
  std::string out_dir;
  std::string sweep = "both";
  int scans = 0;  // 0 = every scan in the container
  int emd_max_points = 1024;
  double emd_epsilon = 0.05;
};

VaeCheckpoint load_trained_vae(const fs::path& path) {
  if (checkpoint_kind(path) != "vae") {
    throw usage_error(path.string() +
                      " is not an autoencoder checkpoint");
  }
  VaeCheckpoint ckpt = load_vae_checkpoint(path);
  if (!ckpt.stats.has_value()) {
    throw usage_error(path.string() +
                      " carries no normalization statistics; retrain or "
                      "rebuild the checkpoint");
  }
  return ckpt;
}

void run_eval_recon(const EvalReconOptions& opt, const GlobalOptions& global) {
  if (opt.checkpoints.empty()) {
    throw usage_error("eval-recon: at least one --checkpoint is required");
  }
  if (opt.tests.size() != opt.checkpoints.size() && opt.tests.size() != 1) {
    throw usage_error(
        "eval-recon: give one --test per --checkpoint, or a single shared "
        "--test");
  }
  if (opt.sweep != "both" && opt.sweep != "noise" && opt.sweep != "removal") {
    throw usage_error("eval-recon: --sweep must be both, noise, or removal");
  }

  EvalReconConfig cfg;
  cfg.emd_max_points = opt.emd_max_points;
  cfg.emd_epsilon = opt.emd_epsilon;
  cfg.seed = global.seed;
  cfg.threads = global.threads;
  if (opt.sweep == "noise") cfg.removal_levels.clear();
  if (opt.sweep == "removal") cfg.noise_levels.clear();

  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  echo_config(out, "eval-recon", global,
              {{"checkpoints", opt.checkpoints},
               {"tests", opt.tests},
               {"out", opt.out_dir},
               {"sweep", opt.sweep},
               {"scans", opt.scans},
               {"emd_max_points", opt.emd_max_points},
               {"emd_epsilon", opt.emd_epsilon}});

  struct Curves {
    std::string label;
    Series noise_emd, noise_chamfer, removal_emd, removal_chamfer;
  };
  std::vector<Curves> curves;

  for (std::size_t i = 0; i < opt.checkpoints.size(); ++i) {
    const fs::path ckpt_path =
        require_file(opt.checkpoints[i], global, "--checkpoint");
    const fs::path test_path = require_file(
        opt.tests.size() == 1 ? opt.tests[0] : opt.tests[i], global, "--test");
    VaeCheckpoint ckpt = load_trained_vae(ckpt_path);
    const std::vector<GridScan> scans =
        load_metric_grids(test_path, opt.scans);
    const std::string model_id = ckpt_path.stem().string() == "best" ||
                                         ckpt_path.stem().string() == "last"
                                     ? ckpt_path.parent_path().stem().string()
                                     : ckpt_path.stem().string();

    const EvalReport report = eval_reconstruction(
        ckpt.model, *ckpt.stats, scans, cfg, model_id);
    const std::string file_id = model_id + "_" + std::to_string(i);
    write_eval_csv(out / (file_id + ".csv"), report);
    write_text(out / (file_id + ".json"), report.to_json() + "\n");

    Curves c;
    c.label = model_id + " (" + to_string(report.representation) + ")";
    c.noise_emd.label = c.label;
    c.noise_chamfer.label = c.label;
    c.removal_emd.label = c.label;
    c.removal_chamfer.label = c.label;
    for (const EvalReconRow& row : report.rows) {
      if (row.kind == CorruptionKind::additive_noise) {
        c.noise_emd.x.push_back(row.level);
        c.noise_emd.y.push_back(row.emd_mean);
        c.noise_chamfer.x.push_back(row.level);
        c.noise_chamfer.y.push_back(row.chamfer_mean);
      } else {
        c.removal_emd.x.push_back(row.level);
        c.removal_emd.y.push_back(row.emd_mean);
        c.removal_chamfer.x.push_back(row.level);
        c.removal_chamfer.y.push_back(row.chamfer_mean);
      }
    }
    curves.push_back(std::move(c));
    std::cout << "evaluated " << model_id << " on " << scans.size()
              << " scans -> " << (out / (file_id + ".csv")).string() << "\n";
  }

  const auto chart = [&](const std::string& name, const std::string& title,
                         Series Curves::*member) {
    std::vector<Series> series;
    for (const Curves& c : curves) series.push_back(c.*member);
    if (series.empty() || series[0].x.empty()) return;
    write_svg_chart(out / name, title, "corruption level", "distance", series);
  };
  if (opt.sweep != "removal") {
    chart("eval_noise_emd.svg", "mean EMD vs added noise",
          &Curves::noise_emd);
    chart("eval_noise_chamfer.svg", "mean Chamfer vs added noise",
          &Curves::noise_chamfer);
  }
  if (opt.sweep != "noise") {
    chart("eval_removal_emd.svg", "mean EMD vs point removal",
          &Curves::removal_emd);
    chart("eval_removal_chamfer.svg", "mean Chamfer vs point removal",
          &Curves::removal_chamfer);
  }
}

// --- sample -----------------------------------------------------------------

struct SampleOptions {
  std::string checkpoint;
  std::string out_dir;
  int count = 8;
};

void run_sample(const SampleOptions& opt, const GlobalOptions& global) {
  if (opt.count < 1) throw usage_error("sample: --count must be >= 1");
  const fs::path ckpt_path =
      require_file(opt.checkpoint, global, "--checkpoint");
  const fs::path out(opt.out_dir);
  fs::create_directories(out);

  ad::Tensor batch;
  ArchSpec arch;
  std::optional<NormStats> stats;
  const std::string kind = checkpoint_kind(ckpt_path);
  if (kind == "gan") {
    GanCheckpoint ckpt = load_gan_checkpoint(ckpt_path);
    arch = ckpt.model.arch();
    stats = ckpt.stats;
    batch = ckpt.model.sample(opt.count, global.seed);
  } else {
    VaeCheckpoint ckpt = load_vae_checkpoint(ckpt_path);
    arch = ckpt.model.arch();
    stats = ckpt.stats;
    batch = ckpt.model.sample(opt.count, global.seed);
  }
  if (!stats.has_value()) {
    throw usage_error(ckpt_path.string() +
                      " carries no normalization statistics; cannot map "
                      "samples back to metric space");
  }

  const Representation repr =
      representation_from_channels(arch.data_channels);
  const std::vector<GridScan> grids = tensor_to_grids(batch, repr, {});
  for (std::size_t i = 0; i < grids.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "sample_%03zu.xyz", i);
    write_xyz(out / name, unproject(grids[i], &*stats));
  }
  echo_config(out, "sample", global,
              {{"checkpoint", opt.checkpoint},
               {"out", opt.out_dir},
               {"count", opt.count}});
  std::cout << "wrote " << grids.size() << " point sets to " << out.string()
            << "\n";
}

// --- match-nn ---------------------------------------------------------------

struct MatchNnOptions {
  std::string checkpoint;
  std::string test;
  std::string out_dir;
  int samples = 8;
  int k = 1;
  int layer = 3;
};

void run_match_nn(const MatchNnOptions& opt, const GlobalOptions& global) {
  if (opt.samples < 1) throw usage_error("match-nn: --samples must be >= 1");
  if (opt.k < 1) throw usage_error("match-nn: --k must be >= 1");
  const fs::path ckpt_path =
      require_file(opt.checkpoint, global, "--checkpoint");
  const fs::path test_path = require_file(opt.test, global, "--test");
  if (checkpoint_kind(ckpt_path) != "gan") {
    throw usage_error("match-nn: " + ckpt_path.string() +
                      " is not an adversarial checkpoint");
  }
  GanCheckpoint ckpt = load_gan_checkpoint(ckpt_path);
  if (!ckpt.stats.has_value()) {
    throw usage_error(ckpt_path.string() +
                      " carries no normalization statistics");
  }
  const std::vector<GridScan> refs = load_metric_grids(test_path);
  if (refs.empty()) {
    throw usage_error("test container is empty: " + test_path.string());
  }

  const Representation repr =
      representation_from_channels(ckpt.model.arch().data_channels);
  const ad::Tensor batch = ckpt.model.sample(opt.samples, global.seed);
  std::vector<GridScan> samples = tensor_to_grids(batch, repr, {});
  for (GridScan& g : samples) {
    g = normalize(g, *ckpt.stats, NormDirection::inverse);
  }

  const ad::Tensor query_features =
      disc_features(ckpt.model, *ckpt.stats, samples, opt.layer);
  const ad::Tensor ref_features =
      disc_features(ckpt.model, *ckpt.stats, refs, opt.layer);
  const std::vector<MatchResult> matches =
      nearest_features(query_features, ref_features, opt.k);

  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  {
    CsvWriter csv(out / "match.csv");
    csv.header({"sample", "rank", "test_index", "distance"});
    for (const MatchResult& m : matches) {
      for (std::size_t r = 0; r < m.neighbor_indices.size(); ++r) {
        csv.cell(m.query_index)
            .cell(static_cast<int>(r))
            .cell(m.neighbor_indices[r])
            .cell(m.distances[r]);
        csv.end_row();
      }
    }
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "sample_%03zu.xyz", i);
    write_xyz(out / name, unproject(samples[i]));
  }
  echo_config(out, "match-nn", global,
              {{"checkpoint", opt.checkpoint},
               {"test", opt.test},
               {"out", opt.out_dir},
               {"samples", opt.samples},
               {"k", opt.k},
               {"layer", opt.layer}});
  std::cout << "matched " << samples.size() << " samples against "
            << refs.size() << " test scans -> "
            << (out / "match.csv").string() << "\n";
}

// --- inspect ----------------------------------------------------------------

std::string sniff_kind(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  if (in.gcount() == 4) {
    if (std::string(magic, 4) == "LGRD") return "grids";
    if (std::string(magic, 4) == "LGCK") return "checkpoint";
  }
  return "scan";
}

void run_inspect(const std::string& input, const GlobalOptions& global) {
  const fs::path path = require_file(input, global, "--input");
  const std::string kind = sniff_kind(path);
  if (kind == "grids") {
    GridReader reader(path);
    std::uint64_t occupied = 0;
    std::uint64_t cells = 0;
    for (std::uint64_t i = 0; i < reader.size(); ++i) {
      const GridScan g = reader.read(i);
      occupied += g.occupied_count();
      cells += g.cell_count();
    }
    std::cout << "kind: grid container\n"
              << "representation: " << to_string(reader.representation())
              << "\n"
              << "grid: " << reader.height() << "x" << reader.width() << "\n"
              << "records: " << reader.size() << "\n"
              << "normalized: " << (reader.normalized() ? "yes" : "no") << "\n"
              << "mean occupancy: "
              << format_double(cells == 0 ? 0.0
                                          : static_cast<double>(occupied) /
                                                static_cast<double>(cells))
              << "\n";
    return;
  }
  if (kind == "checkpoint") {
    const std::string model_kind = checkpoint_kind(path);
    const ArchSpec arch = model_kind == "gan"
                              ? load_gan_checkpoint(path).model.arch()
                              : load_vae_checkpoint(path).model.arch();
    const bool has_stats = model_kind == "gan"
                               ? load_gan_checkpoint(path).stats.has_value()
                               : load_vae_checkpoint(path).stats.has_value();
    std::cout << "kind: " << (model_kind == "gan" ? "adversarial checkpoint"
                                                  : "autoencoder checkpoint")
              << "\n"
              << "grid: " << arch.grid_height << "x" << arch.grid_width << "x"
              << arch.data_channels << "\n"
              << "latent: " << arch.latent_dim << "\n"
              << "base channels: " << arch.base_channels << "\n"
              << "stages: " << arch.num_stages() << "\n"
              << "normalization stats: " << (has_stats ? "yes" : "no") << "\n";
    return;
  }
  const RawScan scan = load_scan(path);
  double lo[3] = {0.0, 0.0, 0.0};
  double hi[3] = {0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    const LidarPoint& p = scan.points[i];
    const double v[3] = {p.x, p.y, p.z};
    for (int a = 0; a < 3; ++a) {
      lo[a] = (i == 0) ? v[a] : std::min(lo[a], v[a]);
      hi[a] = (i == 0) ? v[a] : std::max(hi[a], v[a]);
    }
  }
  std::cout << "kind: raw scan\n"
            << "points: " << scan.points.size() << "\n";
  const char* axes = "xyz";
  for (int a = 0; a < 3; ++a) {
    std::cout << axes[a] << " range: [" << format_double(lo[a]) << ", "
              << format_double(hi[a]) << "]\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lidar scan generative-model toolkit"};
  app.name("lidargen");
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Print help for every subcommand");
  app.set_config("--config", "",
                 "Read defaults from an INI/TOML file (flags still win)");

  GlobalOptions global;
  app.add_option("--seed", global.seed, "Base random seed")
      ->capture_default_str();
  app.add_option("--threads", global.threads,
                 "Worker cap for parallel evaluation")
      ->capture_default_str();
  app.add_option("--data-dir", global.data_dir,
                 "Dataset root used to resolve relative paths")
      ->envname("LIDARGEN_DATA_DIR");

  SynthOptions synth_opt;
  CLI::App* synth = app.add_subcommand(
      "synth", "Generate a synthetic raw-scan dataset");
  synth->add_option("--out", synth_opt.out_dir, "Output dataset directory")
      ->required();
  synth->add_option("--scans", synth_opt.scans, "Number of scans")
      ->capture_default_str();
  synth->add_option("--sequences", synth_opt.sequences,
                    "Number of sequence directories")
      ->capture_default_str();
  synth->add_option("--scan-rows", synth_opt.rows, "Beams per scan")
      ->capture_default_str();
  synth->add_option("--scan-cols", synth_opt.cols, "Azimuth steps per scan")
      ->capture_default_str();
  synth->add_option("--boxes", synth_opt.boxes, "Boxes per scene")
      ->capture_default_str();

  PreprocessOptions pre_opt;
  CLI::App* pre = app.add_subcommand(
      "preprocess", "Project raw scans into grid containers plus stats");
  pre->add_option("--input", pre_opt.input,
                  "Raw dataset root (default: --data-dir)");
  pre->add_option("--out", pre_opt.out_dir, "Output directory")->required();
  pre->add_option("--height", pre_opt.height, "Grid rows")
      ->capture_default_str();
  pre->add_option("--width", pre_opt.width, "Grid columns")
      ->capture_default_str();
  pre->add_option("--representation", pre_opt.representation,
                  "Cell values: cartesian or polar")
      ->capture_default_str();
  pre->add_option("--rows", pre_opt.rows,
                  "Row assignment: ring or elevation")
      ->capture_default_str();
  pre->add_option("--train-frac", pre_opt.train_frac, "Training split share")
      ->capture_default_str();
  pre->add_option("--val-frac", pre_opt.val_frac, "Validation split share")
      ->capture_default_str();
  pre->add_option("--test-frac", pre_opt.test_frac, "Test split share")
      ->capture_default_str();
  pre->add_option("--subsample", pre_opt.subsample,
                  "Keep every n-th frame of each sequence")
      ->capture_default_str();

  TrainVaeOptions vae_opt;
  CLI::App* tvae = app.add_subcommand(
      "train-vae", "Train the variational (or plain) autoencoder");
  tvae->add_option("--train", vae_opt.data.train, "Training grid container")
      ->required();
  tvae->add_option("--val", vae_opt.data.val, "Validation grid container")
      ->required();
  tvae->add_option("--stats", vae_opt.data.stats,
                   "Normalization stats (default: stats.json next to --train)");
  tvae->add_option("--out", vae_opt.out_dir, "Run output directory")
      ->required();
  tvae->add_option("--latent", vae_opt.latent, "Latent dimension")
      ->capture_default_str();
  tvae->add_option("--base", vae_opt.base, "Base channel width")
      ->capture_default_str();
  tvae->add_option("--lr", vae_opt.lr, "Learning rate")->capture_default_str();
  tvae->add_option("--kl-weight", vae_opt.kl_weight,
                   "KL term weight; 0 trains a plain autoencoder")
      ->capture_default_str();
  tvae->add_option("--batch", vae_opt.batch, "Batch size")
      ->capture_default_str();
  tvae->add_option("--steps", vae_opt.steps, "Optimizer steps")
      ->capture_default_str();
  tvae->add_option("--eval-every", vae_opt.eval_every,
                   "Validation probe period in steps")
      ->capture_default_str();
  tvae->add_option("--eval-scans", vae_opt.eval_scans,
                   "Validation scans per probe")
      ->capture_default_str();
  tvae->add_option("--emd-max-points", vae_opt.emd_max_points,
                   "Point cap for validation EMD")
      ->capture_default_str();
  tvae->add_option("--emd-epsilon", vae_opt.emd_epsilon,
                   "Validation EMD optimality gap per point")
      ->capture_default_str();

  TrainGanOptions gan_opt;
  CLI::App* tgan = app.add_subcommand(
      "train-gan", "Train the adversarial generator/discriminator pair");
  tgan->add_option("--train", gan_opt.data.train, "Training grid container")
      ->required();
  tgan->add_option("--val", gan_opt.data.val, "Held-out grid container")
      ->required();
  tgan->add_option("--stats", gan_opt.data.stats,
                   "Normalization stats (default: stats.json next to --train)");
  tgan->add_option("--out", gan_opt.out_dir, "Run output directory")
      ->required();
  tgan->add_option("--latent", gan_opt.latent, "Latent dimension")
      ->capture_default_str();
  tgan->add_option("--base", gan_opt.base, "Base channel width")
      ->capture_default_str();
  tgan->add_option("--lr", gan_opt.lr, "Learning rate")->capture_default_str();
  tgan->add_option("--loss", gan_opt.loss,
                   "Adversarial loss: ragan or ns")
      ->capture_default_str();
  tgan->add_option("--batch", gan_opt.batch, "Batch size")
      ->capture_default_str();
  tgan->add_option("--steps", gan_opt.steps, "Alternation rounds")
      ->capture_default_str();
  tgan->add_option("--eval-every", gan_opt.eval_every,
                   "Probe period in steps")
      ->capture_default_str();
  tgan->add_option("--eval-scans", gan_opt.eval_scans,
                   "Held-out scans per probe")
      ->capture_default_str();

  SearchOptions search_opt;
  CLI::App* search = app.add_subcommand(
      "search", "Random hyperparameter search for the autoencoder");
  search->add_option("--train", search_opt.data.train,
                     "Training grid container")
      ->required();
  search->add_option("--val", search_opt.data.val, "Validation grid container")
      ->required();
  search->add_option("--stats", search_opt.data.stats,
                     "Normalization stats (default: stats.json next to "
                     "--train)");
  search->add_option("--out", search_opt.out_dir, "Search output directory")
      ->required();
  search->add_option("--trials", search_opt.trials, "Configurations to try")
      ->capture_default_str();
  search->add_option("--steps", search_opt.steps, "Optimizer steps per trial")
      ->capture_default_str();
  search->add_option("--kl-weight", search_opt.kl_weight,
                     "KL term weight; 0 trains plain autoencoders")
      ->capture_default_str();
  search->add_option("--base", search_opt.base, "Base channel width")
      ->capture_default_str();
  search->add_option("--eval-every", search_opt.eval_every,
                     "Validation probe period in steps")
      ->capture_default_str();
  search->add_option("--eval-scans", search_opt.eval_scans,
                     "Validation scans per probe")
      ->capture_default_str();
  search->add_option("--emd-max-points", search_opt.emd_max_points,
                     "Point cap for validation EMD")
      ->capture_default_str();
  search->add_option("--emd-epsilon", search_opt.emd_epsilon,
                     "Validation EMD optimality gap per point")
      ->capture_default_str();
  search->add_option("--lr", search_opt.learning_rates,
                     "Learning-rate candidates (default 1e-4 2e-4 1e-3)");
  search->add_option("--latent", search_opt.latent_dims,
                     "Latent-dimension candidates (default 64 128 160)");
  search->add_option("--batch", search_opt.batch_sizes,
                     "Batch-size candidates (default 32 64 128)");

  EvalReconOptions eval_opt;
  CLI::App* eval = app.add_subcommand(
      "eval-recon",
      "Sweep corruption levels and score reconstructions (EMD, Chamfer)");
  eval->add_option("--checkpoint", eval_opt.checkpoints,
                   "Autoencoder checkpoint (repeat to compare models)")
      ->required();
  eval->add_option("--test", eval_opt.tests,
                   "Test grid container (one per checkpoint, or one shared)")
      ->required();
  eval->add_option("--out", eval_opt.out_dir, "Report output directory")
      ->required();
  eval->add_option("--sweep", eval_opt.sweep,
                   "Corruption sweep: both, noise, or removal")
      ->capture_default_str();
  eval->add_option("--scans", eval_opt.scans,
                   "Scans to evaluate (0 = all)")
      ->capture_default_str();
  eval->add_option("--emd-max-points", eval_opt.emd_max_points,
                   "Point cap per EMD evaluation")
      ->capture_default_str();
  eval->add_option("--emd-epsilon", eval_opt.emd_epsilon,
                   "EMD optimality gap per point")
      ->capture_default_str();

  SampleOptions sample_opt;
  CLI::App* sample = app.add_subcommand(
      "sample", "Decode latent draws into point-set files");
  sample->add_option("--checkpoint", sample_opt.checkpoint,
                     "Model checkpoint")
      ->required();
  sample->add_option("--out", sample_opt.out_dir, "Output directory")
      ->required();
  sample->add_option("--count", sample_opt.count, "Samples to draw")
      ->capture_default_str();

  MatchNnOptions match_opt;
  CLI::App* match = app.add_subcommand(
      "match-nn",
      "Match generated samples to test scans by discriminator features");
  match->add_option("--checkpoint", match_opt.checkpoint,
                    "Adversarial checkpoint")
      ->required();
  match->add_option("--test", match_opt.test, "Test grid container")
      ->required();
  match->add_option("--out", match_opt.out_dir, "Output directory")
      ->required();
  match->add_option("--samples", match_opt.samples, "Samples to generate")
      ->capture_default_str();
  match->add_option("--k", match_opt.k, "Neighbors per sample")
      ->capture_default_str();
  match->add_option("--layer", match_opt.layer,
                    "Discriminator feature layer")
      ->capture_default_str();

  std::string inspect_input;
  CLI::App* inspect = app.add_subcommand(
      "inspect", "Print statistics of a scan, grid container, or checkpoint");
  inspect->add_option("--input", inspect_input, "File to inspect")->required();

  synth->callback([&] { run_synth(synth_opt, global); });
  pre->callback([&] { run_preprocess(pre_opt, global); });
  tvae->callback([&] { run_train_vae(vae_opt, global); });
  tgan->callback([&] { run_train_gan(gan_opt, global); });
  search->callback([&] { run_search(search_opt, global); });
  eval->callback([&] { run_eval_recon(eval_opt, global); });
  sample->callback([&] { run_sample(sample_opt, global); });
  match->callback([&] { run_match_nn(match_opt, global); });
  inspect->callback([&] { run_inspect(inspect_input, global); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
