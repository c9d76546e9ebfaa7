#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lidargen/corruption.hpp"
#include "lidargen/metrics.hpp"
#include "lidargen/models.hpp"
#include "lidargen/projection.hpp"

namespace lidargen {

// --- grid/tensor plumbing ---

// Stacks normalized grids into one (n, c, h, w) tensor.  All grids must be
// normalized and share representation and dimensions.
ad::Tensor grids_to_tensor(std::span<const GridScan> grids);
// Per-cell occupancy replicated across channels, same shape as the batch.
ad::Tensor masks_to_tensor(std::span<const GridScan> grids);
// Splits a batch tensor into normalized grids.  `masks` supplies per-grid
// occupancy; pass an empty span to mark every cell occupied.
std::vector<GridScan> tensor_to_grids(const ad::Tensor& batch,
                                      Representation repr,
                                      std::span<const GridScan> masks);

// --- training ---

struct VaeCurvePoint {
  std::int64_t step = 0;
  double train_loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

struct ValCurvePoint {
  std::int64_t step = 0;
  double val_emd = 0.0;
};

struct TrainVaeConfig {
  ArchSpec arch;
  double lr = 2e-4;
  // Zero trains the plain autoencoder variant (deterministic latent).
  double kl_weight = 1.0;
  int batch_size = 64;
  // Total optimizer updates; zero saves the initialized model untouched.
  std::int64_t max_steps = 1000;
  // Validation probe period in steps (the final step always probes).
  int eval_every = 50;
  std::uint64_t seed = 0;
  // Validation cost settings: scans used per probe, matched point budget,
  // and the assignment tolerance.
  int eval_scans = 16;
  int emd_max_points = 512;
  double emd_epsilon = 0.05;
  std::filesystem::path out_dir;
  // Optional progress hooks: per optimizer step and per validation probe.
  std::function<void(const VaeCurvePoint&)> on_step;
  std::function<void(const ValCurvePoint&)> on_eval;
};

struct TrainVaeResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  // Infinity when no probe ever ran (max_steps == 0).
  double best_val_emd = 0.0;
  std::int64_t best_step = 0;
  std::vector<VaeCurvePoint> curve;      // one entry per optimizer step
  std::vector<ValCurvePoint> val_curve;  // one entry per validation probe
};

// Minimizes reconstruction + KL on the (metric-space) training grids for
// max_steps updates, probing a fixed validation subset by matched-pair
// transport cost every eval_every steps and checkpointing whenever it
// improves.  Writes curve.csv, val.csv and curve.svg plus best.ckpt /
// last.ckpt into out_dir.  Aborts with training_diverged_error the moment a
// loss stops being finite.
TrainVaeResult train_vae(const std::vector<GridScan>& train,
                         const std::vector<GridScan>& val,
                         const NormStats& stats, const TrainVaeConfig& config);

struct GanCurvePoint {
  std::int64_t step = 0;
  double d_loss = 0.0;
  double g_loss = 0.0;
};

struct GanProbePoint {
  std::int64_t step = 0;
  // Mean real score minus mean fake score on the held-out probe.
  double score_gap = 0.0;
  // Fraction of probe scans the frozen discriminator ranks correctly
  // against the mean score of the other side.
  double accuracy = 0.0;
};

struct TrainGanConfig {
  ArchSpec arch;
  double lr = 2e-4;
  GanLossKind loss_kind = GanLossKind::relativistic_average;
  int batch_size = 64;
  // Total alternation rounds (one discriminator + one generator update).
  std::int64_t max_steps = 1000;
  int eval_every = 50;
  std::uint64_t seed = 0;
  int eval_scans = 16;
  std::filesystem::path out_dir;
  std::function<void(const GanCurvePoint&)> on_step;
  std::function<void(const GanProbePoint&)> on_probe;
};

struct TrainGanResult {
  std::filesystem::path checkpoint;
  std::vector<GanCurvePoint> curve;
  std::vector<GanProbePoint> probes;
};

// Alternates one discriminator step (on detached samples) with one generator
// step per round.  Writes curve.csv, probe.csv, curve.svg and gan.ckpt into
// out_dir.
TrainGanResult train_gan(const std::vector<GridScan>& train,
                         const std::vector<GridScan>& val,
                         const NormStats& stats, const TrainGanConfig& config);

// --- hyper-parameter search ---

struct SearchSpace {
  std::vector<double> learning_rates = {1e-4, 2e-4, 1e-3};
  std::vector<int> latent_dims = {64, 128, 160};
  std::vector<int> batch_sizes = {32, 64, 128};
  int trials = 10;
  std::uint64_t seed = 0;
};

struct SearchTrial {
  int index = 0;
  double lr = 0.0;
  int latent_dim = 0;
  int batch_size = 0;
  double val_emd = 0.0;
  std::filesystem::path checkpoint;
};

struct SearchResult {
  std::vector<SearchTrial> trials;
  int best_index = 0;
};

// Trains `space.trials` configurations drawn (without replacement, seeded by
// space.seed) from the cross product of the candidate sets, each for
// base.max_steps updates in its own subdirectory of out_dir, and picks the
// lowest validation transport cost; ties go to the earlier trial.  Writes
// search.csv alongside the trial directories.
SearchResult random_search_vae(const std::vector<GridScan>& train,
                               const std::vector<GridScan>& val,
                               const NormStats& stats,
                               const TrainVaeConfig& base,
                               const SearchSpace& space,
                               const std::filesystem::path& out_dir);

// --- evaluation ---

struct EvalReconConfig {
  std::vector<double> noise_levels = {0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<double> removal_levels = {0.0, 0.05, 0.1, 0.15, 0.25, 0.5, 0.75};
  int emd_max_points = 1024;
  double emd_epsilon = 0.05;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct EvalReconRow {
  CorruptionKind kind = CorruptionKind::additive_noise;
  double level = 0.0;
  std::uint64_t seed = 0;
  // Mean over scans of the per-scan transport cost / squared-distance sums,
  // and the same divided by the matched point count.
  double emd_sum = 0.0;
  double emd_mean = 0.0;
  double chamfer_sum = 0.0;
  double chamfer_mean = 0.0;
  int n_scans = 0;
};

struct EvalReport {
  std::string model_id;
  Representation representation = Representation::cartesian;
  std::vector<EvalReconRow> rows;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

// Corrupt -> encode (posterior mean) -> decode -> compare against the clean
// scan, for every corruption kind and level.  Scans are metric-space grids;
// per-scan work is split across `threads` with a fixed partition so results
// do not depend on thread count.
EvalReport eval_reconstruction(Vae& model, const NormStats& stats,
                               const std::vector<GridScan>& scans,
                               const EvalReconConfig& config,
                               const std::string& model_id = "model");

// One row per corruption level: kind, level, seed, emd_sum, emd_mean,
// chamfer_sum, chamfer_mean, n_scans.
void write_eval_csv(const std::filesystem::path& path,
                    const EvalReport& report);

// --- feature-space matching ---

// Eval-mode discriminator activations after conv stage `layer` for
// metric-space grids, one row per grid.
ad::Tensor disc_features(Gan& model, const NormStats& stats,
                         std::span<const GridScan> grids, int layer);

struct MatchResult {
  int query_index = 0;
  std::vector<int> neighbor_indices;
  std::vector<double> distances;  // ascending, same order as indices
};

// Exact k-nearest rows of `refs` for every row of `queries` by Euclidean
// distance; ties resolve to the lower reference index.
std::vector<MatchResult> nearest_features(const ad::Tensor& queries,
                                          const ad::Tensor& refs, int k);

}  // namespace lidargen
