#include "lidargen/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lidargen/errors.hpp"
#include "lidargen/report.hpp"

namespace lidargen {
namespace {

namespace fs = std::filesystem;

// Independent seed streams hung off the user seed so adding one consumer
// never shifts the draws of another.
constexpr std::uint64_t kStreamShuffle = 1;
constexpr std::uint64_t kStreamNoise = 2;
constexpr std::uint64_t kStreamLatent = 3;
constexpr std::uint64_t kStreamValMatch = 4;
constexpr std::uint64_t kStreamProbe = 5;
constexpr std::uint64_t kStreamTrial = 6;

std::uint64_t stream_seed(std::uint64_t base, std::uint64_t stream,
                          std::uint64_t index) {
  return derive_seed(derive_seed(base, stream), index);
}

void check_dataset(const std::vector<GridScan>& grids, const ArchSpec& arch,
                   const std::string& what) {
  if (grids.empty()) throw empty_dataset_error(what + " set is empty");
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const GridScan& g = grids[i];
    if (g.normalized) {
      throw precondition_error(what +
                               " grids must be metric-space; normalization "
                               "happens inside the harness");
    }
    if (g.height != arch.grid_height || g.width != arch.grid_width ||
        g.channels() != arch.data_channels) {
      throw precondition_error(
          what + " grid " + std::to_string(i) + " is " +
          std::to_string(g.height) + "x" + std::to_string(g.width) + "x" +
          std::to_string(g.channels()) + " but the model expects " +
          std::to_string(arch.grid_height) + "x" +
          std::to_string(arch.grid_width) + "x" +
          std::to_string(arch.data_channels));
    }
    if (g.occupied_count() == 0) {
      throw precondition_error(what + " grid " + std::to_string(i) +
                               " has no occupied cells");
    }
  }
}

std::vector<GridScan> normalize_all(const std::vector<GridScan>& grids,
                                    const NormStats& stats) {
  std::vector<GridScan> out;
  out.reserve(grids.size());
  for (const auto& g : grids) {
    out.push_back(normalize(g, stats, NormDirection::forward));
  }
  return out;
}

void fill_sample(ad::Tensor& batch, int sample, const GridScan& g) {
  const int c = g.channels();
  const int h = g.height;
  const int w = g.width;
  double* dst = batch.data.data() +
                static_cast<std::size_t>(sample) * c * h * w;
  for (int ch = 0; ch < c; ++ch) {
    for (int row = 0; row < h; ++row) {
      for (int col = 0; col < w; ++col) {
        dst[(static_cast<std::size_t>(ch) * h + row) * w + col] =
            g.data[(static_cast<std::size_t>(row) * w + col) * c + ch];
      }
    }
  }
}

void fill_mask(ad::Tensor& batch, int sample, const GridScan& g) {
  const int c = g.channels();
  const int h = g.height;
  const int w = g.width;
  double* dst = batch.data.data() +
                static_cast<std::size_t>(sample) * c * h * w;
  for (int ch = 0; ch < c; ++ch) {
    for (int row = 0; row < h; ++row) {
      for (int col = 0; col < w; ++col) {
        dst[(static_cast<std::size_t>(ch) * h + row) * w + col] =
            g.mask[static_cast<std::size_t>(row) * w + col] ? 1.0 : 0.0;
      }
    }
  }
}

// Validation probe shared by the trainers: the first `eval_scans` scans,
// kept both as normalized model input and as metric point sets.
struct ValProbe {
  Representation repr = Representation::cartesian;
  std::vector<GridScan> norm;
  std::vector<PointSet> clean;
};

ValProbe make_val_probe(const std::vector<GridScan>& val, int eval_scans,
                        const NormStats& stats) {
  ValProbe probe;
  probe.repr = val[0].representation;
  const std::size_t n =
      std::min<std::size_t>(val.size(), static_cast<std::size_t>(eval_scans));
  probe.norm.reserve(n);
  probe.clean.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    probe.norm.push_back(normalize(val[i], stats, NormDirection::forward));
    probe.clean.push_back(unproject(val[i]));
  }
  return probe;
}

// Mean over the probe scans of the matched-pair transport cost between each
// clean scan and its posterior-mean reconstruction.  The point subsample is
// seeded per scan (not per probe), so successive probes are scored on the
// same matched subsets.
double vae_validation_emd(Vae& model, const ValProbe& probe,
                          const NormStats& stats, int emd_max_points,
                          double emd_epsilon, std::uint64_t match_seed) {
  const ad::Tensor recon = model.reconstruct(grids_to_tensor(probe.norm));
  const std::vector<GridScan> grids =
      tensor_to_grids(recon, probe.repr, probe.norm);
  double total = 0.0;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const PointSet rec = unproject(grids[i], &stats);
    const auto [a, b] = equalize(probe.clean[i], rec, emd_max_points,
                                 derive_seed(match_seed, i));
    total += emd_approx(a, b, emd_epsilon);
  }
  return total / static_cast<double>(grids.size());
}

double tensor_mean(const ad::Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v;
  return s / static_cast<double>(t.numel());
}

struct CommonTrainChecks {
  int batch_size;
  std::int64_t max_steps;
  int eval_every;
  int eval_scans;
  const std::filesystem::path* out_dir;
};

void check_train_config(const CommonTrainChecks& c, const char* who) {
  const std::string name(who);
  if (c.batch_size < 1) {
    throw precondition_error(name + ": batch_size must be >= 1");
  }
  if (c.max_steps < 0) {
    throw precondition_error(name + ": max_steps must be >= 0");
  }
  if (c.eval_every < 1) {
    throw precondition_error(name + ": eval_every must be >= 1");
  }
  if (c.eval_scans < 1) {
    throw precondition_error(name + ": eval_scans must be >= 1");
  }
  if (c.out_dir->empty()) {
    throw precondition_error(name + ": out_dir is required");
  }
}

void write_vae_reports(const fs::path& out_dir,
                       const std::vector<VaeCurvePoint>& curve,
                       const std::vector<ValCurvePoint>& val_curve) {
  {
    CsvWriter csv(out_dir / "curve.csv");
    csv.header({"step", "train_loss", "recon", "kl"});
    for (const VaeCurvePoint& pt : curve) {
      csv.cell(static_cast<long long>(pt.step))
          .cell(pt.train_loss)
          .cell(pt.recon)
          .cell(pt.kl);
      csv.end_row();
    }
  }
  {
    CsvWriter csv(out_dir / "val.csv");
    csv.header({"step", "val_emd"});
    for (const ValCurvePoint& pt : val_curve) {
      csv.cell(static_cast<long long>(pt.step)).cell(pt.val_emd);
      csv.end_row();
    }
  }
  std::vector<Series> series(4);
  series[0].label = "train loss";
  series[1].label = "recon";
  series[2].label = "kl";
  series[3].label = "val emd";
  for (const VaeCurvePoint& pt : curve) {
    const double x = static_cast<double>(pt.step);
    series[0].x.push_back(x);
    series[0].y.push_back(pt.train_loss);
    series[1].x.push_back(x);
    series[1].y.push_back(pt.recon);
    series[2].x.push_back(x);
    series[2].y.push_back(pt.kl);
  }
  for (const ValCurvePoint& pt : val_curve) {
    series[3].x.push_back(static_cast<double>(pt.step));
    series[3].y.push_back(pt.val_emd);
  }
  write_svg_chart(out_dir / "curve.svg", "autoencoder training", "step",
                  "value", series);
}

void write_gan_reports(const fs::path& out_dir,
                       const std::vector<GanCurvePoint>& curve,
                       const std::vector<GanProbePoint>& probes) {
  {
    CsvWriter csv(out_dir / "curve.csv");
    csv.header({"step", "d_loss", "g_loss"});
    for (const GanCurvePoint& pt : curve) {
      csv.cell(static_cast<long long>(pt.step))
          .cell(pt.d_loss)
          .cell(pt.g_loss);
      csv.end_row();
    }
  }
  {
    CsvWriter csv(out_dir / "probe.csv");
    csv.header({"step", "score_gap", "accuracy"});
    for (const GanProbePoint& pt : probes) {
      csv.cell(static_cast<long long>(pt.step))
          .cell(pt.score_gap)
          .cell(pt.accuracy);
      csv.end_row();
    }
  }
  std::vector<Series> series(4);
  series[0].label = "d loss";
  series[1].label = "g loss";
  series[2].label = "score gap";
  series[3].label = "accuracy";
  for (const GanCurvePoint& pt : curve) {
    const double x = static_cast<double>(pt.step);
    series[0].x.push_back(x);
    series[0].y.push_back(pt.d_loss);
    series[1].x.push_back(x);
    series[1].y.push_back(pt.g_loss);
  }
  for (const GanProbePoint& pt : probes) {
    const double x = static_cast<double>(pt.step);
    series[2].x.push_back(x);
    series[2].y.push_back(pt.score_gap);
    series[3].x.push_back(x);
    series[3].y.push_back(pt.accuracy);
  }
  write_svg_chart(out_dir / "curve.svg", "adversarial training", "step",
                  "value", series);
}

}  // namespace

ad::Tensor grids_to_tensor(std::span<const GridScan> grids) {
  if (grids.empty()) throw precondition_error("grids_to_tensor: empty batch");
  const GridScan& first = grids[0];
  for (const GridScan& g : grids) {
    if (!g.normalized) {
      throw precondition_error("grids_to_tensor: grids must be normalized");
    }
    if (g.representation != first.representation ||
        g.height != first.height || g.width != first.width) {
      throw precondition_error("grids_to_tensor: mixed grid shapes");
    }
  }
  ad::Tensor out({static_cast<int>(grids.size()), first.channels(),
                  first.height, first.width});
  for (std::size_t i = 0; i < grids.size(); ++i) {
    fill_sample(out, static_cast<int>(i), grids[i]);
  }
  return out;
}

ad::Tensor masks_to_tensor(std::span<const GridScan> grids) {
  if (grids.empty()) throw precondition_error("masks_to_tensor: empty batch");
  const GridScan& first = grids[0];
  ad::Tensor out({static_cast<int>(grids.size()), first.channels(),
                  first.height, first.width});
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i].height != first.height || grids[i].width != first.width ||
        grids[i].channels() != first.channels()) {
      throw precondition_error("masks_to_tensor: mixed grid shapes");
    }
    fill_mask(out, static_cast<int>(i), grids[i]);
  }
  return out;
}

std::vector<GridScan> tensor_to_grids(const ad::Tensor& batch,
                                      Representation repr,
                                      std::span<const GridScan> masks) {
  if (batch.rank() != 4) {
    throw precondition_error("tensor_to_grids: batch must be rank 4");
  }
  const int n = batch.dim(0);
  const int c = batch.dim(1);
  const int h = batch.dim(2);
  const int w = batch.dim(3);
  if (c != channel_count(repr)) {
    throw precondition_error(
        "tensor_to_grids: channel count does not match the representation");
  }
  if (!masks.empty() && static_cast<int>(masks.size()) != n) {
    throw precondition_error(
        "tensor_to_grids: need one mask grid per sample (or none)");
  }
  std::vector<GridScan> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    GridScan g = make_empty_grid(repr, h, w);
    g.normalized = true;
    if (masks.empty()) {
      std::fill(g.mask.begin(), g.mask.end(), std::uint8_t{1});
    } else {
      const GridScan& donor = masks[static_cast<std::size_t>(i)];
      if (donor.height != h || donor.width != w) {
        throw precondition_error("tensor_to_grids: mask grid size mismatch");
      }
      g.mask = donor.mask;
    }
    const double* src =
        batch.data.data() + static_cast<std::size_t>(i) * c * h * w;
    for (int row = 0; row < h; ++row) {
      for (int col = 0; col < w; ++col) {
        if (!g.mask[static_cast<std::size_t>(row) * w + col]) continue;
        for (int ch = 0; ch < c; ++ch) {
          g.data[(static_cast<std::size_t>(row) * w + col) * c + ch] =
              static_cast<float>(
                  src[(static_cast<std::size_t>(ch) * h + row) * w + col]);
        }
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

TrainVaeResult train_vae(const std::vector<GridScan>& train,
                         const std::vector<GridScan>& val,
                         const NormStats& stats,
                         const TrainVaeConfig& config) {
  config.arch.validate();
  check_dataset(train, config.arch, "training");
  check_dataset(val, config.arch, "validation");
  check_train_config({config.batch_size, config.max_steps, config.eval_every,
                      config.eval_scans, &config.out_dir},
                     "train_vae");
  if (config.kl_weight < 0.0) {
    throw precondition_error("train_vae: kl_weight must be non-negative");
  }
  fs::create_directories(config.out_dir);

  Vae model(config.arch, config.seed);
  ad::AdamConfig adam_config;
  adam_config.lr = config.lr;
  ad::Adam optimizer(adam_config);

  TrainVaeResult result;
  result.best_val_emd = std::numeric_limits<double>::infinity();
  result.best_checkpoint = config.out_dir / "best.ckpt";
  result.last_checkpoint = config.out_dir / "last.ckpt";

  if (config.max_steps == 0) {
    // The zero-step run hands back the freshly initialized model.
    save_vae_checkpoint(result.best_checkpoint, model, optimizer, stats);
    save_vae_checkpoint(result.last_checkpoint, model, optimizer, stats);
    write_vae_reports(config.out_dir, result.curve, result.val_curve);
    return result;
  }

  const std::vector<GridScan> train_norm = normalize_all(train, stats);
  const ValProbe probe = make_val_probe(val, config.eval_scans, stats);
  const std::uint64_t match_seed = stream_seed(config.seed, kStreamValMatch, 0);

  const int c = config.arch.data_channels;
  const int h = config.arch.grid_height;
  const int w = config.arch.grid_width;
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  std::uint64_t epoch = 0;

  while (step < config.max_steps) {
    ++epoch;
    std::mt19937_64 shuffle_rng(stream_seed(config.seed, kStreamShuffle, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t start = 0;
         start < order.size() && step < config.max_steps;
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(config.batch_size));
      const int bs = static_cast<int>(end - start);
      ad::Tensor batch({bs, c, h, w});
      ad::Tensor mask({bs, c, h, w});
      for (std::size_t j = start; j < end; ++j) {
        const GridScan& g = train_norm[static_cast<std::size_t>(order[j])];
        fill_sample(batch, static_cast<int>(j - start), g);
        fill_mask(mask, static_cast<int>(j - start), g);
      }
      ++step;
      Vae::Loss loss = model.loss(
          batch, mask,
          stream_seed(config.seed, kStreamNoise,
                      static_cast<std::uint64_t>(step)),
          /*training=*/true, config.kl_weight);
      const double total = loss.total->value.item();
      if (!std::isfinite(total)) {
        throw training_diverged_error(
            "training aborted: non-finite loss at step " +
            std::to_string(step));
      }
      model.params().zero_grad();
      ad::backward(loss.total);
      optimizer.step(model.params());

      VaeCurvePoint pt;
      pt.step = step;
      pt.train_loss = total;
      pt.recon = loss.recon->value.item();
      pt.kl = loss.kl->value.item();
      result.curve.push_back(pt);
      if (config.on_step) config.on_step(pt);

      if (step % config.eval_every == 0 || step == config.max_steps) {
        ValCurvePoint vp;
        vp.step = step;
        vp.val_emd =
            vae_validation_emd(model, probe, stats, config.emd_max_points,
                               config.emd_epsilon, match_seed);
        if (!std::isfinite(vp.val_emd)) {
          throw training_diverged_error(
              "training aborted: non-finite validation cost at step " +
              std::to_string(step));
        }
        if (vp.val_emd < result.best_val_emd) {
          result.best_val_emd = vp.val_emd;
          result.best_step = step;
          save_vae_checkpoint(result.best_checkpoint, model, optimizer, stats);
        }
        result.val_curve.push_back(vp);
        if (config.on_eval) config.on_eval(vp);
      }
    }
  }

  save_vae_checkpoint(result.last_checkpoint, model, optimizer, stats);
  write_vae_reports(config.out_dir, result.curve, result.val_curve);
  return result;
}

TrainGanResult train_gan(const std::vector<GridScan>& train,
                         const std::vector<GridScan>& val,
                         const NormStats& stats,
                         const TrainGanConfig& config) {
  config.arch.validate();
  check_dataset(train, config.arch, "training");
  check_dataset(val, config.arch, "validation");
  check_train_config({config.batch_size, config.max_steps, config.eval_every,
                      config.eval_scans, &config.out_dir},
                     "train_gan");
  fs::create_directories(config.out_dir);

  Gan model(config.arch, config.seed);
  ad::AdamConfig adam_config;
  adam_config.lr = config.lr;
  ad::Adam gen_optimizer(adam_config);
  ad::Adam disc_optimizer(adam_config);

  TrainGanResult result;
  result.checkpoint = config.out_dir / "gan.ckpt";

  if (config.max_steps == 0) {
    save_gan_checkpoint(result.checkpoint, model, gen_optimizer,
                        disc_optimizer, stats);
    write_gan_reports(config.out_dir, result.curve, result.probes);
    return result;
  }

  const std::vector<GridScan> train_norm = normalize_all(train, stats);
  const ValProbe probe = make_val_probe(val, config.eval_scans, stats);
  const ad::Tensor probe_batch = grids_to_tensor(probe.norm);

  const int c = config.arch.data_channels;
  const int h = config.arch.grid_height;
  const int w = config.arch.grid_width;
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  std::uint64_t epoch = 0;

  const auto check_finite = [](double v, const char* which,
                               std::int64_t at_step) {
    if (!std::isfinite(v)) {
      throw training_diverged_error(
          std::string("training aborted: non-finite ") + which +
          " loss at step " + std::to_string(at_step));
    }
  };

  while (step < config.max_steps) {
    ++epoch;
    std::mt19937_64 shuffle_rng(stream_seed(config.seed, kStreamShuffle, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t start = 0;
         start < order.size() && step < config.max_steps;
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(config.batch_size));
      const int bs = static_cast<int>(end - start);
      ad::Tensor batch({bs, c, h, w});
      for (std::size_t j = start; j < end; ++j) {
        fill_sample(batch, static_cast<int>(j - start),
                    train_norm[static_cast<std::size_t>(order[j])]);
      }
      const ad::Var real = ad::constant(std::move(batch));
      ++step;

      // Discriminator update: judge the real batch against a detached sample
      // so no gradient reaches the generator.
      std::mt19937_64 z_rng_d(stream_seed(
          config.seed, kStreamLatent, 2 * static_cast<std::uint64_t>(step)));
      const ad::Var z_d =
          ad::constant(ad::randn({bs, config.arch.latent_dim}, z_rng_d));
      const ad::Var fake_d = ad::detach(model.generate(z_d, true));
      ad::Var d_loss;
      {
        const ad::Var real_scores = model.discriminate(real, true);
        const ad::Var fake_scores = model.discriminate(fake_d, true);
        d_loss = config.loss_kind == GanLossKind::relativistic_average
                     ? ragan_d_loss(real_scores, fake_scores)
                     : gan_d_loss(real_scores, fake_scores);
      }
      const double d_value = d_loss->value.item();
      check_finite(d_value, "discriminator", step);
      model.discriminator_params().zero_grad();
      ad::backward(d_loss);
      disc_optimizer.step(model.discriminator_params());

      // Generator update on fresh noise against the updated discriminator.
      std::mt19937_64 z_rng_g(
          stream_seed(config.seed, kStreamLatent,
                      2 * static_cast<std::uint64_t>(step) + 1));
      const ad::Var z_g =
          ad::constant(ad::randn({bs, config.arch.latent_dim}, z_rng_g));
      const ad::Var fake_g = model.generate(z_g, true);
      ad::Var g_loss;
      if (config.loss_kind == GanLossKind::relativistic_average) {
        const ad::Var real_scores = model.discriminate(real, true);
        const ad::Var fake_scores = model.discriminate(fake_g, true);
        g_loss = ragan_g_loss(real_scores, fake_scores);
      } else {
        g_loss = gan_g_loss(model.discriminate(fake_g, true));
      }
      const double g_value = g_loss->value.item();
      check_finite(g_value, "generator", step);
      model.generator_params().zero_grad();
      ad::backward(g_loss);
      gen_optimizer.step(model.generator_params());

      GanCurvePoint pt;
      pt.step = step;
      pt.d_loss = d_value;
      pt.g_loss = g_value;
      result.curve.push_back(pt);
      if (config.on_step) config.on_step(pt);

      if (step % config.eval_every == 0 || step == config.max_steps) {
        // Probe: frozen discriminator on held-out scans vs fresh samples.
        GanProbePoint pp;
        pp.step = step;
        const ad::Tensor real_scores =
            model.discriminate(ad::constant(probe_batch), false)->value;
        const ad::Tensor fake_batch = model.sample(
            static_cast<int>(probe.norm.size()),
            stream_seed(config.seed, kStreamProbe,
                        static_cast<std::uint64_t>(step)));
        const ad::Tensor fake_scores =
            model.discriminate(ad::constant(fake_batch), false)->value;
        const double mean_real = tensor_mean(real_scores);
        const double mean_fake = tensor_mean(fake_scores);
        pp.score_gap = mean_real - mean_fake;
        double real_right = 0.0;
        for (double v : real_scores.data) {
          real_right += (v > mean_fake) ? 1.0 : 0.0;
        }
        double fake_right = 0.0;
        for (double v : fake_scores.data) {
          fake_right += (v < mean_real) ? 1.0 : 0.0;
        }
        pp.accuracy =
            0.5 * (real_right / static_cast<double>(real_scores.numel()) +
                   fake_right / static_cast<double>(fake_scores.numel()));
        result.probes.push_back(pp);
        if (config.on_probe) config.on_probe(pp);
      }
    }
  }

  save_gan_checkpoint(result.checkpoint, model, gen_optimizer, disc_optimizer,
                      stats);
  write_gan_reports(config.out_dir, result.curve, result.probes);
  return result;
}

SearchResult random_search_vae(const std::vector<GridScan>& train,
                               const std::vector<GridScan>& val,
                               const NormStats& stats,
                               const TrainVaeConfig& base,
                               const SearchSpace& space,
                               const std::filesystem::path& out_dir) {
  if (space.learning_rates.empty() || space.latent_dims.empty() ||
      space.batch_sizes.empty()) {
    throw precondition_error("random_search_vae: empty search space");
  }
  if (space.trials < 1) {
    throw precondition_error("random_search_vae: trials must be >= 1");
  }
  if (out_dir.empty()) {
    throw precondition_error("random_search_vae: out_dir is required");
  }
  fs::create_directories(out_dir);

  struct Combo {
    double lr;
    int latent_dim;
    int batch_size;
  };
  std::vector<Combo> combos;
  for (double lr : space.learning_rates) {
    for (int z : space.latent_dims) {
      for (int bs : space.batch_sizes) {
        combos.push_back({lr, z, bs});
      }
    }
  }
  std::mt19937_64 rng(derive_seed(space.seed, kStreamTrial));
  std::shuffle(combos.begin(), combos.end(), rng);
  const int n = std::min(space.trials, static_cast<int>(combos.size()));

  SearchResult result;
  for (int i = 0; i < n; ++i) {
    TrainVaeConfig cfg = base;
    cfg.lr = combos[static_cast<std::size_t>(i)].lr;
    cfg.arch.latent_dim = combos[static_cast<std::size_t>(i)].latent_dim;
    cfg.batch_size = combos[static_cast<std::size_t>(i)].batch_size;
    cfg.seed = stream_seed(space.seed, kStreamTrial,
                           static_cast<std::uint64_t>(i) + 1);
    cfg.out_dir = out_dir / ("trial_" + std::to_string(i));
    const TrainVaeResult r = train_vae(train, val, stats, cfg);

    SearchTrial trial;
    trial.index = i;
    trial.lr = cfg.lr;
    trial.latent_dim = cfg.arch.latent_dim;
    trial.batch_size = cfg.batch_size;
    trial.val_emd = r.best_val_emd;
    trial.checkpoint = r.best_checkpoint;
    result.trials.push_back(std::move(trial));
  }

  result.best_index = 0;
  for (int i = 1; i < n; ++i) {
    if (result.trials[static_cast<std::size_t>(i)].val_emd <
        result.trials[static_cast<std::size_t>(result.best_index)].val_emd) {
      result.best_index = i;
    }
  }

  CsvWriter csv(out_dir / "search.csv");
  csv.header({"trial", "lr", "latent_dim", "batch_size", "val_emd", "best"});
  for (const SearchTrial& t : result.trials) {
    csv.cell(t.index)
        .cell(t.lr)
        .cell(t.latent_dim)
        .cell(t.batch_size)
        .cell(t.val_emd)
        .cell(t.index == result.best_index ? 1 : 0);
    csv.end_row();
  }
  return result;
}

EvalReport eval_reconstruction(Vae& model, const NormStats& stats,
                               const std::vector<GridScan>& scans,
                               const EvalReconConfig& config,
                               const std::string& model_id) {
  check_dataset(scans, model.arch(), "evaluation");
  if (config.emd_max_points < 1) {
    throw precondition_error(
        "eval_reconstruction: emd_max_points must be >= 1");
  }
  if (!(config.emd_epsilon > 0.0)) {
    throw precondition_error("eval_reconstruction: emd_epsilon must be > 0");
  }
  const int threads = std::max(1, config.threads);
  const std::size_t n = scans.size();

  struct RowSpec {
    CorruptionKind kind;
    double level;
  };
  std::vector<RowSpec> rows;
  for (double sigma : config.noise_levels) {
    rows.push_back({CorruptionKind::additive_noise, sigma});
  }
  for (double p : config.removal_levels) {
    rows.push_back({CorruptionKind::data_removal, p});
  }

  std::vector<PointSet> clean(n);
  for (std::size_t i = 0; i < n; ++i) clean[i] = unproject(scans[i]);

  struct PerScan {
    double emd_sum = 0.0;
    double emd_mean = 0.0;
    double chamfer_sum = 0.0;
    double chamfer_mean = 0.0;
  };

  EvalReport report;
  report.model_id = model_id;
  report.representation = scans[0].representation;
  report.rows.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::uint64_t row_seed = derive_seed(config.seed, r);
    std::vector<PerScan> per(n);

    // Work is keyed by scan index with per-scan derived seeds, so the result
    // is independent of the thread partition; eval-mode forwards only read
    // the model.
    const auto worker = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        CorruptionSpec spec;
        spec.kind = rows[r].kind;
        spec.level = rows[r].level;
        spec.seed = derive_seed(row_seed, i);
        const GridScan corrupted = apply_corruption(scans[i], spec, stats);
        const GridScan norm =
            normalize(corrupted, stats, NormDirection::forward);
        const ad::Tensor recon =
            model.reconstruct(grids_to_tensor(std::span(&norm, 1)));
        // The reconstruction keeps the clean scan's occupancy: corruption
        // degrades only what the model sees, not what it is scored on.
        const std::vector<GridScan> grids = tensor_to_grids(
            recon, scans[i].representation, std::span(&scans[i], 1));
        const PointSet rec = unproject(grids[0], &stats);
        const auto [a, b] = equalize(clean[i], rec, config.emd_max_points,
                                     derive_seed(spec.seed, 1));
        const double emd = emd_approx(a, b, config.emd_epsilon);
        const double cham = chamfer(clean[i], rec);
        per[i].emd_sum = emd;
        per[i].emd_mean = emd / static_cast<double>(a.size());
        per[i].chamfer_sum = cham;
        per[i].chamfer_mean =
            cham / static_cast<double>(clean[i].size() + rec.size());
      }
    };

    if (threads == 1 || n < 2) {
      worker(0, n);
    } else {
      const int t_count = std::min<int>(threads, static_cast<int>(n));
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(
          static_cast<std::size_t>(t_count));
      for (int t = 0; t < t_count; ++t) {
        const std::size_t lo = n * static_cast<std::size_t>(t) /
                               static_cast<std::size_t>(t_count);
        const std::size_t hi = n * (static_cast<std::size_t>(t) + 1) /
                               static_cast<std::size_t>(t_count);
        pool.emplace_back([&, lo, hi, t]() {
          try {
            worker(lo, hi);
          } catch (...) {
            errors[static_cast<std::size_t>(t)] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }

    EvalReconRow row;
    row.kind = rows[r].kind;
    row.level = rows[r].level;
    row.seed = row_seed;
    row.n_scans = static_cast<int>(n);
    for (std::size_t i = 0; i < n; ++i) {
      row.emd_sum += per[i].emd_sum;
      row.emd_mean += per[i].emd_mean;
      row.chamfer_sum += per[i].chamfer_sum;
      row.chamfer_mean += per[i].chamfer_mean;
    }
    row.emd_sum /= static_cast<double>(n);
    row.emd_mean /= static_cast<double>(n);
    row.chamfer_sum /= static_cast<double>(n);
    row.chamfer_mean /= static_cast<double>(n);
    report.rows.push_back(row);
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["model_id"] = model_id;
  j["representation"] = to_string(representation);
  j["rows"] = nlohmann::json::array();
  for (const EvalReconRow& row : rows) {
    nlohmann::json r;
    r["kind"] = to_string(row.kind);
    r["level"] = row.level;
    r["seed"] = row.seed;
    r["emd_sum"] = row.emd_sum;
    r["emd_mean"] = row.emd_mean;
    r["chamfer_sum"] = row.chamfer_sum;
    r["chamfer_mean"] = row.chamfer_mean;
    r["n_scans"] = row.n_scans;
    j["rows"].push_back(std::move(r));
  }
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw malformed_input_error(std::string("bad evaluation report: ") +
                                e.what());
  }
  EvalReport report;
  try {
    report.model_id = j.at("model_id").get<std::string>();
    report.representation =
        representation_from_string(j.at("representation").get<std::string>());
    for (const auto& r : j.at("rows")) {
      EvalReconRow row;
      row.kind = corruption_kind_from_string(r.at("kind").get<std::string>());
      row.level = r.at("level").get<double>();
      row.seed = r.at("seed").get<std::uint64_t>();
      row.emd_sum = r.at("emd_sum").get<double>();
      row.emd_mean = r.at("emd_mean").get<double>();
      row.chamfer_sum = r.at("chamfer_sum").get<double>();
      row.chamfer_mean = r.at("chamfer_mean").get<double>();
      row.n_scans = r.at("n_scans").get<int>();
      report.rows.push_back(row);
    }
  } catch (const nlohmann::json::exception& e) {
    throw malformed_input_error(std::string("bad evaluation report: ") +
                                e.what());
  }
  return report;
}

void write_eval_csv(const std::filesystem::path& path,
                    const EvalReport& report) {
  CsvWriter csv(path);
  csv.header({"kind", "level", "seed", "emd_sum", "emd_mean", "chamfer_sum",
              "chamfer_mean", "n_scans"});
  for (const EvalReconRow& row : report.rows) {
    csv.cell(to_string(row.kind))
        .cell(row.level)
        .cell(std::to_string(row.seed))
        .cell(row.emd_sum)
        .cell(row.emd_mean)
        .cell(row.chamfer_sum)
        .cell(row.chamfer_mean)
        .cell(row.n_scans);
    csv.end_row();
  }
}

ad::Tensor disc_features(Gan& model, const NormStats& stats,
                         std::span<const GridScan> grids, int layer) {
  if (grids.empty()) throw precondition_error("disc_features: no grids");
  const ArchSpec& arch = model.arch();
  std::vector<GridScan> norm;
  norm.reserve(grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const GridScan& g = grids[i];
    if (g.normalized) {
      throw precondition_error("disc_features: grids must be metric-space");
    }
    if (g.height != arch.grid_height || g.width != arch.grid_width ||
        g.channels() != arch.data_channels) {
      throw precondition_error("disc_features: grid " + std::to_string(i) +
                               " does not match the model geometry");
    }
    norm.push_back(normalize(g, stats, NormDirection::forward));
  }

  // Chunked forward passes bound peak memory on large query sets.
  constexpr std::size_t kChunk = 16;
  ad::Tensor out;
  for (std::size_t start = 0; start < norm.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, norm.size() - start);
    const std::span<const GridScan> chunk(norm.data() + start, len);
    const ad::Tensor features =
        model.features(ad::constant(grids_to_tensor(chunk)), layer)->value;
    if (start == 0) {
      out = ad::Tensor({static_cast<int>(norm.size()), features.dim(1)});
    }
    std::copy(features.data.begin(), features.data.end(),
              out.data.begin() +
                  static_cast<std::ptrdiff_t>(
                      start * static_cast<std::size_t>(features.dim(1))));
  }
  return out;
}

std::vector<MatchResult> nearest_features(const ad::Tensor& queries,
                                          const ad::Tensor& refs, int k) {
  if (queries.rank() != 2 || refs.rank() != 2) {
    throw precondition_error("nearest_features: feature matrices are rank 2");
  }
  if (queries.dim(1) != refs.dim(1)) {
    throw precondition_error("nearest_features: feature width mismatch");
  }
  const int nq = queries.dim(0);
  const int nr = refs.dim(0);
  const int d = queries.dim(1);
  if (k < 1 || k > nr) {
    throw precondition_error(
        "nearest_features: k must be between 1 and the reference count");
  }

  std::vector<MatchResult> out;
  out.reserve(static_cast<std::size_t>(nq));
  std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(nr));
  for (int q = 0; q < nq; ++q) {
    const double* qv =
        queries.data.data() + static_cast<std::size_t>(q) * d;
    for (int j = 0; j < nr; ++j) {
      const double* rv = refs.data.data() + static_cast<std::size_t>(j) * d;
      double dist2 = 0.0;
      for (int t = 0; t < d; ++t) {
        const double diff = qv[t] - rv[t];
        dist2 += diff * diff;
      }
      cand[static_cast<std::size_t>(j)] = {dist2, j};
    }
    // Pair order breaks distance ties toward the lower reference index.
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    MatchResult m;
    m.query_index = q;
    m.neighbor_indices.reserve(static_cast<std::size_t>(k));
    m.distances.reserve(static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) {
      m.neighbor_indices.push_back(cand[static_cast<std::size_t>(t)].second);
      m.distances.push_back(
          std::sqrt(cand[static_cast<std::size_t>(t)].first));
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace lidargen
