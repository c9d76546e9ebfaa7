#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lidargen/autodiff.hpp"
#include "lidargen/projection.hpp"

namespace lidargen {

// Geometry of the convolutional generator/discriminator pair.  The decoder
// grows a (init_h, init_w) seed through one transposed convolution per stage
// until it reaches (grid_height, grid_width); the discriminator and encoder
// run the same stages in reverse.  Per axis, a stage of stride 1 uses kernel
// 3 and a stage of stride 2 uses kernel 4, both with padding 1, so each
// stage scales that axis by exactly its stride.
struct ArchSpec {
  int grid_height = 40;
  int grid_width = 256;
  int data_channels = 2;
  int base_channels = 32;
  int latent_dim = 128;
  int init_h = 5;
  int init_w = 8;
  // Decoder-order (coarse-to-fine) per-stage (stride_h, stride_w).
  std::vector<std::pair<int, int>> stage_strides = {
      {1, 2}, {1, 2}, {2, 2}, {2, 2}, {2, 2}};

  int num_stages() const { return static_cast<int>(stage_strides.size()); }

  // Feature width entering decoder stage `i` (0 = the reshaped projection);
  // the final stage always emits data_channels.
  int decoder_width(int i) const;
  // Feature width leaving discriminator conv `i` (1-based).
  int discriminator_width(int i) const;

  // Throws precondition_error unless the stages compose init_h x init_w into
  // grid_height x grid_width with strides in {1, 2} and an even base width.
  void validate() const;

  static ArchSpec standard(Representation repr, int base_channels = 32,
                           int latent_dim = 128);
  // Tiny 4x8 geometry for fast numeric tests.
  static ArchSpec miniature(Representation repr);

  bool operator==(const ArchSpec&) const = default;

  std::string to_json() const;
  static ArchSpec from_json(const std::string& text);
};

using BufferMap = std::map<std::string, ad::Tensor>;

// The three module descriptors are stateless geometry + naming: parameters
// and batch-norm running buffers live in the owner's ParamStore/BufferMap so
// models stay movable and checkpointing sees one flat namespace.

class Decoder {
 public:
  Decoder() = default;
  Decoder(const ArchSpec& spec, std::string prefix);

  void init_params(ad::ParamStore& store, BufferMap& buffers,
                   std::mt19937_64& rng) const;
  // z (n, latent_dim) -> (n, data_channels, grid_height, grid_width) in
  // (-1, 1) through the final tanh.
  ad::Var forward(const ad::Var& z, const ad::ParamStore& store,
                  BufferMap& buffers, bool training) const;

 private:
  ArchSpec spec_;
  std::string prefix_;
};

class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const ArchSpec& spec, std::string prefix);

  void init_params(ad::ParamStore& store, BufferMap& buffers,
                   std::mt19937_64& rng) const;
  // x (n, c, h, w) -> raw scores (n, 1); no output nonlinearity.
  ad::Var forward(const ad::Var& x, const ad::ParamStore& store,
                  BufferMap& buffers, bool training) const;
  // Flattened activations after conv stage `layer` (1-based), eval mode.
  ad::Var features(const ad::Var& x, const ad::ParamStore& store,
                   BufferMap& buffers, int layer) const;

 private:
  ad::Var forward_convs(const ad::Var& x, const ad::ParamStore& store,
                        BufferMap& buffers, bool training, int up_to) const;

  ArchSpec spec_;
  std::string prefix_;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const ArchSpec& spec, std::string prefix);

  void init_params(ad::ParamStore& store, BufferMap& buffers,
                   std::mt19937_64& rng) const;
  struct Output {
    ad::Var mu;
    ad::Var log_var;
  };
  // x (n, c, h, w) -> posterior parameters, each (n, latent_dim).
  Output forward(const ad::Var& x, const ad::ParamStore& store,
                 BufferMap& buffers, bool training) const;

 private:
  ArchSpec spec_;
  std::string prefix_;
};

// --- loss building blocks ---

// Sum over masked elements of (pred - target)^2, averaged over the batch
// dimension.  `mask` must match pred's shape with entries in {0, 1}.
ad::Var masked_squared_error(const ad::Var& pred, const ad::Var& target,
                             const ad::Tensor& mask);

// Closed-form KL(q(z|x) || N(0, I)) summed over latent dims, averaged over
// the batch: -0.5 * sum(1 + log_var - mu^2 - exp(log_var)) / n.
ad::Var kl_divergence(const ad::Var& mu, const ad::Var& log_var);

// z = mu + exp(0.5 * log_var) * eps with eps ~ N(0, I) drawn from `seed`.
ad::Var reparameterize(const ad::Var& mu, const ad::Var& log_var,
                       std::uint64_t seed);

enum class GanLossKind : std::uint8_t {
  relativistic_average = 0,
  non_saturating = 1,
};

// Relativistic-average losses on raw scores: each side is judged against the
// mean score of the other side, through a numerically stable softplus form.
// When all scores are equal both losses are exactly 2*ln(2).
ad::Var ragan_d_loss(const ad::Var& real_scores, const ad::Var& fake_scores);
ad::Var ragan_g_loss(const ad::Var& real_scores, const ad::Var& fake_scores);
// Classic non-saturating alternatives.
ad::Var gan_d_loss(const ad::Var& real_scores, const ad::Var& fake_scores);
ad::Var gan_g_loss(const ad::Var& fake_scores);

// --- models ---

class Vae {
 public:
  Vae(const ArchSpec& spec, std::uint64_t seed);

  const ArchSpec& arch() const { return spec_; }
  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }
  BufferMap& buffers() { return buffers_; }
  const BufferMap& buffers() const { return buffers_; }

  Encoder::Output encode(const ad::Var& x, bool training);
  ad::Var decode(const ad::Var& z, bool training);

  struct Loss {
    ad::Var total;
    ad::Var recon;
    ad::Var kl;
  };
  // Evidence lower bound (negated, to minimize) on a normalized batch with
  // its occupancy mask expanded to the batch shape.
  Loss loss(const ad::Tensor& batch, const ad::Tensor& mask,
            std::uint64_t noise_seed, bool training, double kl_weight = 1.0);

  // Eval-mode reconstruction through the posterior mean; no graph kept.
  ad::Tensor reconstruct(const ad::Tensor& batch);
  // Eval-mode decode of latent draws; no graph kept.
  ad::Tensor sample(int count, std::uint64_t seed);

 private:
  ArchSpec spec_;
  ad::ParamStore store_;
  BufferMap buffers_;
  Encoder encoder_;
  Decoder decoder_;
};

class Gan {
 public:
  Gan(const ArchSpec& spec, std::uint64_t seed);

  const ArchSpec& arch() const { return spec_; }
  ad::ParamStore& generator_params() { return gen_store_; }
  const ad::ParamStore& generator_params() const { return gen_store_; }
  ad::ParamStore& discriminator_params() { return disc_store_; }
  const ad::ParamStore& discriminator_params() const { return disc_store_; }
  BufferMap& generator_buffers() { return gen_buffers_; }
  const BufferMap& generator_buffers() const { return gen_buffers_; }
  BufferMap& discriminator_buffers() { return disc_buffers_; }
  const BufferMap& discriminator_buffers() const { return disc_buffers_; }

  ad::Var generate(const ad::Var& z, bool training);
  ad::Var discriminate(const ad::Var& x, bool training);
  // Flattened eval-mode activations after discriminator conv `layer`.
  ad::Var features(const ad::Var& x, int layer);

  // Eval-mode generation from seeded latent draws; no graph kept.
  ad::Tensor sample(int count, std::uint64_t seed);

 private:
  ArchSpec spec_;
  ad::ParamStore gen_store_;
  ad::ParamStore disc_store_;
  BufferMap gen_buffers_;
  BufferMap disc_buffers_;
  Decoder generator_;
  Discriminator discriminator_;
};

// --- checkpoints ---

// Container holding the architecture, every named parameter and running
// buffer as float32, the optimizer state, and optionally the normalization
// statistics the model was trained against.

struct VaeCheckpoint {
  Vae model;
  ad::Adam optimizer;
  std::optional<NormStats> stats;
};

struct GanCheckpoint {
  Gan model;
  ad::Adam gen_optimizer;
  ad::Adam disc_optimizer;
  std::optional<NormStats> stats;
};

void save_vae_checkpoint(const std::filesystem::path& path, const Vae& model,
                         const ad::Adam& optimizer,
                         const std::optional<NormStats>& stats);
VaeCheckpoint load_vae_checkpoint(const std::filesystem::path& path);

void save_gan_checkpoint(const std::filesystem::path& path, const Gan& model,
                         const ad::Adam& gen_optimizer,
                         const ad::Adam& disc_optimizer,
                         const std::optional<NormStats>& stats);
GanCheckpoint load_gan_checkpoint(const std::filesystem::path& path);

// Peek at which kind of model a checkpoint holds ("vae" or "gan").
std::string checkpoint_kind(const std::filesystem::path& path);

}  // namespace lidargen
