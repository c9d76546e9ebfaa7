#include "lidargen/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "lidargen/errors.hpp"

namespace lidargen {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

void check(bool condition, const std::string& message) {
  if (!condition) throw precondition_error(message);
}

// Kernel size per axis: stride-1 stages keep the axis (kernel 3, pad 1),
// stride-2 stages double/halve it exactly (kernel 4, pad 1).
ad::Conv2dSpec stage_conv_spec(std::pair<int, int> stride) {
  ad::Conv2dSpec spec;
  spec.stride_h = stride.first;
  spec.stride_w = stride.second;
  spec.pad_h = 1;
  spec.pad_w = 1;
  return spec;
}

int kernel_for_stride(int stride) { return stride == 2 ? 4 : 3; }

constexpr double kInitStd = 0.02;
constexpr double kLeakySlope = 0.2;
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

void init_batch_norm(ad::ParamStore& store, BufferMap& buffers,
                     const std::string& name, int channels,
                     std::mt19937_64& rng) {
  store.add(name + ".gamma", ad::randn({channels}, rng, 1.0, kInitStd));
  store.add(name + ".beta", ad::Tensor::zeros({channels}));
  buffers.emplace(name + ".running_mean", ad::Tensor::zeros({channels}));
  buffers.emplace(name + ".running_var", ad::Tensor::full({channels}, 1.0));
}

ad::Var apply_batch_norm(const ad::Var& x, const ad::ParamStore& store,
                         BufferMap& buffers, const std::string& name,
                         bool training) {
  auto mean_it = buffers.find(name + ".running_mean");
  auto var_it = buffers.find(name + ".running_var");
  check(mean_it != buffers.end() && var_it != buffers.end(),
        "missing running buffers for " + name);
  return ad::batch_norm(x, store.at(name + ".gamma"), store.at(name + ".beta"),
                        mean_it->second, var_it->second, training, kBnMomentum,
                        kBnEps);
}

}  // namespace

// --- ArchSpec ---

int ArchSpec::decoder_width(int i) const {
  const int stages = num_stages();
  if (i == stages) return data_channels;
  const int exponent = stages - 2 - i;
  return exponent >= 0 ? base_channels << exponent : base_channels / 2;
}

int ArchSpec::discriminator_width(int i) const {
  return i >= 2 ? base_channels << (i - 2) : base_channels / 2;
}

void ArchSpec::validate() const {
  check(grid_height >= 1 && grid_width >= 1, "grid dimensions must be >= 1");
  check(data_channels >= 1, "data_channels must be >= 1");
  check(latent_dim >= 1, "latent_dim must be >= 1");
  check(init_h >= 1 && init_w >= 1, "initial dimensions must be >= 1");
  check(base_channels >= 2 && base_channels % 2 == 0,
        "base_channels must be an even number >= 2");
  check(num_stages() >= 2, "at least two stages are required");
  int h = init_h;
  int w = init_w;
  for (const auto& [sh, sw] : stage_strides) {
    check((sh == 1 || sh == 2) && (sw == 1 || sw == 2),
          "stage strides must be 1 or 2");
    h *= sh;
    w *= sw;
  }
  check(h == grid_height && w == grid_width,
        "stage strides do not compose the initial size into the grid size");
}

ArchSpec ArchSpec::standard(Representation repr, int base_channels,
                            int latent_dim) {
  ArchSpec spec;
  spec.data_channels = channel_count(repr);
  spec.base_channels = base_channels;
  spec.latent_dim = latent_dim;
  spec.validate();
  return spec;
}

ArchSpec ArchSpec::miniature(Representation repr) {
  ArchSpec spec;
  spec.grid_height = 4;
  spec.grid_width = 8;
  spec.data_channels = channel_count(repr);
  spec.base_channels = 4;
  spec.latent_dim = 4;
  spec.init_h = 1;
  spec.init_w = 2;
  spec.stage_strides = {{2, 2}, {2, 2}};
  spec.validate();
  return spec;
}

std::string ArchSpec::to_json() const {
  json j;
  j["grid_height"] = grid_height;
  j["grid_width"] = grid_width;
  j["data_channels"] = data_channels;
  j["base_channels"] = base_channels;
  j["latent_dim"] = latent_dim;
  j["init_h"] = init_h;
  j["init_w"] = init_w;
  json stages = json::array();
  for (const auto& [sh, sw] : stage_strides) {
    stages.push_back(json::array({sh, sw}));
  }
  j["stage_strides"] = std::move(stages);
  return j.dump();
}

ArchSpec ArchSpec::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw malformed_input_error(std::string("bad architecture JSON: ") +
                                e.what());
  }
  ArchSpec spec;
  try {
    spec.grid_height = j.at("grid_height").get<int>();
    spec.grid_width = j.at("grid_width").get<int>();
    spec.data_channels = j.at("data_channels").get<int>();
    spec.base_channels = j.at("base_channels").get<int>();
    spec.latent_dim = j.at("latent_dim").get<int>();
    spec.init_h = j.at("init_h").get<int>();
    spec.init_w = j.at("init_w").get<int>();
    spec.stage_strides.clear();
    for (const auto& stage : j.at("stage_strides")) {
      if (!stage.is_array() || stage.size() != 2) {
        throw malformed_input_error("stage_strides entries must be pairs");
      }
      spec.stage_strides.emplace_back(stage[0].get<int>(),
                                      stage[1].get<int>());
    }
  } catch (const json::exception& e) {
    throw malformed_input_error(std::string("bad architecture JSON: ") +
                                e.what());
  }
  spec.validate();
  return spec;
}

// --- Decoder ---

Decoder::Decoder(const ArchSpec& spec, std::string prefix)
    : spec_(spec), prefix_(std::move(prefix)) {
  spec_.validate();
}

void Decoder::init_params(ad::ParamStore& store, BufferMap& buffers,
                          std::mt19937_64& rng) const {
  const int stages = spec_.num_stages();
  const int c0 = spec_.decoder_width(0);
  store.add(prefix_ + "fc.weight",
            ad::randn({c0 * spec_.init_h * spec_.init_w, spec_.latent_dim},
                      rng, 0.0, kInitStd));
  init_batch_norm(store, buffers, prefix_ + "bn0", c0, rng);
  for (int i = 1; i <= stages; ++i) {
    const auto [sh, sw] = spec_.stage_strides[static_cast<std::size_t>(i - 1)];
    const int c_in = spec_.decoder_width(i - 1);
    const int c_out = spec_.decoder_width(i);
    store.add(prefix_ + "convt" + std::to_string(i) + ".weight",
              ad::randn({c_in, c_out, kernel_for_stride(sh),
                         kernel_for_stride(sw)},
                        rng, 0.0, kInitStd));
    if (i < stages) {
      init_batch_norm(store, buffers, prefix_ + "bn" + std::to_string(i),
                      c_out, rng);
    } else {
      store.add(prefix_ + "convt" + std::to_string(i) + ".bias",
                ad::Tensor::zeros({c_out}));
    }
  }
}

ad::Var Decoder::forward(const ad::Var& z, const ad::ParamStore& store,
                         BufferMap& buffers, bool training) const {
  check(static_cast<bool>(z), "decoder: null input");
  check(z->value.rank() == 2 && z->value.dim(1) == spec_.latent_dim,
        "decoder: input must be (n, latent_dim)");
  const int n = z->value.dim(0);
  const int stages = spec_.num_stages();
  const int c0 = spec_.decoder_width(0);

  ad::Var x = ad::linear(z, store.at(prefix_ + "fc.weight"), nullptr);
  x = ad::reshape(x, {n, c0, spec_.init_h, spec_.init_w});
  x = apply_batch_norm(x, store, buffers, prefix_ + "bn0", training);
  x = ad::relu(x);
  for (int i = 1; i <= stages; ++i) {
    const auto stride = spec_.stage_strides[static_cast<std::size_t>(i - 1)];
    const std::string name = prefix_ + "convt" + std::to_string(i);
    if (i < stages) {
      x = ad::conv_transpose2d(x, store.at(name + ".weight"), nullptr,
                               stage_conv_spec(stride));
      x = apply_batch_norm(x, store, buffers, prefix_ + "bn" + std::to_string(i),
                           training);
      x = ad::relu(x);
    } else {
      x = ad::conv_transpose2d(x, store.at(name + ".weight"),
                               store.at(name + ".bias"),
                               stage_conv_spec(stride));
      x = ad::tanh(x);
    }
  }
  return x;
}

// --- Discriminator ---

Discriminator::Discriminator(const ArchSpec& spec, std::string prefix)
    : spec_(spec), prefix_(std::move(prefix)) {
  spec_.validate();
}

void Discriminator::init_params(ad::ParamStore& store, BufferMap& buffers,
                                std::mt19937_64& rng) const {
  const int stages = spec_.num_stages();
  for (int i = 1; i <= stages; ++i) {
    // Discriminator stages run the decoder's stages in reverse order.
    const auto [sh, sw] =
        spec_.stage_strides[static_cast<std::size_t>(stages - i)];
    const int c_in = i == 1 ? spec_.data_channels
                            : spec_.discriminator_width(i - 1);
    const int c_out = spec_.discriminator_width(i);
    store.add(prefix_ + "conv" + std::to_string(i) + ".weight",
              ad::randn({c_out, c_in, kernel_for_stride(sh),
                         kernel_for_stride(sw)},
                        rng, 0.0, kInitStd));
    if (i == 1) {
      store.add(prefix_ + "conv1.bias", ad::Tensor::zeros({c_out}));
    } else {
      init_batch_norm(store, buffers, prefix_ + "bn" + std::to_string(i),
                      c_out, rng);
    }
  }
  const int flat = spec_.discriminator_width(stages) * spec_.init_h *
                   spec_.init_w;
  store.add(prefix_ + "fc.weight", ad::randn({1, flat}, rng, 0.0, kInitStd));
  store.add(prefix_ + "fc.bias", ad::Tensor::zeros({1}));
}

ad::Var Discriminator::forward_convs(const ad::Var& x,
                                     const ad::ParamStore& store,
                                     BufferMap& buffers, bool training,
                                     int up_to) const {
  const int stages = spec_.num_stages();
  ad::Var h = x;
  for (int i = 1; i <= up_to; ++i) {
    const auto stride =
        spec_.stage_strides[static_cast<std::size_t>(stages - i)];
    const std::string name = prefix_ + "conv" + std::to_string(i);
    if (i == 1) {
      h = ad::conv2d(h, store.at(name + ".weight"), store.at(name + ".bias"),
                     stage_conv_spec(stride));
    } else {
      h = ad::conv2d(h, store.at(name + ".weight"), nullptr,
                     stage_conv_spec(stride));
      h = apply_batch_norm(h, store, buffers, prefix_ + "bn" + std::to_string(i),
                           training);
    }
    h = ad::leaky_relu(h, kLeakySlope);
  }
  return h;
}

ad::Var Discriminator::forward(const ad::Var& x, const ad::ParamStore& store,
                               BufferMap& buffers, bool training) const {
  check(static_cast<bool>(x), "discriminator: null input");
  check(x->value.rank() == 4 && x->value.dim(1) == spec_.data_channels &&
            x->value.dim(2) == spec_.grid_height &&
            x->value.dim(3) == spec_.grid_width,
        "discriminator: input shape does not match the architecture");
  const int n = x->value.dim(0);
  const int stages = spec_.num_stages();
  ad::Var h = forward_convs(x, store, buffers, training, stages);
  const int flat = spec_.discriminator_width(stages) * spec_.init_h *
                   spec_.init_w;
  h = ad::reshape(h, {n, flat});
  return ad::linear(h, store.at(prefix_ + "fc.weight"),
                    store.at(prefix_ + "fc.bias"));
}

ad::Var Discriminator::features(const ad::Var& x, const ad::ParamStore& store,
                                BufferMap& buffers, int layer) const {
  check(static_cast<bool>(x), "discriminator features: null input");
  check(layer >= 1 && layer <= spec_.num_stages(),
        "discriminator features: layer out of range");
  ad::Var h = forward_convs(x, store, buffers, /*training=*/false, layer);
  const int n = x->value.dim(0);
  const int flat = static_cast<int>(h->value.numel()) / n;
  return ad::reshape(h, {n, flat});
}

// --- Encoder ---

Encoder::Encoder(const ArchSpec& spec, std::string prefix)
    : spec_(spec), prefix_(std::move(prefix)) {
  spec_.validate();
}

void Encoder::init_params(ad::ParamStore& store, BufferMap& buffers,
                          std::mt19937_64& rng) const {
  const int stages = spec_.num_stages();
  // The encoder trunk is the discriminator minus its last conv stage.
  for (int i = 1; i < stages; ++i) {
    const auto [sh, sw] =
        spec_.stage_strides[static_cast<std::size_t>(stages - i)];
    const int c_in = i == 1 ? spec_.data_channels
                            : spec_.discriminator_width(i - 1);
    const int c_out = spec_.discriminator_width(i);
    store.add(prefix_ + "conv" + std::to_string(i) + ".weight",
              ad::randn({c_out, c_in, kernel_for_stride(sh),
                         kernel_for_stride(sw)},
                        rng, 0.0, kInitStd));
    if (i == 1) {
      store.add(prefix_ + "conv1.bias", ad::Tensor::zeros({c_out}));
    } else {
      init_batch_norm(store, buffers, prefix_ + "bn" + std::to_string(i),
                      c_out, rng);
    }
  }
  int h = spec_.grid_height;
  int w = spec_.grid_width;
  for (int i = 1; i < stages; ++i) {
    const auto [sh, sw] =
        spec_.stage_strides[static_cast<std::size_t>(stages - i)];
    h /= sh;
    w /= sw;
  }
  const int flat = spec_.discriminator_width(stages - 1) * h * w;
  store.add(prefix_ + "mu.weight",
            ad::randn({spec_.latent_dim, flat}, rng, 0.0, kInitStd));
  store.add(prefix_ + "mu.bias", ad::Tensor::zeros({spec_.latent_dim}));
  store.add(prefix_ + "logvar.weight",
            ad::randn({spec_.latent_dim, flat}, rng, 0.0, kInitStd));
  store.add(prefix_ + "logvar.bias", ad::Tensor::zeros({spec_.latent_dim}));
}

Encoder::Output Encoder::forward(const ad::Var& x, const ad::ParamStore& store,
                                 BufferMap& buffers, bool training) const {
  check(static_cast<bool>(x), "encoder: null input");
  check(x->value.rank() == 4 && x->value.dim(1) == spec_.data_channels &&
            x->value.dim(2) == spec_.grid_height &&
            x->value.dim(3) == spec_.grid_width,
        "encoder: input shape does not match the architecture");
  const int n = x->value.dim(0);
  const int stages = spec_.num_stages();
  ad::Var h = x;
  for (int i = 1; i < stages; ++i) {
    const auto stride =
        spec_.stage_strides[static_cast<std::size_t>(stages - i)];
    const std::string name = prefix_ + "conv" + std::to_string(i);
    if (i == 1) {
      h = ad::conv2d(h, store.at(name + ".weight"), store.at(name + ".bias"),
                     stage_conv_spec(stride));
    } else {
      h = ad::conv2d(h, store.at(name + ".weight"), nullptr,
                     stage_conv_spec(stride));
      h = apply_batch_norm(h, store, buffers, prefix_ + "bn" + std::to_string(i),
                           training);
    }
    h = ad::leaky_relu(h, kLeakySlope);
  }
  const int flat = static_cast<int>(h->value.numel()) / n;
  h = ad::reshape(h, {n, flat});
  Output out;
  out.mu = ad::linear(h, store.at(prefix_ + "mu.weight"),
                      store.at(prefix_ + "mu.bias"));
  out.log_var = ad::linear(h, store.at(prefix_ + "logvar.weight"),
                           store.at(prefix_ + "logvar.bias"));
  return out;
}

// --- losses ---

ad::Var masked_squared_error(const ad::Var& pred, const ad::Var& target,
                             const ad::Tensor& mask) {
  check(pred && target, "masked_squared_error: null operand");
  check(same_shape(pred->value, target->value) &&
            same_shape(pred->value, mask),
        "masked_squared_error: shape mismatch");
  check(pred->value.rank() >= 1, "masked_squared_error: empty shape");
  const int n = pred->value.dim(0);
  const ad::Var diff = ad::sub(pred, target);
  const ad::Var masked = ad::mul(ad::mul(diff, diff), ad::constant(mask));
  return ad::scale(ad::sum(masked), 1.0 / static_cast<double>(n));
}

ad::Var kl_divergence(const ad::Var& mu, const ad::Var& log_var) {
  check(mu && log_var, "kl_divergence: null operand");
  check(same_shape(mu->value, log_var->value),
        "kl_divergence: shape mismatch");
  check(mu->value.rank() == 2, "kl_divergence: inputs must be (n, d)");
  const int n = mu->value.dim(0);
  // -0.5 * sum(1 + log_var - mu^2 - exp(log_var)), averaged over the batch.
  const ad::Var inner = ad::sub(
      ad::sub(ad::add_scalar(log_var, 1.0), ad::mul(mu, mu)), ad::exp(log_var));
  return ad::scale(ad::sum(inner), -0.5 / static_cast<double>(n));
}

ad::Var reparameterize(const ad::Var& mu, const ad::Var& log_var,
                       std::uint64_t seed) {
  check(mu && log_var, "reparameterize: null operand");
  check(same_shape(mu->value, log_var->value),
        "reparameterize: shape mismatch");
  std::mt19937_64 rng(seed);
  const ad::Tensor eps = ad::randn(mu->value.shape, rng);
  return ad::add(mu, ad::mul(ad::exp(ad::scale(log_var, 0.5)),
                             ad::constant(eps)));
}

ad::Var ragan_d_loss(const ad::Var& real_scores, const ad::Var& fake_scores) {
  check(real_scores && fake_scores, "ragan_d_loss: null operand");
  const ad::Var mean_fake = ad::mean(fake_scores);
  const ad::Var mean_real = ad::mean(real_scores);
  const ad::Var real_term = ad::mean(ad::softplus(
      ad::scale(ad::sub_broadcast(real_scores, mean_fake), -1.0)));
  const ad::Var fake_term =
      ad::mean(ad::softplus(ad::sub_broadcast(fake_scores, mean_real)));
  return ad::add(real_term, fake_term);
}

ad::Var ragan_g_loss(const ad::Var& real_scores, const ad::Var& fake_scores) {
  check(real_scores && fake_scores, "ragan_g_loss: null operand");
  const ad::Var mean_fake = ad::mean(fake_scores);
  const ad::Var mean_real = ad::mean(real_scores);
  const ad::Var fake_term = ad::mean(ad::softplus(
      ad::scale(ad::sub_broadcast(fake_scores, mean_real), -1.0)));
  const ad::Var real_term =
      ad::mean(ad::softplus(ad::sub_broadcast(real_scores, mean_fake)));
  return ad::add(fake_term, real_term);
}

ad::Var gan_d_loss(const ad::Var& real_scores, const ad::Var& fake_scores) {
  check(real_scores && fake_scores, "gan_d_loss: null operand");
  return ad::add(ad::mean(ad::softplus(ad::scale(real_scores, -1.0))),
                 ad::mean(ad::softplus(fake_scores)));
}

ad::Var gan_g_loss(const ad::Var& fake_scores) {
  check(static_cast<bool>(fake_scores), "gan_g_loss: null operand");
  return ad::mean(ad::softplus(ad::scale(fake_scores, -1.0)));
}

// --- Vae ---

Vae::Vae(const ArchSpec& spec, std::uint64_t seed)
    : spec_(spec), encoder_(spec, "enc."), decoder_(spec, "dec.") {
  spec_.validate();
  std::mt19937_64 rng(seed);
  encoder_.init_params(store_, buffers_, rng);
  decoder_.init_params(store_, buffers_, rng);
}

Encoder::Output Vae::encode(const ad::Var& x, bool training) {
  return encoder_.forward(x, store_, buffers_, training);
}

ad::Var Vae::decode(const ad::Var& z, bool training) {
  return decoder_.forward(z, store_, buffers_, training);
}

Vae::Loss Vae::loss(const ad::Tensor& batch, const ad::Tensor& mask,
                    std::uint64_t noise_seed, bool training,
                    double kl_weight) {
  check(batch.rank() == 4, "vae loss: batch must be (n, c, h, w)");
  check(same_shape(batch, mask), "vae loss: mask shape mismatch");
  check(kl_weight >= 0.0, "vae loss: kl_weight must be non-negative");
  const ad::Var x = ad::constant(batch);
  const Encoder::Output posterior = encode(x, training);
  // kl_weight zero selects the plain autoencoder variant: the latent is the
  // posterior mean and only the reconstruction term is optimized.
  const ad::Var z =
      kl_weight == 0.0
          ? posterior.mu
          : reparameterize(posterior.mu, posterior.log_var, noise_seed);
  const ad::Var decoded = decode(z, training);
  Loss out;
  out.recon = masked_squared_error(decoded, x, mask);
  out.kl = kl_divergence(posterior.mu, posterior.log_var);
  out.total = kl_weight == 0.0
                  ? out.recon
                  : ad::add(out.recon, ad::scale(out.kl, kl_weight));
  return out;
}

ad::Tensor Vae::reconstruct(const ad::Tensor& batch) {
  check(batch.rank() == 4, "vae reconstruct: batch must be (n, c, h, w)");
  const ad::Var x = ad::constant(batch);
  const Encoder::Output posterior = encode(x, /*training=*/false);
  return decode(posterior.mu, /*training=*/false)->value;
}

ad::Tensor Vae::sample(int count, std::uint64_t seed) {
  check(count >= 1, "vae sample: count must be >= 1");
  std::mt19937_64 rng(seed);
  const ad::Var z = ad::constant(ad::randn({count, spec_.latent_dim}, rng));
  return decode(z, /*training=*/false)->value;
}

// --- Gan ---

Gan::Gan(const ArchSpec& spec, std::uint64_t seed)
    : spec_(spec),
      generator_(spec, "gen."),
      discriminator_(spec, "disc.") {
  spec_.validate();
  std::mt19937_64 rng(seed);
  generator_.init_params(gen_store_, gen_buffers_, rng);
  discriminator_.init_params(disc_store_, disc_buffers_, rng);
}

ad::Var Gan::generate(const ad::Var& z, bool training) {
  return generator_.forward(z, gen_store_, gen_buffers_, training);
}

ad::Var Gan::discriminate(const ad::Var& x, bool training) {
  return discriminator_.forward(x, disc_store_, disc_buffers_, training);
}

ad::Var Gan::features(const ad::Var& x, int layer) {
  return discriminator_.features(x, disc_store_, disc_buffers_, layer);
}

ad::Tensor Gan::sample(int count, std::uint64_t seed) {
  check(count >= 1, "gan sample: count must be >= 1");
  std::mt19937_64 rng(seed);
  const ad::Var z = ad::constant(ad::randn({count, spec_.latent_dim}, rng));
  return generate(z, /*training=*/false)->value;
}

// --- checkpoints ---

namespace {

constexpr char kCheckpointMagic[4] = {'L', 'G', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string group;
  std::string name;
  const ad::Tensor* tensor;
};

json optimizer_header(const std::string& name, const ad::Adam& opt) {
  json j;
  j["name"] = name;
  j["lr"] = opt.config().lr;
  j["beta1"] = opt.config().beta1;
  j["beta2"] = opt.config().beta2;
  j["eps"] = opt.config().eps;
  j["step_count"] = opt.step_count();
  return j;
}

ad::Adam optimizer_from_header(const json& j) {
  ad::AdamConfig config;
  config.lr = j.at("lr").get<double>();
  config.beta1 = j.at("beta1").get<double>();
  config.beta2 = j.at("beta2").get<double>();
  config.eps = j.at("eps").get<double>();
  ad::Adam opt(config);
  opt.set_step_count(j.at("step_count").get<std::int64_t>());
  return opt;
}

void collect_store(const std::string& group, const ad::ParamStore& store,
                   std::vector<NamedTensor>& out) {
  for (const auto& [name, var] : store.params()) {
    out.push_back({group, name, &var->value});
  }
}

void collect_buffers(const std::string& group, const BufferMap& buffers,
                     std::vector<NamedTensor>& out) {
  for (const auto& [name, tensor] : buffers) {
    out.push_back({group, name, &tensor});
  }
}

void collect_moments(const std::string& group,
                     const std::map<std::string, ad::Tensor>& moments,
                     std::vector<NamedTensor>& out) {
  for (const auto& [name, tensor] : moments) {
    out.push_back({group, name, &tensor});
  }
}

void write_checkpoint(const std::filesystem::path& path,
                      const std::string& kind, const ArchSpec& arch,
                      const std::optional<NormStats>& stats,
                      const std::vector<json>& optimizers,
                      const std::vector<NamedTensor>& tensors) {
  json header;
  header["kind"] = kind;
  header["arch"] = json::parse(arch.to_json());
  header["stats"] = stats ? json::parse(stats->to_json()) : json(nullptr);
  header["optimizers"] = optimizers;
  json tensor_list = json::array();
  for (const NamedTensor& t : tensors) {
    json rec;
    rec["group"] = t.group;
    rec["name"] = t.name;
    rec["shape"] = t.tensor->shape;
    tensor_list.push_back(std::move(rec));
  }
  header["tensors"] = std::move(tensor_list);
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw malformed_input_error("cannot open checkpoint for writing: " +
                                path.string());
  }
  out.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));

  std::vector<float> block;
  for (const NamedTensor& t : tensors) {
    block.resize(t.tensor->numel());
    for (std::size_t i = 0; i < block.size(); ++i) {
      block[i] = static_cast<float>(t.tensor->data[i]);
    }
    out.write(reinterpret_cast<const char*>(block.data()),
              static_cast<std::streamsize>(block.size() * sizeof(float)));
  }
  out.flush();
  if (!out) {
    throw malformed_input_error("failed writing checkpoint: " + path.string());
  }
}

struct ReadTensor {
  std::string group;
  std::string name;
  ad::Tensor tensor;
};

struct ReadCheckpoint {
  std::string kind;
  ArchSpec arch;
  std::optional<NormStats> stats;
  std::map<std::string, json> optimizers;
  std::vector<ReadTensor> tensors;
};

json read_checkpoint_header(std::ifstream& in,
                            const std::filesystem::path& path) {
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw malformed_input_error("not a checkpoint file: " + path.string());
  }
  if (version != kCheckpointVersion) {
    throw malformed_input_error("unsupported checkpoint version in " +
                                path.string());
  }
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) {
    throw malformed_input_error("truncated checkpoint header in " +
                                path.string());
  }
  try {
    return json::parse(header_text);
  } catch (const json::exception& e) {
    throw malformed_input_error(std::string("bad checkpoint header: ") +
                                e.what());
  }
}

ReadCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw malformed_input_error("cannot open checkpoint: " + path.string());
  }
  const json header = read_checkpoint_header(in, path);

  ReadCheckpoint result;
  try {
    result.kind = header.at("kind").get<std::string>();
    result.arch = ArchSpec::from_json(header.at("arch").dump());
    if (!header.at("stats").is_null()) {
      result.stats = NormStats::from_json(header.at("stats").dump());
    }
    for (const json& opt : header.at("optimizers")) {
      result.optimizers.emplace(opt.at("name").get<std::string>(), opt);
    }
    std::vector<float> block;
    for (const json& rec : header.at("tensors")) {
      ReadTensor t;
      t.group = rec.at("group").get<std::string>();
      t.name = rec.at("name").get<std::string>();
      const std::vector<int> shape = rec.at("shape").get<std::vector<int>>();
      t.tensor = ad::Tensor(shape);
      block.resize(t.tensor.numel());
      in.read(reinterpret_cast<char*>(block.data()),
              static_cast<std::streamsize>(block.size() * sizeof(float)));
      if (!in) {
        throw malformed_input_error("truncated checkpoint tensor data in " +
                                    path.string());
      }
      for (std::size_t i = 0; i < block.size(); ++i) {
        t.tensor.data[i] = static_cast<double>(block[i]);
      }
      result.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw malformed_input_error(std::string("bad checkpoint header: ") +
                                e.what());
  }
  in.peek();
  if (!in.eof()) {
    throw malformed_input_error("trailing bytes after checkpoint data in " +
                                path.string());
  }
  return result;
}

// Moves tensors of `group` into the destination maps, insisting that the
// file and the freshly constructed model agree on the exact name set.
void restore_store(const std::string& group,
                   const std::vector<ReadTensor>& tensors,
                   ad::ParamStore& store) {
  std::size_t found = 0;
  for (const ReadTensor& t : tensors) {
    if (t.group != group) continue;
    if (!store.contains(t.name)) {
      throw malformed_input_error("unexpected tensor " + group + "/" + t.name);
    }
    const ad::Var& var = store.at(t.name);
    if (!ad::same_shape(var->value, t.tensor)) {
      throw malformed_input_error("shape mismatch for tensor " + group + "/" +
                                  t.name);
    }
    var->value = t.tensor;
    ++found;
  }
  if (found != store.params().size()) {
    throw malformed_input_error("checkpoint is missing tensors in group " +
                                group);
  }
}

void restore_buffers(const std::string& group,
                     const std::vector<ReadTensor>& tensors,
                     BufferMap& buffers) {
  std::size_t found = 0;
  for (const ReadTensor& t : tensors) {
    if (t.group != group) continue;
    auto it = buffers.find(t.name);
    if (it == buffers.end()) {
      throw malformed_input_error("unexpected tensor " + group + "/" + t.name);
    }
    if (!ad::same_shape(it->second, t.tensor)) {
      throw malformed_input_error("shape mismatch for tensor " + group + "/" +
                                  t.name);
    }
    it->second = t.tensor;
    ++found;
  }
  if (found != buffers.size()) {
    throw malformed_input_error("checkpoint is missing tensors in group " +
                                group);
  }
}

void restore_moments(const std::string& group,
                     const std::vector<ReadTensor>& tensors,
                     std::map<std::string, ad::Tensor>& moments) {
  for (const ReadTensor& t : tensors) {
    if (t.group != group) continue;
    moments[t.name] = t.tensor;
  }
}

}  // namespace

void save_vae_checkpoint(const std::filesystem::path& path, const Vae& model,
                         const ad::Adam& optimizer,
                         const std::optional<NormStats>& stats) {
  std::vector<NamedTensor> tensors;
  collect_store("params", model.params(), tensors);
  collect_buffers("buffers", model.buffers(), tensors);
  collect_moments("adam_m", optimizer.first_moments(), tensors);
  collect_moments("adam_v", optimizer.second_moments(), tensors);
  write_checkpoint(path, "vae", model.arch(), stats,
                   {optimizer_header("main", optimizer)}, tensors);
}

VaeCheckpoint load_vae_checkpoint(const std::filesystem::path& path) {
  ReadCheckpoint file = read_checkpoint(path);
  if (file.kind != "vae") {
    throw malformed_input_error("checkpoint " + path.string() +
                                " does not hold the expected model kind");
  }
  auto opt_it = file.optimizers.find("main");
  if (opt_it == file.optimizers.end()) {
    throw malformed_input_error("checkpoint is missing optimizer state");
  }
  VaeCheckpoint out{Vae(file.arch, 0), optimizer_from_header(opt_it->second),
                    file.stats};
  restore_store("params", file.tensors, out.model.params());
  restore_buffers("buffers", file.tensors, out.model.buffers());
  restore_moments("adam_m", file.tensors, out.optimizer.first_moments());
  restore_moments("adam_v", file.tensors, out.optimizer.second_moments());
  return out;
}

void save_gan_checkpoint(const std::filesystem::path& path, const Gan& model,
                         const ad::Adam& gen_optimizer,
                         const ad::Adam& disc_optimizer,
                         const std::optional<NormStats>& stats) {
  std::vector<NamedTensor> tensors;
  collect_store("gen_params", model.generator_params(), tensors);
  collect_store("disc_params", model.discriminator_params(), tensors);
  collect_buffers("gen_buffers", model.generator_buffers(), tensors);
  collect_buffers("disc_buffers", model.discriminator_buffers(), tensors);
  collect_moments("gen_adam_m", gen_optimizer.first_moments(), tensors);
  collect_moments("gen_adam_v", gen_optimizer.second_moments(), tensors);
  collect_moments("disc_adam_m", disc_optimizer.first_moments(), tensors);
  collect_moments("disc_adam_v", disc_optimizer.second_moments(), tensors);
  write_checkpoint(path, "gan", model.arch(), stats,
                   {optimizer_header("gen", gen_optimizer),
                    optimizer_header("disc", disc_optimizer)},
                   tensors);
}

GanCheckpoint load_gan_checkpoint(const std::filesystem::path& path) {
  ReadCheckpoint file = read_checkpoint(path);
  if (file.kind != "gan") {
    throw malformed_input_error("checkpoint " + path.string() +
                                " does not hold the expected model kind");
  }
  auto gen_it = file.optimizers.find("gen");
  auto disc_it = file.optimizers.find("disc");
  if (gen_it == file.optimizers.end() || disc_it == file.optimizers.end()) {
    throw malformed_input_error("checkpoint is missing optimizer state");
  }
  GanCheckpoint out{Gan(file.arch, 0), optimizer_from_header(gen_it->second),
                    optimizer_from_header(disc_it->second), file.stats};
  restore_store("gen_params", file.tensors, out.model.generator_params());
  restore_store("disc_params", file.tensors,
                out.model.discriminator_params());
  restore_buffers("gen_buffers", file.tensors, out.model.generator_buffers());
  restore_buffers("disc_buffers", file.tensors,
                  out.model.discriminator_buffers());
  restore_moments("gen_adam_m", file.tensors,
                  out.gen_optimizer.first_moments());
  restore_moments("gen_adam_v", file.tensors,
                  out.gen_optimizer.second_moments());
  restore_moments("disc_adam_m", file.tensors,
                  out.disc_optimizer.first_moments());
  restore_moments("disc_adam_v", file.tensors,
                  out.disc_optimizer.second_moments());
  return out;
}

std::string checkpoint_kind(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw malformed_input_error("cannot open checkpoint: " + path.string());
  }
  const json header = read_checkpoint_header(in, path);
  try {
    return header.at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw malformed_input_error(std::string("bad checkpoint header: ") +
                                e.what());
  }
}

}  // namespace lidargen
