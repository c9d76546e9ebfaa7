#include "lidargen/models.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <vector>

#include "lidargen/errors.hpp"
#include "test_util.hpp"

namespace ad = lidargen::ad;
using namespace lidargen;
using lidargen::testing::check_grads;
using lidargen::testing::TempDir;

namespace {

// Batch of values inside the decoder's tanh range plus a per-cell occupancy
// mask replicated across channels.
struct FakeBatch {
  ad::Tensor data;
  ad::Tensor mask;
};

FakeBatch fake_batch(const ArchSpec& spec, int n, std::uint64_t seed,
                     double occupancy = 0.8) {
  std::mt19937_64 rng(seed);
  FakeBatch out;
  out.data = ad::randn({n, spec.data_channels, spec.grid_height,
                        spec.grid_width},
                       rng);
  for (double& v : out.data.data) v = std::tanh(v);
  out.mask = ad::Tensor::zeros(out.data.shape);
  std::bernoulli_distribution occupied(occupancy);
  const std::size_t plane =
      static_cast<std::size_t>(spec.grid_height) * spec.grid_width;
  for (int s = 0; s < n; ++s) {
    for (std::size_t cell = 0; cell < plane; ++cell) {
      if (!occupied(rng)) continue;
      for (int c = 0; c < spec.data_channels; ++c) {
        out.mask.data[(static_cast<std::size_t>(s) * spec.data_channels + c) *
                          plane +
                      cell] = 1.0;
      }
    }
  }
  return out;
}

double tensor_std(const ad::Tensor& t) {
  double mean = 0.0;
  for (double v : t.data) mean += v;
  mean /= static_cast<double>(t.numel());
  double ss = 0.0;
  for (double v : t.data) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(t.numel()));
}

}  // namespace

TEST(ArchSpec, StandardAndMiniatureCompose) {
  const ArchSpec polar = ArchSpec::standard(Representation::polar);
  EXPECT_EQ(polar.data_channels, 2);
  EXPECT_EQ(polar.num_stages(), 5);
  EXPECT_NO_THROW(polar.validate());

  const ArchSpec cart = ArchSpec::standard(Representation::cartesian, 16, 64);
  EXPECT_EQ(cart.data_channels, 3);
  EXPECT_EQ(cart.base_channels, 16);
  EXPECT_EQ(cart.latent_dim, 64);

  const ArchSpec mini = ArchSpec::miniature(Representation::polar);
  EXPECT_EQ(mini.grid_height, 4);
  EXPECT_EQ(mini.grid_width, 8);
  EXPECT_NO_THROW(mini.validate());
}

TEST(ArchSpec, ChannelScheduleHalvesTowardTheOutput) {
  const ArchSpec spec = ArchSpec::standard(Representation::polar, 32);
  // Decoder widths: reshape 8b, then 4b, 2b, b, b/2, and data channels last.
  EXPECT_EQ(spec.decoder_width(0), 256);
  EXPECT_EQ(spec.decoder_width(1), 128);
  EXPECT_EQ(spec.decoder_width(2), 64);
  EXPECT_EQ(spec.decoder_width(3), 32);
  EXPECT_EQ(spec.decoder_width(4), 16);
  EXPECT_EQ(spec.decoder_width(5), 2);
  // Discriminator mirrors them on the way down.
  EXPECT_EQ(spec.discriminator_width(1), 16);
  EXPECT_EQ(spec.discriminator_width(2), 32);
  EXPECT_EQ(spec.discriminator_width(3), 64);
  EXPECT_EQ(spec.discriminator_width(4), 128);
  EXPECT_EQ(spec.discriminator_width(5), 256);
}

TEST(ArchSpec, RejectsInvalidGeometry) {
  ArchSpec spec = ArchSpec::standard(Representation::polar);
  spec.grid_width = 128;  // strides now overshoot the grid
  EXPECT_THROW(spec.validate(), precondition_error);

  spec = ArchSpec::standard(Representation::polar);
  spec.base_channels = 7;
  EXPECT_THROW(spec.validate(), precondition_error);

  spec = ArchSpec::standard(Representation::polar);
  spec.stage_strides = {{3, 2}, {1, 2}, {2, 2}, {2, 2}, {2, 2}};
  EXPECT_THROW(spec.validate(), precondition_error);

  spec = ArchSpec::standard(Representation::polar);
  spec.stage_strides = {{1, 32}};
  EXPECT_THROW(spec.validate(), precondition_error);
}

TEST(ArchSpec, JsonRoundTripPreservesEveryField) {
  ArchSpec spec = ArchSpec::standard(Representation::cartesian, 8, 32);
  const ArchSpec back = ArchSpec::from_json(spec.to_json());
  EXPECT_EQ(back, spec);

  EXPECT_THROW(ArchSpec::from_json("{not json"), malformed_input_error);
  EXPECT_THROW(ArchSpec::from_json("{\"grid_height\": 40}"),
               malformed_input_error);
}

TEST(Decoder, ProducesGridShapedOutputInTanhRange) {
  const ArchSpec spec = ArchSpec::standard(Representation::polar, 8, 16);
  Vae vae(spec, 17);
  std::mt19937_64 rng(3);
  const ad::Var z = ad::constant(ad::randn({2, spec.latent_dim}, rng));
  const ad::Var out = vae.decode(z, /*training=*/false);
  EXPECT_EQ(out->value.shape, (std::vector<int>{2, 2, 40, 256}));
  for (double v : out->value.data) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Decoder, EvalForwardIsDeterministicAndKeepsBuffers) {
  const ArchSpec spec = ArchSpec::miniature(Representation::polar);
  Vae vae(spec, 4);
  std::mt19937_64 rng(5);
  const ad::Var z = ad::constant(ad::randn({3, spec.latent_dim}, rng));
  const BufferMap before = vae.buffers();
  const ad::Var a = vae.decode(z, /*training=*/false);
  const ad::Var b = vae.decode(z, /*training=*/false);
  EXPECT_EQ(a->value.data, b->value.data);
  for (const auto& [name, tensor] : vae.buffers()) {
    EXPECT_EQ(tensor.data, before.at(name).data) << name;
  }
}

TEST(Encoder, PosteriorHeadsHaveLatentShape) {
  const ArchSpec spec = ArchSpec::standard(Representation::cartesian, 8, 24);
  Vae vae(spec, 9);
  const FakeBatch batch = fake_batch(spec, 2, 11);
  const Encoder::Output out =
      vae.encode(ad::constant(batch.data), /*training=*/false);
  EXPECT_EQ(out.mu->value.shape, (std::vector<int>{2, 24}));
  EXPECT_EQ(out.log_var->value.shape, (std::vector<int>{2, 24}));
  EXPECT_THROW(
      vae.encode(ad::constant(ad::Tensor::zeros({2, 3, 10, 16})), false),
      precondition_error);
}

TEST(Discriminator, ScoresAndIntermediateFeatures) {
  const ArchSpec spec = ArchSpec::standard(Representation::polar, 8, 16);
  Gan gan(spec, 21);
  const FakeBatch batch = fake_batch(spec, 2, 13);
  const ad::Var scores =
      gan.discriminate(ad::constant(batch.data), /*training=*/false);
  EXPECT_EQ(scores->value.shape, (std::vector<int>{2, 1}));

  // After three stride-(2,2) stages a 40x256 grid sits at 5x32 with width
  // 2 * base_channels.
  const ad::Var feats = gan.features(ad::constant(batch.data), 3);
  EXPECT_EQ(feats->value.shape, (std::vector<int>{2, 16 * 5 * 32}));
  EXPECT_THROW(gan.features(ad::constant(batch.data), 0), precondition_error);
  EXPECT_THROW(gan.features(ad::constant(batch.data), 6), precondition_error);
}

TEST(Init, SeededAndMatchesTargetDistribution) {
  const ArchSpec spec = ArchSpec::standard(Representation::polar, 8, 16);
  Vae a(spec, 123);
  Vae b(spec, 123);
  Vae c(spec, 124);
  bool any_different = false;
  for (const auto& [name, var] : a.params().params()) {
    EXPECT_EQ(var->value.data, b.params().at(name)->value.data) << name;
    if (var->value.data != c.params().at(name)->value.data) {
      any_different = true;
    }
  }
  EXPECT_TRUE(any_different);

  // Weights draw from N(0, 0.02); the largest tensor pins the std tightly.
  const ad::Tensor& fc = a.params().at("dec.fc.weight")->value;
  EXPECT_GT(fc.numel(), 10000u);
  EXPECT_NEAR(tensor_std(fc), 0.02, 0.002);

  // Batch-norm scales draw from N(1, 0.02) and shifts start at zero.
  const ad::Tensor& gamma = a.params().at("dec.bn0.gamma")->value;
  double gamma_mean = 0.0;
  for (double v : gamma.data) gamma_mean += v;
  gamma_mean /= static_cast<double>(gamma.numel());
  EXPECT_NEAR(gamma_mean, 1.0, 0.02);
  const ad::Tensor& beta = a.params().at("dec.bn0.beta")->value;
  for (double v : beta.data) EXPECT_EQ(v, 0.0);
}

TEST(Losses, MaskedSquaredErrorIgnoresUnoccupiedCells) {
  ad::Tensor pred({2, 1, 1, 2});
  pred.data = {1.0, 5.0, -2.0, 9.0};
  ad::Tensor target({2, 1, 1, 2});
  target.data = {0.0, 100.0, -4.0, -100.0};
  ad::Tensor mask({2, 1, 1, 2});
  mask.data = {1.0, 0.0, 1.0, 0.0};

  const ad::Var loss = masked_squared_error(
      ad::constant(pred), ad::constant(target), mask);
  // Per-sample masked sums are 1 and 4; the batch mean is 2.5.
  EXPECT_NEAR(loss->value.item(), 2.5, 1e-12);
}

TEST(Losses, KlDivergenceClosedForm) {
  ad::Tensor mu({2, 2});
  mu.data = {0.0, 0.0, 1.0, -1.0};
  ad::Tensor lv({2, 2});
  lv.data = {0.0, 0.0, 0.0, std::log(2.0)};

  // Sample 1 matches the prior exactly: zero divergence.  Sample 2:
  // dim 1: -0.5 * (1 + 0 - 1 - 1) = 0.5
  // dim 2: -0.5 * (1 + ln 2 - 1 - 2) = 0.5 * (2 - ln 2)
  const double expected =
      (0.0 + 0.5 + 0.5 * (2.0 - std::log(2.0))) / 2.0;
  const ad::Var kl = kl_divergence(ad::constant(mu), ad::constant(lv));
  EXPECT_NEAR(kl->value.item(), expected, 1e-12);

  const ad::Var zero =
      kl_divergence(ad::constant(ad::Tensor::zeros({3, 4})),
                    ad::constant(ad::Tensor::zeros({3, 4})));
  EXPECT_NEAR(zero->value.item(), 0.0, 1e-15);
}

TEST(Losses, KlDivergenceMatchesMonteCarloEstimate) {
  // KL(q || p) = E_q[log q(z) - log p(z)] with q = N(mu, diag(exp(lv))).
  std::mt19937_64 rng(31);
  const int dims = 8;
  ad::Tensor mu = ad::randn({1, dims}, rng, 0.0, 1.0);
  ad::Tensor lv = ad::randn({1, dims}, rng, 0.0, 0.5);

  const double closed =
      kl_divergence(ad::constant(mu), ad::constant(lv))->value.item();

  double estimate = 0.0;
  const int draws = 4000000;
  std::normal_distribution<double> unit(0.0, 1.0);
  for (int s = 0; s < draws; ++s) {
    for (int d = 0; d < dims; ++d) {
      const double m = mu.data[static_cast<std::size_t>(d)];
      const double l = lv.data[static_cast<std::size_t>(d)];
      const double z = m + std::exp(0.5 * l) * unit(rng);
      const double log_q =
          -0.5 * (std::log(2.0 * std::numbers::pi) + l +
                  (z - m) * (z - m) / std::exp(l));
      const double log_p =
          -0.5 * (std::log(2.0 * std::numbers::pi) + z * z);
      estimate += log_q - log_p;
    }
  }
  estimate /= static_cast<double>(draws);
  EXPECT_NEAR(closed, estimate, 0.01 * std::max(1.0, std::abs(closed)));
}

TEST(Losses, ReparameterizeIsSeededAndCentered) {
  std::mt19937_64 rng(7);
  const ad::Tensor mu_t = ad::randn({3, 4}, rng);
  const ad::Var mu = ad::constant(mu_t);
  const ad::Var lv = ad::constant(ad::Tensor::zeros({3, 4}));

  const ad::Var z1 = reparameterize(mu, lv, 99);
  const ad::Var z2 = reparameterize(mu, lv, 99);
  EXPECT_EQ(z1->value.data, z2->value.data);

  // With log_var = 0 the draw reduces to mu + eps with eps from the seed.
  std::mt19937_64 noise_rng(99);
  const ad::Tensor eps = ad::randn({3, 4}, noise_rng);
  for (std::size_t i = 0; i < eps.numel(); ++i) {
    EXPECT_NEAR(z1->value.data[i], mu_t.data[i] + eps.data[i], 1e-12);
  }
  EXPECT_NE(reparameterize(mu, lv, 100)->value.data, z1->value.data);
}

TEST(Losses, RelativisticAverageLossesAtEqualScores) {
  // With every score identical both sides sit exactly at the decision
  // boundary and each loss equals 2 * ln 2.
  const ad::Var real = ad::constant(ad::Tensor::full({4, 1}, 0.37));
  const ad::Var fake = ad::constant(ad::Tensor::full({4, 1}, 0.37));
  EXPECT_NEAR(ragan_d_loss(real, fake)->value.item(), 2.0 * std::log(2.0),
              1e-12);
  EXPECT_NEAR(ragan_g_loss(real, fake)->value.item(), 2.0 * std::log(2.0),
              1e-12);
}

TEST(Losses, RelativisticLossRewardsSeparation) {
  const ad::Var fake = ad::constant(ad::Tensor::full({4, 1}, 0.0));
  const ad::Var real_hi = ad::constant(ad::Tensor::full({4, 1}, 2.0));
  const ad::Var real_eq = ad::constant(ad::Tensor::full({4, 1}, 0.0));
  // The discriminator improves when real scores rise above fake ones...
  EXPECT_LT(ragan_d_loss(real_hi, fake)->value.item(),
            ragan_d_loss(real_eq, fake)->value.item());
  // ...while the generator's objective worsens.
  EXPECT_GT(ragan_g_loss(real_hi, fake)->value.item(),
            ragan_g_loss(real_eq, fake)->value.item());
}

TEST(Losses, RelativisticGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  ad::ParamStore store;
  const ad::Var real = store.add("real", ad::randn({5, 1}, rng));
  const ad::Var fake = store.add("fake", ad::randn({5, 1}, rng));
  check_grads(store, [&] { return ragan_d_loss(real, fake); });
  check_grads(store, [&] { return ragan_g_loss(real, fake); });
  check_grads(store, [&] { return gan_d_loss(real, fake); });
  check_grads(store, [&] { return gan_g_loss(fake); });
}

TEST(Losses, NonSaturatingFormulas) {
  ad::Tensor r({2, 1});
  r.data = {1.0, -0.5};
  ad::Tensor f({2, 1});
  f.data = {0.25, 2.0};
  const auto sp = [](double x) { return std::log1p(std::exp(x)); };
  const double expected_d =
      (sp(-1.0) + sp(0.5)) / 2.0 + (sp(0.25) + sp(2.0)) / 2.0;
  const double expected_g = (sp(-0.25) + sp(-2.0)) / 2.0;
  EXPECT_NEAR(gan_d_loss(ad::constant(r), ad::constant(f))->value.item(),
              expected_d, 1e-12);
  EXPECT_NEAR(gan_g_loss(ad::constant(f))->value.item(), expected_g, 1e-12);
}

TEST(Vae, LossGradientsMatchFiniteDifferences) {
  const ArchSpec spec = ArchSpec::miniature(Representation::polar);
  Vae vae(spec, 51);
  const FakeBatch batch = fake_batch(spec, 2, 52);
  check_grads(
      vae.params(),
      [&] {
        return vae.loss(batch.data, batch.mask, /*noise_seed=*/7,
                        /*training=*/true, /*kl_weight=*/1.0)
            .total;
      },
      1e-4);
}

TEST(Vae, LossDecomposesIntoReconstructionAndDivergence) {
  const ArchSpec spec = ArchSpec::miniature(Representation::cartesian);
  Vae vae(spec, 53);
  const FakeBatch batch = fake_batch(spec, 3, 54);
  const Vae::Loss loss = vae.loss(batch.data, batch.mask, 11, true, 0.25);
  EXPECT_NEAR(loss.total->value.item(),
              loss.recon->value.item() + 0.25 * loss.kl->value.item(), 1e-12);
  EXPECT_GT(loss.recon->value.item(), 0.0);
  EXPECT_GE(loss.kl->value.item(), 0.0);
}

TEST(Vae, ZeroKlWeightSelectsThePlainAutoencoder) {
  const ArchSpec spec = ArchSpec::miniature(Representation::polar);
  Vae vae(spec, 55);
  const FakeBatch batch = fake_batch(spec, 2, 56);
  const Vae::Loss a = vae.loss(batch.data, batch.mask, 11, true, 0.0);
  const Vae::Loss b = vae.loss(batch.data, batch.mask, 999, true, 0.0);
  // The latent is the posterior mean, so the noise seed is irrelevant and
  // only the reconstruction term is minimized.
  EXPECT_EQ(a.total->value.item(), b.total->value.item());
  EXPECT_EQ(a.total->value.item(), a.recon->value.item());
  EXPECT_GE(a.kl->value.item(), 0.0);
  EXPECT_THROW(vae.loss(batch.data, batch.mask, 11, true, -0.5),
               precondition_error);
}

TEST(Vae, SingleAdamStepUsuallyDecreasesTheLoss) {
  const ArchSpec spec = ArchSpec::miniature(Representation::polar);
  int decreased = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    Vae vae(spec, 1000 + static_cast<std::uint64_t>(trial));
    const FakeBatch batch = fake_batch(spec, 4, 60 + trial);
    ad::AdamConfig config;
    config.lr = 1e-3;
    ad::Adam opt(config);

    vae.params().zero_grad();
    const Vae::Loss before = vae.loss(batch.data, batch.mask, 5, true);
    ad::backward(before.total);
    opt.step(vae.params());
    const Vae::Loss after = vae.loss(batch.data, batch.mask, 5, true);
    if (after.total->value.item() < before.total->value.item()) ++decreased;
  }
  EXPECT_GE(decreased, 18) << "loss decreased in only " << decreased << "/"
                           << trials << " trials";
}

TEST(Vae, ReconstructAndSampleKeepShapesAndBuffers) {
  const ArchSpec spec = ArchSpec::miniature(Representation::polar);
  Vae vae(spec, 71);
  const FakeBatch batch = fake_batch(spec, 2, 72);
  const BufferMap before = vae.buffers();
  const ad::Tensor recon = vae.reconstruct(batch.data);
  EXPECT_EQ(recon.shape, batch.data.shape);
  const ad::Tensor sampled = vae.sample(5, 73);
  EXPECT_EQ(sampled.shape, (std::vector<int>{5, 2, 4, 8}));
  EXPECT_EQ(vae.sample(5, 73).data, sampled.data);
  for (const auto& [name, tensor] : vae.buffers()) {
    EXPECT_EQ(tensor.data, before.at(name).data) << name;
  }
}

TEST(Gan, AlternatingStepsTouchOnlyTheirOwnNetwork) {
  const ArchSpec spec = ArchSpec::miniature(Representation::polar);
  Gan gan(spec, 81);
  const FakeBatch real = fake_batch(spec, 4, 82);
  std::mt19937_64 rng(83);

  ad::AdamConfig config;
  ad::Adam gen_opt(config);
  ad::Adam disc_opt(config);

  const auto snapshot = [](const ad::ParamStore& store) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, var] : store.params()) out[name] = var->value.data;
    return out;
  };

  // Discriminator step on detached fake data.
  const auto gen_before = snapshot(gan.generator_params());
  {
    const ad::Var z = ad::constant(ad::randn({4, spec.latent_dim}, rng));
    const ad::Var fake = ad::detach(gan.generate(z, /*training=*/true));
    gan.discriminator_params().zero_grad();
    const ad::Var d_loss =
        ragan_d_loss(gan.discriminate(ad::constant(real.data), true),
                     gan.discriminate(fake, true));
    EXPECT_TRUE(std::isfinite(d_loss->value.item()));
    ad::backward(d_loss);
    disc_opt.step(gan.discriminator_params());
  }
  for (const auto& [name, data] : snapshot(gan.generator_params())) {
    EXPECT_EQ(data, gen_before.at(name)) << name;
  }

  // Generator step with the discriminator frozen (its optimizer not run).
  const auto disc_before = snapshot(gan.discriminator_params());
  {
    const ad::Var z = ad::constant(ad::randn({4, spec.latent_dim}, rng));
    gan.generator_params().zero_grad();
    gan.discriminator_params().zero_grad();
    const ad::Var g_loss =
        ragan_g_loss(gan.discriminate(ad::constant(real.data), true),
                     gan.discriminate(gan.generate(z, true), true));
    EXPECT_TRUE(std::isfinite(g_loss->value.item()));
    ad::backward(g_loss);
    gen_opt.step(gan.generator_params());
  }
  for (const auto& [name, data] : snapshot(gan.discriminator_params())) {
    EXPECT_EQ(data, disc_before.at(name)) << name;
  }
  bool gen_changed = false;
  for (const auto& [name, data] : snapshot(gan.generator_params())) {
    if (data != gen_before.at(name)) gen_changed = true;
  }
  EXPECT_TRUE(gen_changed);
}

TEST(Checkpoint, VaeRoundTripRestoresEverything) {
  TempDir dir("ckpt_vae");
  const ArchSpec spec = ArchSpec::miniature(Representation::polar);
  Vae vae(spec, 91);
  const FakeBatch batch = fake_batch(spec, 2, 92);

  // One real training step so optimizer moments and BN buffers are nonzero.
  ad::AdamConfig config;
  ad::Adam opt(config);
  vae.params().zero_grad();
  ad::backward(vae.loss(batch.data, batch.mask, 3, true).total);
  opt.step(vae.params());

  NormStats stats;
  stats.mean = {1.0, -2.0};
  stats.std = {3.0, 4.0};
  const auto path = dir.path() / "model.ckpt";
  save_vae_checkpoint(path, vae, opt, stats);

  VaeCheckpoint loaded = load_vae_checkpoint(path);
  EXPECT_EQ(loaded.model.arch(), spec);
  ASSERT_TRUE(loaded.stats.has_value());
  EXPECT_EQ(loaded.stats->mean, stats.mean);
  EXPECT_EQ(loaded.stats->std, stats.std);
  EXPECT_EQ(loaded.optimizer.step_count(), 1);
  EXPECT_EQ(loaded.optimizer.config().lr, config.lr);

  // Values survive as float32: the loaded doubles are the truncations.
  for (const auto& [name, var] : vae.params().params()) {
    const ad::Tensor& got = loaded.model.params().at(name)->value;
    ASSERT_EQ(got.shape, var->value.shape) << name;
    for (std::size_t i = 0; i < got.numel(); ++i) {
      EXPECT_EQ(got.data[i],
                static_cast<double>(static_cast<float>(var->value.data[i])))
          << name << "[" << i << "]";
    }
  }
  for (const auto& [name, tensor] : vae.buffers()) {
    const ad::Tensor& got = loaded.model.buffers().at(name);
    for (std::size_t i = 0; i < got.numel(); ++i) {
      EXPECT_EQ(got.data[i],
                static_cast<double>(static_cast<float>(tensor.data[i])))
          << name << "[" << i << "]";
    }
  }
  EXPECT_EQ(loaded.optimizer.first_moments().size(),
            opt.first_moments().size());

  // Saving the loaded model again reproduces the file byte for byte.
  const auto path2 = dir.path() / "model2.ckpt";
  save_vae_checkpoint(path2, loaded.model, loaded.optimizer, loaded.stats);
  std::ifstream f1(path, std::ios::binary);
  std::ifstream f2(path2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  EXPECT_EQ(b1, b2);
}

TEST(Checkpoint, GanRoundTripAndKindChecks) {
  TempDir dir("ckpt_gan");
  const ArchSpec spec = ArchSpec::miniature(Representation::cartesian);
  Gan gan(spec, 95);
  ad::AdamConfig config;
  ad::Adam gen_opt(config);
  ad::Adam disc_opt(config);

  const auto path = dir.path() / "gan.ckpt";
  save_gan_checkpoint(path, gan, gen_opt, disc_opt, std::nullopt);
  EXPECT_EQ(checkpoint_kind(path), "gan");

  GanCheckpoint loaded = load_gan_checkpoint(path);
  EXPECT_EQ(loaded.model.arch(), spec);
  EXPECT_FALSE(loaded.stats.has_value());
  const ad::Tensor a = loaded.model.sample(2, 7);
  const ad::Tensor b = load_gan_checkpoint(path).model.sample(2, 7);
  EXPECT_EQ(a.data, b.data);

  EXPECT_THROW(load_vae_checkpoint(path), malformed_input_error);

  // Corrupt and truncated files are rejected.
  const auto bad = dir.path() / "bad.ckpt";
  std::ofstream(bad, std::ios::binary) << "LGRDjunk";
  EXPECT_THROW(load_gan_checkpoint(bad), malformed_input_error);
  EXPECT_THROW(checkpoint_kind(dir.path() / "missing.ckpt"),
               malformed_input_error);

  std::ifstream full(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(full)),
                    std::istreambuf_iterator<char>());
  const auto truncated = dir.path() / "trunc.ckpt";
  std::ofstream(truncated, std::ios::binary)
      << bytes.substr(0, bytes.size() - 64);
  EXPECT_THROW(load_gan_checkpoint(truncated), malformed_input_error);
}
