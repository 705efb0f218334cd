#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "paegan/model/train_gan.hpp"
#include "paegan/model/train_pae.hpp"
#include "paegan/nn/checkpoint.hpp"
#include "paegan/nn/functional.hpp"
#include "reference_model.hpp"

using namespace paegan;
using namespace paegan::model;
using paegan::testing::gradcheck;
namespace ref = paegan::testing::ref;

namespace {

PaeConfig tiny_pae(int image = 8) { return PaeConfig{image, 2, 3, 2, 5, 4, 0.0}; }
SamplerConfig tiny_sampler() { return SamplerConfig{4, 3, 6}; }
DiscriminatorConfig tiny_disc(int image = 8) { return DiscriminatorConfig{image, 2, 3, 2, 0.2}; }

Tensor<double> random_frames(Rng& rng, std::size_t rows, std::size_t px) {
  Tensor<double> t({rows, px});
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

Tensor<double> random_beliefs(Rng& rng, std::size_t rows, std::size_t H) {
  Tensor<double> t({rows, H});
  for (auto& v : t.values()) v = rng.uniform(-0.9, 0.9);
  return t;
}

ref::Vec row(const Tensor<double>& t, std::size_t r) {
  const std::size_t w = t.size() / t.dim(0);
  return ref::Vec(t.data() + r * w, t.data() + (r + 1) * w);
}

// Scales every parameter so activations leave the near-linear regime.
template <class Store>
void spread(Store& s, Rng& rng, double lo = 0.5, double hi = 2.0) {
  const double f = rng.uniform(lo, hi);
  for (auto& [k, p] : s)
    for (auto& v : p.value.values()) v *= f;
}

double grad_norm(const nn::Parameter<double>& p) {
  double s = 0;
  for (auto v : p.grad.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Curriculum and masking

TEST(Curriculum, EndpointsAndMidpoint) {
  const CurriculumSchedule s{0.3, 0.98, 1000};
  EXPECT_DOUBLE_EQ(mask_probability(0, s), 0.3);
  EXPECT_DOUBLE_EQ(mask_probability(1000, s), 0.98);
  EXPECT_DOUBLE_EQ(mask_probability(5000, s), 0.98);
  EXPECT_NEAR(mask_probability(500, s), 0.64, 1e-12);
  EXPECT_DOUBLE_EQ(mask_probability(0, CurriculumSchedule{0.3, 0.98, 0}), 0.98);
}

TEST(Curriculum, TrainConfigRampsOverHalfTheUpdates) {
  PaeTrainConfig c;
  c.updates = 3000;
  EXPECT_EQ(c.schedule().ramp_updates, 1500u);
  EXPECT_DOUBLE_EQ(c.schedule().p_start, 0.3);
  EXPECT_DOUBLE_EQ(c.schedule().p_end, 0.98);
}

TEST(Curriculum, RejectsInvertedEndpoints) {
  EXPECT_THROW((CurriculumSchedule{0.9, 0.3, 10}.validate()), std::invalid_argument);
  PaeTrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(MaskLaw, FractionAtFinalProbability) {
  Rng rng(17);
  const auto mask = draw_mask(rng, 10001, 1, 0.98, true);
  const double frac = static_cast<double>(std::count(mask.begin() + 1, mask.end(), true)) / 10000.0;
  EXPECT_GE(frac, 0.97);
  EXPECT_LE(frac, 0.99);
}

TEST(MaskLaw, FirstFrameNeverMasked) {
  Rng rng(3);
  const auto mask = draw_mask(rng, 20, 50, 1.0, true);
  for (std::size_t b = 0; b < 50; ++b) EXPECT_FALSE(mask[b]);
  for (std::size_t i = 50; i < mask.size(); ++i) EXPECT_TRUE(mask[i]);
  Rng rng2(3);
  const auto all = draw_mask(rng2, 20, 50, 1.0, false);
  EXPECT_TRUE(std::all_of(all.begin(), all.end(), [](bool m) { return m; }));
}

// ---------------------------------------------------------------------------
// PAE structure

TEST(Pae, DefaultArchitectureShapes) {
  const auto m = make_pae<float>(PaeConfig{}, 1);
  EXPECT_EQ(m.params.at("pae.gru.input.w").value.shape(), (nn::Shape{768, 128}));
  EXPECT_EQ(m.params.at("pae.gru.u").value.shape(), (nn::Shape{768, 256}));
  EXPECT_EQ(m.params.at("pae.dec.fc.w").value.shape(), (nn::Shape{64 * 7 * 7, 256}));
  const Tensor<float> h = zero_belief(m, 2);
  const Tensor<float> img = decode(m, h);
  EXPECT_EQ(img.shape(), (nn::Shape{2, 784}));
}

TEST(Pae, RejectsBadImageSize) { EXPECT_THROW(make_pae<double>(PaeConfig{30}, 1), std::invalid_argument); }

TEST(Pae, DecodeRangeForWideBeliefs) {
  const auto m = make_pae<float>(PaeConfig{}, 2);
  Rng rng(5);
  Tensor<float> h({16, 256});
  for (auto& v : h.values()) v = static_cast<float>(rng.uniform(-5, 5));
  const auto img = decode(m, h);
  for (auto v : img.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  EXPECT_EQ(decode(m, h), img);
}

TEST(Pae, PropagateIsDeterministic) {
  const auto m = make_pae<float>(PaeConfig{}, 3);
  const Tensor<float> null_img({1, 784});
  const auto a = propagate(m, zero_belief(m), null_img);
  const auto b = propagate(m, zero_belief(m), null_img);
  EXPECT_EQ(a, b);
  const auto gx = null_projection(m);
  EXPECT_EQ(propagate_blind(m, zero_belief(m), gx), a);
}

TEST(Pae, RecursionSplitsAnywhere) {
  const auto m = make_pae<double>(tiny_pae(), 4);
  Rng rng(6);
  const auto frames = random_frames(rng, 12, 64);
  auto run = [&](Tensor<double> h, std::size_t from, std::size_t to) {
    for (std::size_t t = from; t < to; ++t) h = propagate(m, h, frames.rows(t, 1));
    return h;
  };
  const auto full = run(zero_belief(m), 0, 12);
  for (std::size_t k : {1u, 5u, 11u}) EXPECT_EQ(run(run(zero_belief(m), 0, k), k, 12), full);
}

TEST(Pae, FeatureExtraction) {
  const auto m = make_pae<double>(tiny_pae(), 4);
  Rng rng(1);
  const auto f = encode_features(m, random_frames(rng, 3, 64));
  EXPECT_EQ(f.shape(), (nn::Shape{3, 5}));
}

// ---------------------------------------------------------------------------
// Prediction loss oracle and gradients

TEST(PaeLoss, MatchesLoopOracle) {
  for (int c = 0; c < 100; ++c) {
    Rng rng(1000 + c);
    auto m = make_pae<double>(tiny_pae(c % 2 ? 8 : 4), 50 + c);
    spread(m.params, rng);
    const std::size_t T = 1 + rng.index(4), B = 1 + rng.index(2), px = m.cfg.pixels();
    const auto frames = random_frames(rng, T * B, px);
    std::vector<bool> mask(T * B);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(0.4);
    double expected = 0;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<ref::Vec> ep;
      std::vector<bool> em;
      for (std::size_t t = 0; t < T; ++t) {
        ep.push_back(row(frames, t * B + b));
        em.push_back(mask[t * B + b]);
      }
      expected += ref::prediction_loss_loop(m, ep, em) / static_cast<double>(B);
    }
    Graph<double> g;
    const double got = pae_loss(g, m.params, m.cfg, frames, mask, B).value()[0];
    ASSERT_NEAR(got, expected, 1e-9) << "case " << c;
  }
}

TEST(PaeLoss, PerfectPredictorGivesZero) {
  // Large negative decoder bias drives every output to 0; on all-zero
  // frames the loss vanishes.
  auto m = make_pae<double>(tiny_pae(4), 1);
  for (auto& v : m.params.at("pae.dec.deconv3.b").value.values()) v = -60;
  for (auto& v : m.params.at("pae.dec.deconv3.w").value.values()) v = 0;
  const Tensor<double> frames({3, 16});
  EXPECT_NEAR(pae_loss_value(m, frames, {false, true, true}), 0.0, 1e-40);
}

TEST(PaeLoss, RejectsLengthMismatch) {
  const auto m = make_pae<double>(tiny_pae(4), 1);
  const Tensor<double> frames({3, 16});
  EXPECT_THROW(pae_loss_value(m, frames, {false, true}), std::invalid_argument);
}

TEST(PaeLoss, EndToEndFiniteDifferences) {
  for (int c = 0; c < 20; ++c) {
    Rng rng(200 + c);
    auto m = make_pae<double>(tiny_pae(c % 2 ? 8 : 4), 300 + c);
    const auto frames = random_frames(rng, 3 * 2, m.cfg.pixels());
    const std::vector<bool> mask{false, false, true, false, true, true};
    // A ReLU input close to zero spoils one step size but not all of them.
    double best = 1.0;
    std::string key;
    for (double h : {1e-4, 1e-5, 1e-6}) {
      const auto res = gradcheck(m.params, [&](Graph<double>& g, nn::ParamStore<double>& s) {
        return pae_loss(g, s, m.cfg, frames, mask, 2);
      }, h);
      if (res.worst_relative_error < best) best = res.worst_relative_error, key = res.worst_key;
    }
    ASSERT_LT(best, 1e-3) << "case " << c << " block " << key;
  }
}

TEST(PaeLoss, EveryBlockReceivesGradient) {
  world::WorldConfig wc;
  wc.image_size = 8;
  wc.world_size = 8;
  wc.ball_radius = 1.0;
  const auto data = world::generate_dataset(wc, 4, 6, 2);
  auto m = make_pae<double>(PaeConfig{8, 4, 6, 8, 8, 8, 0.0}, 9);
  Rng rng(1);
  const auto frames = gather_time_major<double>(data, {0, 1, 2});
  const auto mask = draw_mask(rng, 6, 3, 0.3, true);
  m.params.zero_grad();
  Graph<double> g;
  g.backward(pae_loss(g, m.params, m.cfg, frames, mask, 3));
  for (const auto& [k, p] : m.params) EXPECT_GT(grad_norm(p), 0.0) << k;
}

// ---------------------------------------------------------------------------
// Training

namespace {
world::EpisodeSet small_world_data(std::size_t episodes, std::size_t steps, std::uint64_t seed, double speed = 0.5,
                                   double noise = 0.05) {
  world::WorldConfig wc;
  wc.image_size = 8;
  wc.world_size = 8;
  wc.ball_radius = 1.0;
  wc.speed = speed;
  wc.process_noise_sigma = noise;
  return world::generate_dataset(wc, episodes, steps, seed);
}
}  // namespace

TEST(TrainPae, DeterministicAndResumable) {
  const auto data = small_world_data(6, 5, 1);
  PaeTrainConfig tc;
  tc.updates = 6;
  tc.batch_size = 2;
  tc.seed = 11;
  auto a = make_pae<float>(tiny_pae(8), 1);
  auto b = make_pae<float>(tiny_pae(8), 1);
  const auto log_a = train_pae(a, data, tc);
  train_pae(b, data, tc);
  EXPECT_TRUE(nn::serialize_params(a.params) == nn::serialize_params(b.params));
  ASSERT_EQ(log_a.size(), 6u);
  EXPECT_DOUBLE_EQ(log_a[0].p_mask, 0.3);
  EXPECT_DOUBLE_EQ(log_a[5].p_mask, 0.98);

  // Interrupt after 4 updates, checkpoint, reload and finish.
  auto c = make_pae<float>(tiny_pae(8), 1);
  train_pae(c, data, tc, 0, 4);
  const std::string ckpt = nn::serialize_params(c.params);
  auto d = make_pae<float>(tiny_pae(8), 77);
  nn::deserialize_params(d.params, ckpt);
  train_pae(d, data, tc, 4, tc.updates);
  EXPECT_TRUE(nn::serialize_params(d.params) == nn::serialize_params(a.params));
}

TEST(TrainPae, RejectsEmptyDataset) {
  world::EpisodeSet empty;
  auto m = make_pae<float>(tiny_pae(8), 1);
  PaeTrainConfig tc;
  tc.updates = 1;
  EXPECT_THROW(train_pae(m, empty, tc), std::invalid_argument);
}

TEST(TrainPae, FullyMaskedStaticWorldLearnsTheMeanFrame) {
  auto data = small_world_data(64, 4, 5, 0.0, 0.0);
  for (std::size_t e = 0; e < data.episodes; ++e) ASSERT_TRUE(std::equal(data.frame(e, 0).begin(), data.frame(e, 0).end(), data.frame(e, 3).begin()));
  std::vector<double> mean(64, 0.0), var(64, 0.0);
  for (std::size_t i = 0; i < data.frames.size(); ++i) mean[i % 64] += data.frames[i] / static_cast<double>(data.num_frames());
  for (std::size_t i = 0; i < data.frames.size(); ++i) {
    const double d = data.frames[i] - mean[i % 64];
    var[i % 64] += d * d / static_cast<double>(data.num_frames());
  }
  const double total_var = std::accumulate(var.begin(), var.end(), 0.0);
  PaeTrainConfig tc;
  tc.updates = 1500;
  tc.batch_size = 16;
  tc.p_start = tc.p_end = 1.0;
  tc.keep_first_frame = false;
  tc.adam.learning_rate = 3e-3;
  tc.seed = 2;
  auto m = make_pae<float>(PaeConfig{8, 4, 4, 4, 8, 8}, 3);
  const auto log = train_pae(m, data, tc);
  const auto pred = decode(m, propagate(m, zero_belief(m), Tensor<float>({1, 64})));
  double dev = 0;
  for (std::size_t p = 0; p < 64; ++p) dev += (pred[p] - mean[p]) * (pred[p] - mean[p]);
  EXPECT_LT(dev, 0.05 * total_var);
  // Per-episode loss approaches steps * total pixel variance.
  double tail = 0;
  for (std::size_t i = log.size() - 100; i < log.size(); ++i) tail += log[i].loss / 100.0;
  EXPECT_NEAR(tail, 4 * total_var, 0.15 * 4 * total_var);
}

TEST(TrainPae, LossReductionHelper) {
  std::vector<PaeLogRow> log;
  for (int i = 0; i < 300; ++i) log.push_back({static_cast<std::size_t>(i), 0.3, i < 100 ? 10.0 : 1.0, 0});
  const auto r = loss_reduction(log, 100);
  EXPECT_NEAR(r.start, 10.0, 1e-12);
  EXPECT_NEAR(r.end, 1.0, 1e-12);
  EXPECT_NEAR(r.reduction, 0.9, 1e-12);
}

// ---------------------------------------------------------------------------
// Sampler, discriminator and their losses

TEST(Sampler, OutputShapeAndDeterminism) {
  const auto s = make_sampler<float>(SamplerConfig{}, 1);
  Rng rng(2);
  const auto bs = Tensor<float>({3, 256});
  const auto z = standard_noise<float>(rng, 3, 16);
  const auto a = sample_states(s, bs, z);
  EXPECT_EQ(a.shape(), (nn::Shape{3, 256}));
  EXPECT_EQ(sample_states(s, bs, z), a);
  EXPECT_NE(sample_states(s, bs, standard_noise<float>(rng, 3, 16)), a);
}

TEST(Discriminator, OutputInOpenUnitInterval) {
  const auto d = make_discriminator<float>(DiscriminatorConfig{}, 1);
  Rng rng(3);
  Tensor<float> imgs({8, 784});
  for (auto& v : imgs.values()) v = static_cast<float>(rng.uniform());
  const auto p = discriminator_probability(d, imgs);
  EXPECT_EQ(p.shape(), (nn::Shape{8, 1}));
  for (auto v : p.values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(GeneratorLoss, HalfAndCertainDiscriminator) {
  const auto pae = make_pae<double>(tiny_pae(8), 1);
  auto s = make_sampler<double>(tiny_sampler(), 2);
  auto d = make_discriminator<double>(tiny_disc(8), 3);
  Rng rng(4);
  const auto bs = random_beliefs(rng, 4, 4);
  const auto z = standard_noise<double>(rng, 4, 3);
  auto eval = [&]() {
    Graph<double> g;
    return generator_loss(g, s.params, pae.params, pae.cfg, d.params, d.cfg, g.constant(bs), g.constant(z)).value()[0];
  };
  d.params.at("disc.head.w").value.fill(0.0);
  d.params.at("disc.head.b").value.fill(0.0);
  EXPECT_NEAR(eval(), std::log(2.0), 1e-12);
  d.params.at("disc.head.b").value.fill(40.0);
  EXPECT_LT(eval(), 1e-6);
}

TEST(GeneratorLoss, MatchesManualComposition) {
  for (int c = 0; c < 20; ++c) {
    Rng rng(40 + c);
    const auto pae = make_pae<double>(tiny_pae(8), 10 + c);
    const auto s = make_sampler<double>(tiny_sampler(), 20 + c);
    const auto d = make_discriminator<double>(tiny_disc(8), 30 + c);
    const auto bs = random_beliefs(rng, 5, 4);
    const auto z = standard_noise<double>(rng, 5, 3);
    const auto p = discriminator_probability(d, decode(pae, sample_states(s, bs, z)));
    double manual = 0;
    for (auto v : p.values()) manual += nn::bce_loss(v, 1.0) / 5.0;
    Graph<double> g;
    const double got =
        generator_loss(g, s.params, pae.params, pae.cfg, d.params, d.cfg, g.constant(bs), g.constant(z)).value()[0];
    ASSERT_NEAR(got, manual, 1e-9);
  }
}

TEST(AveragerLoss, IdenticalSamplesAtZeroHorizon) {
  const auto pae = make_pae<double>(tiny_pae(8), 1);
  Rng rng(2);
  const auto bs = random_beliefs(rng, 2, 4);
  const auto gx = null_projection(pae);
  Graph<double> g;
  Var<double> b = g.constant(bs);
  EXPECT_NEAR(averager_term(g, pae.params, pae.cfg, b, nn::repeat_rows(b, 8), 8, 0, gx).value()[0], 0.0, 1e-24);
}

TEST(AveragerLoss, SingleSampleReduction) {
  const auto pae = make_pae<double>(tiny_pae(8), 1);
  Rng rng(3);
  const auto bs = random_beliefs(rng, 1, 4);
  const auto sp = random_beliefs(rng, 1, 4);
  const auto gx = null_projection(pae);
  Graph<double> g;
  const double got = averager_term(g, pae.params, pae.cfg, g.constant(bs), g.constant(sp), 1, 0, gx).value()[0];
  const auto a = decode(pae, sp), b = decode(pae, bs);
  double expected = 0;
  for (std::size_t i = 0; i < a.size(); ++i) expected += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(got, expected, 1e-12);
}

TEST(AveragerLoss, MatchesLoopOracle) {
  for (int c = 0; c < 100; ++c) {
    Rng rng(500 + c);
    auto pae = make_pae<double>(tiny_pae(c % 2 ? 8 : 4), 600 + c);
    auto s = make_sampler<double>(tiny_sampler(), 700 + c);
    spread(pae.params, rng);
    spread(s.params, rng);
    const std::size_t N = 1 + rng.index(2), n = 1 + rng.index(4), T = rng.index(4);
    const auto bs = random_beliefs(rng, N, 4);
    const auto z = standard_noise<double>(rng, N * n, 3);
    double expected = 0;
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<ref::Vec> noises;
      for (std::size_t k = 0; k < n; ++k) noises.push_back(row(z, i * n + k));
      expected += ref::averager_loss_loop(pae, s, row(bs, i), noises, T) / static_cast<double>(N);
    }
    Graph<double> g;
    const double got =
        averager_loss(g, s.params, pae.params, pae.cfg, g.constant(bs), g.constant(z), n, T, null_projection(pae))
            .value()[0];
    ASSERT_NEAR(got, expected, 1e-9) << "case " << c;
  }
}

TEST(AveragerLoss, RejectsZeroSamples) {
  const auto pae = make_pae<double>(tiny_pae(8), 1);
  const auto s = make_sampler<double>(tiny_sampler(), 1);
  Graph<double> g;
  Var<double> bs = g.constant(Tensor<double>({1, 4}));
  EXPECT_THROW(averager_loss(g, s.params, pae.params, pae.cfg, bs, g.constant(Tensor<double>({1, 3})), 0, 0,
                             null_projection(pae)),
               std::invalid_argument);
}

TEST(SamplerLoss, Arithmetic) {
  EXPECT_NEAR(sampler_loss(0.7, 0.002, SamplerLossWeights{1, 500}), 1.7, 1e-12);
  EXPECT_DOUBLE_EQ(sampler_loss(0.7, 0.3, SamplerLossWeights{1, 0}), 0.7);
}

TEST(SamplerLoss, MatchesLoopOracle) {
  for (int c = 0; c < 100; ++c) {
    Rng rng(900 + c);
    const auto pae = make_pae<double>(tiny_pae(8), 1000 + c);
    const auto s = make_sampler<double>(tiny_sampler(), 1100 + c);
    const auto d = make_discriminator<double>(tiny_disc(8), 1200 + c);
    const SamplerLossWeights w{rng.uniform(0.1, 2.0), rng.uniform(0.0, 600.0)};
    const std::size_t N = 1 + rng.index(2), n = 1 + rng.index(3), T = rng.index(3);
    const auto bs = random_beliefs(rng, N, 4);
    const auto zg = standard_noise<double>(rng, N * n, 3);
    const auto za = standard_noise<double>(rng, N * n, 3);
    std::vector<ref::Vec> gb, gz;
    double l_av = 0;
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<ref::Vec> noises;
      for (std::size_t k = 0; k < n; ++k) {
        gb.push_back(row(bs, i));
        gz.push_back(row(zg, i * n + k));
        noises.push_back(row(za, i * n + k));
      }
      l_av += ref::averager_loss_loop(pae, s, row(bs, i), noises, T) / static_cast<double>(N);
    }
    const double expected = w.lambda_g * ref::generator_loss_loop(pae, s, d, gb, gz) + w.lambda_av * l_av;
    Graph<double> g;
    Var<double> b = g.constant(bs);
    Var<double> lg =
        generator_loss(g, s.params, pae.params, pae.cfg, d.params, d.cfg, nn::repeat_rows(b, n), g.constant(zg));
    Var<double> la = averager_loss(g, s.params, pae.params, pae.cfg, b, g.constant(za), n, T, null_projection(pae));
    const double got = sampler_loss(lg, la, w).value()[0];
    ASSERT_NEAR(got, expected, 1e-9 * std::max(1.0, std::abs(expected))) << "case " << c;
  }
}

TEST(SamplerLoss, GradientIsLinearInTheTerms) {
  const auto pae = make_pae<double>(tiny_pae(8), 1);
  auto s = make_sampler<double>(tiny_sampler(), 2);
  const auto d = make_discriminator<double>(tiny_disc(8), 3);
  Rng rng(4);
  const auto bs = random_beliefs(rng, 2, 4);
  const auto zg = standard_noise<double>(rng, 6, 3), za = standard_noise<double>(rng, 6, 3);
  const auto gx = null_projection(pae);
  const SamplerLossWeights w{1.0, 500.0};
  auto grads = [&](int which) {
    s.params.zero_grad();
    Graph<double> g;
    Var<double> b = g.constant(bs);
    Var<double> lg = generator_loss(g, s.params, pae.params, pae.cfg, d.params, d.cfg, nn::repeat_rows(b, 3), g.constant(zg));
    Var<double> la = averager_loss(g, s.params, pae.params, pae.cfg, b, g.constant(za), 3, 2, gx);
    g.backward(which == 0 ? lg : which == 1 ? la : sampler_loss(lg, la, w));
    std::vector<double> out;
    for (const auto& [k, p] : s.params) out.insert(out.end(), p.grad.values().begin(), p.grad.values().end());
    return out;
  };
  const auto g_g = grads(0), g_av = grads(1), g_tot = grads(2);
  double max_abs = 0;
  for (double v : g_tot) max_abs = std::max(max_abs, std::abs(v));
  for (std::size_t i = 0; i < g_tot.size(); ++i)
    ASSERT_NEAR(g_tot[i], w.lambda_g * g_g[i] + w.lambda_av * g_av[i], 1e-10 * std::max(1.0, max_abs));
}

TEST(SamplerLoss, FiniteDifferences) {
  for (int c = 0; c < 20; ++c) {
    Rng rng(60 + c);
    const auto pae = make_pae<double>(tiny_pae(8), 70 + c);
    auto s = make_sampler<double>(tiny_sampler(), 80 + c);
    const auto d = make_discriminator<double>(tiny_disc(8), 90 + c);
    const auto bs = random_beliefs(rng, 2, 4);
    const auto zg = standard_noise<double>(rng, 4, 3), za = standard_noise<double>(rng, 4, 3);
    const auto gx = null_projection(pae);
    const auto res = gradcheck(s.params, [&](Graph<double>& g, nn::ParamStore<double>& sp) {
      Var<double> b = g.constant(bs);
      Var<double> lg = generator_loss(g, sp, pae.params, pae.cfg, d.params, d.cfg, nn::repeat_rows(b, 2), g.constant(zg));
      Var<double> la = averager_loss(g, sp, pae.params, pae.cfg, b, g.constant(za), 2, 1 + c % 3, gx);
      return sampler_loss(lg, la, SamplerLossWeights{1.0, 5.0});
    });
    ASSERT_LT(res.worst_relative_error, 1e-3) << "case " << c << " block " << res.worst_key;
  }
}

TEST(Discriminator, FiniteDifferences) {
  for (int c = 0; c < 20; ++c) {
    Rng rng(160 + c);
    auto d = make_discriminator<double>(tiny_disc(8), 170 + c);
    const auto real = random_frames(rng, 4, 64), fake = random_frames(rng, 4, 64);
    const auto res = gradcheck(d.params, [&](Graph<double>& g, nn::ParamStore<double>& dp) {
      return nn::add(nn::bce(discriminate(g, dp, d.cfg, g.constant(real)), 1.0),
                     nn::bce(discriminate(g, dp, d.cfg, g.constant(fake)), 0.0));
    }, 1e-5, 1e-6);
    ASSERT_LT(res.worst_relative_error, 1e-3) << "case " << c << " block " << res.worst_key;
  }
}

TEST(ExpectedObs, SingleSampleIsItsDecode) {
  const auto pae = make_pae<double>(tiny_pae(8), 1);
  const auto s = make_sampler<double>(tiny_sampler(), 2);
  Rng rng(3);
  const auto bs = random_beliefs(rng, 1, 4);
  Rng a(9), b(9);
  const auto mean = expected_obs_via_samples(bs, 1, 0, s, pae, a);
  const auto direct = decode(pae, sample_states(s, bs, standard_noise<double>(b, 1, 3)));
  for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(mean[i], direct[i], 1e-15);
}

TEST(ExpectedObs, NoiseBlindSamplerIgnoresN) {
  const auto pae = make_pae<double>(tiny_pae(8), 1);
  auto s = make_sampler<double>(tiny_sampler(), 2);
  auto& w = s.params.at("sampler.fc1.w").value;  // [width, H + Z]; zero the noise columns
  for (std::size_t o = 0; o < w.dim(0); ++o)
    for (std::size_t j = 4; j < 7; ++j) w[o * 7 + j] = 0.0;
  Rng rng(3);
  const auto bs = random_beliefs(rng, 1, 4);
  const auto gx = null_projection(pae);
  Tensor<double> sp = sample_states(s, bs, Tensor<double>({1, 3}));
  for (int t = 0; t < 3; ++t) sp = propagate_blind(pae, sp, gx);
  const auto direct = decode(pae, sp);
  for (std::size_t n : {1u, 5u, 17u}) {
    Rng r(n);
    const auto mean = expected_obs_via_samples(bs, n, 3, s, pae, r);
    for (std::size_t i = 0; i < mean.size(); ++i) ASSERT_NEAR(mean[i], direct[i], 1e-12);
  }
  Rng r(1);
  EXPECT_THROW(expected_obs_via_samples(bs, 0, 0, s, pae, r), std::invalid_argument);
}

TEST(TrainGan, FrozenPaeAndDeterminism) {
  const auto data = small_world_data(8, 6, 3);
  auto pae = make_pae<float>(tiny_pae(8), 1);
  const std::string before = nn::serialize_params(pae.params, false);
  GanTrainConfig gc;
  gc.updates = 6;
  gc.batch_size = 3;
  gc.n_samples = 2;
  gc.max_horizon = 2;
  gc.real_batch = 4;
  gc.pool_episodes = 4;
  gc.seed = 5;
  const auto pool = build_belief_pool(pae, data, gc.pool_p_mask, gc.pool_episodes, gc.seed);
  EXPECT_EQ(pool.shape(), (nn::Shape{24, 4}));
  auto run = [&](std::size_t split) {
    auto s = make_sampler<float>(SamplerConfig{4, 3, 8}, 2);
    auto d = make_discriminator<float>(DiscriminatorConfig{8, 2, 3, 2, 0.2}, 3);
    std::vector<GanLogRow> log;
    train_sampler_gan(pae, s, d, pool, data, gc, 0, split, [&](const GanLogRow& r) { log.push_back(r); });
    auto s2 = make_sampler<float>(SamplerConfig{4, 3, 8}, 99);
    auto d2 = make_discriminator<float>(DiscriminatorConfig{8, 2, 3, 2, 0.2}, 98);
    nn::deserialize_params(s2.params, nn::serialize_params(s.params));
    nn::deserialize_params(d2.params, nn::serialize_params(d.params));
    train_sampler_gan(pae, s2, d2, pool, data, gc, split, gc.updates, [&](const GanLogRow& r) { log.push_back(r); });
    return std::make_tuple(nn::serialize_params(s2.params), nn::serialize_params(d2.params), log);
  };
  const auto [sa, da, la] = run(6);
  const auto [sb, db, lb] = run(3);
  EXPECT_TRUE(sa == sb);
  EXPECT_TRUE(da == db);
  ASSERT_EQ(la.size(), 6u);
  EXPECT_TRUE(std::isnan(la[0].l_d));
  EXPECT_FALSE(std::isnan(la[1].l_d));
  EXPECT_TRUE(nn::serialize_params(pae.params, false) == before);
}

TEST(TrainGan, RejectsMissingPae) {
  const auto data = small_world_data(2, 3, 3);
  Pae<float> empty{tiny_pae(8), {}};
  auto s = make_sampler<float>(SamplerConfig{4, 3, 8}, 2);
  auto d = make_discriminator<float>(DiscriminatorConfig{8, 2, 3, 2, 0.2}, 3);
  GanTrainConfig gc;
  gc.updates = 1;
  EXPECT_THROW(train_sampler_gan(empty, s, d, Tensor<float>({1, 4}), data, gc, 0, 1), std::invalid_argument);
}
