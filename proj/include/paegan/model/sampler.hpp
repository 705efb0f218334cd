#pragma once

// Belief-state sampler (MLP over belief and noise), DCGAN-style
// discriminator, and the sampler losses: adversarial term L_G, averager
// term L_Av and their weighted sum.

#include <cmath>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "paegan/model/pae.hpp"

namespace paegan::model {

struct SamplerConfig {
  int hidden_dim = 256;  // belief size, must match the PAE
  int noise_dim = 16;
  int width = 512;

  void validate() const {
    if (hidden_dim < 1 || noise_dim < 1 || width < 1) throw std::invalid_argument("sampler config: sizes must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamplerConfig, hidden_dim, noise_dim, width)

struct DiscriminatorConfig {
  int image_size = 28;
  int channels1 = 32;
  int channels2 = 64;
  int channels3 = 128;
  double leak = 0.2;

  int final_size() const { return (image_size / 4 + 2 - 3) / 2 + 1; }

  void validate() const {
    if (image_size < 4 || image_size % 4 != 0) throw std::invalid_argument("discriminator config: image_size must be a multiple of 4");
    if (channels1 < 1 || channels2 < 1 || channels3 < 1) throw std::invalid_argument("discriminator config: channels must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, image_size, channels1, channels2, channels3, leak)

template <class T>
struct Sampler {
  SamplerConfig cfg;
  ParamStore<T> params;
};

template <class T>
struct Discriminator {
  DiscriminatorConfig cfg;
  ParamStore<T> params;
};

template <class T>
Sampler<T> make_sampler(const SamplerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Sampler<T> s{cfg, {}};
  Rng rng(seed, {0x5a3});
  const std::size_t in = cfg.hidden_dim + cfg.noise_dim, w = cfg.width, out = cfg.hidden_dim;
  auto fc = [&](const std::string& k, std::size_t a, std::size_t b) {
    nn::add_uniform(s.params, k + ".w", {b, a}, static_cast<double>(a), rng);
    nn::add_uniform(s.params, k + ".b", {b}, static_cast<double>(a), rng);
  };
  fc("sampler.fc1", in, w);
  fc("sampler.fc2", w, w);
  fc("sampler.fc3", w, out);
  return s;
}

template <class T>
Discriminator<T> make_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Discriminator<T> d{cfg, {}};
  Rng rng(seed, {0xd15});
  auto& P = d.params;
  const std::size_t c1 = cfg.channels1, c2 = cfg.channels2, c3 = cfg.channels3;
  auto conv = [&](const std::string& k, std::size_t cin, std::size_t cout, std::size_t K) {
    const double fan = static_cast<double>(cin * K * K);
    nn::add_uniform(P, k + ".w", {cout, cin, K, K}, fan, rng);
    nn::add_uniform(P, k + ".b", {cout}, fan, rng);
  };
  auto bn = [&](const std::string& k, std::size_t c) {
    P.add(k + ".gamma", Tensor<T>({c}, T{1}));
    P.add(k + ".beta", Tensor<T>({c}, T{0}));
  };
  conv("disc.conv1", 1, c1, 4);
  conv("disc.conv2", c1, c2, 4);
  bn("disc.bn2", c2);
  conv("disc.conv3", c2, c3, 3);
  bn("disc.bn3", c3);
  const std::size_t f = static_cast<std::size_t>(cfg.final_size());
  const std::size_t flat = c3 * f * f;
  nn::add_uniform(P, "disc.head.w", {1, flat}, static_cast<double>(flat), rng);
  nn::add_uniform(P, "disc.head.b", {1}, static_cast<double>(flat), rng);
  return d;
}

/// bs [N,H] and noise [N,Z] -> state samples [N,H] in (-1,1).
template <class T, class Store>
Var<T> sample_state(Graph<T>& g, Store& P, Var<T> bs, Var<T> noise) {
  auto p = [&](const char* k) { return g.parameter(P, k); };
  Var<T> x = nn::concat_cols(bs, noise);
  x = nn::relu(nn::linear(x, p("sampler.fc1.w"), p("sampler.fc1.b")));
  x = nn::relu(nn::linear(x, p("sampler.fc2.w"), p("sampler.fc2.b")));
  return nn::tanh(nn::linear(x, p("sampler.fc3.w"), p("sampler.fc3.b")));
}

/// Images [N,1,S,S] -> probability of "real" [N,1]. Batch normalisation
/// always uses the statistics of the batch passed in.
template <class T, class Store>
Var<T> discriminate(Graph<T>& g, Store& P, const DiscriminatorConfig& cfg, Var<T> images) {
  const std::size_t N = images.value().dim(0), S = cfg.image_size;
  const T leak = static_cast<T>(cfg.leak);
  auto p = [&](const char* k) { return g.parameter(P, k); };
  Var<T> x = nn::reshape(images, {N, 1, S, S});
  x = nn::leaky_relu(nn::conv2d(x, p("disc.conv1.w"), p("disc.conv1.b"), 2, 1), leak);
  x = nn::conv2d(x, p("disc.conv2.w"), p("disc.conv2.b"), 2, 1);
  x = nn::leaky_relu(nn::batchnorm2d(x, p("disc.bn2.gamma"), p("disc.bn2.beta")), leak);
  x = nn::conv2d(x, p("disc.conv3.w"), p("disc.conv3.b"), 2, 1);
  x = nn::leaky_relu(nn::batchnorm2d(x, p("disc.bn3.gamma"), p("disc.bn3.beta")), leak);
  x = nn::reshape(x, {N, x.value().size() / N});
  return nn::sigmoid(nn::linear(x, p("disc.head.w"), p("disc.head.b")));
}

/// T blind propagations of every row of h with a frozen PAE.
template <class T, class Store>
Var<T> propagate_blind(Graph<T>& g, Store& pae, Var<T> h, const Tensor<T>& gx_null, std::size_t steps) {
  if (steps == 0) return h;
  const std::size_t N = h.value().dim(0), G = gx_null.size();
  Tensor<T> gx({N, G});
  for (std::size_t n = 0; n < N; ++n) std::copy_n(gx_null.data(), G, gx.data() + n * G);
  Var<T> gxv = g.constant(std::move(gx));
  for (std::size_t t = 0; t < steps; ++t) h = gru(g, pae, gxv, h);
  return h;
}

/// L_G: mean BCE of the discriminator's verdict on decoded samples against
/// the label "real".
template <class T, class SStore, class PStore, class DStore>
Var<T> generator_loss(Graph<T>& g, SStore& sampler, PStore& pae, const PaeConfig& pae_cfg, DStore& disc,
                      const DiscriminatorConfig& disc_cfg, Var<T> bs, Var<T> noise) {
  Var<T> images = decode(g, pae, pae_cfg, sample_state(g, sampler, bs, noise));
  return nn::bce(discriminate(g, disc, disc_cfg, images), T{1});
}

/// L_Av given the samples [N*n,H] directly.
template <class T, class PStore>
Var<T> averager_term(Graph<T>& g, PStore& pae, const PaeConfig& pae_cfg, Var<T> bs, Var<T> samples, std::size_t n,
                     std::size_t horizon, const Tensor<T>& gx_null) {
  if (n < 1) throw std::invalid_argument("averager_loss: need at least one sample");
  const std::size_t N = bs.value().dim(0);
  if (samples.value().dim(0) != N * n) throw nn::ShapeError("averager_loss: samples must have N*n rows");
  samples = propagate_blind(g, pae, samples, gx_null, horizon);
  Var<T> mean_image = nn::group_mean_rows(decode(g, pae, pae_cfg, samples), n);
  Var<T> target = decode(g, pae, pae_cfg, propagate_blind(g, pae, bs, gx_null, horizon));
  return nn::scale(nn::sse(mean_image, target), T{1} / static_cast<T>(N));
}

/// L_Av for a batch of N beliefs with n samples each. `noises` is [N*n, Z]
/// with the samples of belief i in rows [i*n, (i+1)*n). Returns the mean
/// over beliefs of the summed squared pixel difference between the decoded
/// T-step-propagated belief and the mean decoded T-step-propagated sample.
template <class T, class SStore, class PStore>
Var<T> averager_loss(Graph<T>& g, SStore& sampler, PStore& pae, const PaeConfig& pae_cfg, Var<T> bs, Var<T> noises,
                     std::size_t n, std::size_t horizon, const Tensor<T>& gx_null) {
  if (n < 1) throw std::invalid_argument("averager_loss: need at least one sample");
  const std::size_t N = bs.value().dim(0);
  if (noises.value().dim(0) != N * n) throw nn::ShapeError("averager_loss: noises must have N*n rows");
  Var<T> samples = sample_state(g, sampler, nn::repeat_rows(bs, n), noises);
  return averager_term(g, pae, pae_cfg, bs, samples, n, horizon, gx_null);
}

struct SamplerLossWeights {
  double lambda_g = 1.0;
  double lambda_av = 500.0;
};

inline double sampler_loss(double l_g, double l_av, const SamplerLossWeights& w) {
  return w.lambda_g * l_g + w.lambda_av * l_av;
}

template <class T>
Var<T> sampler_loss(Var<T> l_g, Var<T> l_av, const SamplerLossWeights& w) {
  return nn::add(nn::scale(l_g, static_cast<T>(w.lambda_g)), nn::scale(l_av, static_cast<T>(w.lambda_av)));
}

// ---------------------------------------------------------------------------
// Inference helpers

template <class T>
Tensor<T> sample_states(const Sampler<T>& s, const Tensor<T>& bs, const Tensor<T>& noise) {
  Graph<T> g;
  return sample_state(g, s.params, g.constant(bs), g.constant(noise)).value();
}

template <class T>
Tensor<T> standard_noise(Rng& rng, std::size_t rows, std::size_t dim) {
  Tensor<T> z({rows, dim});
  for (auto& v : z.values()) v = static_cast<T>(rng.normal());
  return z;
}

template <class T>
Tensor<T> discriminator_probability(const Discriminator<T>& d, const Tensor<T>& images) {
  Graph<T> g;
  return discriminate(g, d.params, d.cfg, g.constant(images)).value();
}

/// Mean of n decoded samples of belief bs [H] or [1,H], each propagated
/// `horizon` blind steps, clamped to [0,1]. Returns [S*S].
template <class T>
Tensor<T> expected_obs_via_samples(const Tensor<T>& bs, std::size_t n, std::size_t horizon, const Sampler<T>& s,
                                   const Pae<T>& pae, Rng& rng) {
  if (n < 1) throw std::invalid_argument("expected_obs_via_samples: n must be >= 1");
  const std::size_t H = pae.cfg.hidden_dim;
  if (bs.size() != H) throw nn::ShapeError("expected_obs_via_samples: belief must have " + std::to_string(H) + " entries");
  Tensor<T> rows({n, H});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(bs.data(), H, rows.data() + i * H);
  Tensor<T> samples = sample_states(s, rows, standard_noise<T>(rng, n, s.cfg.noise_dim));
  const Tensor<T> gx_null = null_projection(pae);
  for (std::size_t t = 0; t < horizon; ++t) samples = propagate_blind(pae, samples, gx_null);
  const Tensor<T> images = decode(pae, samples);
  const std::size_t px = pae.cfg.pixels();
  Tensor<T> mean({px});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < px; ++p) mean[p] += images[i * px + p] / static_cast<T>(n);
  for (auto& v : mean.values()) v = std::clamp(v, T{0}, T{1});
  return mean;
}

}  // namespace paegan::model
