#pragma once

// Predictive autoencoder: convolutional encoder, GRU belief update and
// deconvolutional decoder. Graph builders take the ParamStore either by
// mutable reference (trainable) or const reference (frozen).

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "paegan/nn/graph.hpp"
#include "paegan/nn/init.hpp"
#include "paegan/nn/param_store.hpp"
#include "paegan/rng.hpp"

namespace paegan::model {

using nn::Graph;
using nn::ParamStore;
using nn::Shape;
using nn::Tensor;
using nn::Var;

struct PaeConfig {
  int image_size = 28;
  int enc_channels1 = 16;
  int enc_channels2 = 32;
  int enc_channels3 = 64;
  int feature_dim = 128;
  int hidden_dim = 256;
  // Initial bias of the output logits. Frames are mostly black; starting
  // near the mean intensity keeps the decoder off the all-black plateau.
  double output_bias = -4.0;

  int bottleneck() const { return image_size / 4; }
  std::size_t pixels() const { return static_cast<std::size_t>(image_size) * static_cast<std::size_t>(image_size); }

  void validate() const {
    if (image_size < 4 || image_size % 4 != 0) throw std::invalid_argument("pae config: image_size must be a multiple of 4");
    if (enc_channels1 < 1 || enc_channels2 < 1 || enc_channels3 < 1 || feature_dim < 1 || hidden_dim < 1) {
      throw std::invalid_argument("pae config: layer sizes must be positive");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PaeConfig, image_size, enc_channels1, enc_channels2, enc_channels3,
                                                feature_dim, hidden_dim, output_bias)

template <class T>
struct Pae {
  PaeConfig cfg;
  ParamStore<T> params;
};

/// Fresh model with uniform +-sqrt(1/fan_in) weights and biases, except the
/// output bias.
template <class T>
Pae<T> make_pae(const PaeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Pae<T> m{cfg, {}};
  Rng rng(seed, {0x9ae});
  auto& P = m.params;
  const std::size_t c1 = cfg.enc_channels1, c2 = cfg.enc_channels2, c3 = cfg.enc_channels3;
  const std::size_t F = cfg.feature_dim, H = cfg.hidden_dim, B = cfg.bottleneck();
  const std::size_t flat = c3 * B * B;
  auto conv = [&](const std::string& k, std::size_t cin, std::size_t cout, std::size_t K) {
    const double fan = static_cast<double>(cin * K * K);
    nn::add_uniform(P, k + ".w", {cout, cin, K, K}, fan, rng);
    nn::add_uniform(P, k + ".b", {cout}, fan, rng);
  };
  // Transposed conv: each output pixel sees cin*K*K/stride^2 inputs.
  auto deconv = [&](const std::string& k, std::size_t cin, std::size_t cout, std::size_t K, std::size_t s) {
    const double fan = static_cast<double>(cin * K * K) / static_cast<double>(s * s);
    nn::add_uniform(P, k + ".w", {cin, cout, K, K}, fan, rng);
    nn::add_uniform(P, k + ".b", {cout}, fan, rng);
  };
  auto fc = [&](const std::string& k, std::size_t in, std::size_t out) {
    nn::add_uniform(P, k + ".w", {out, in}, static_cast<double>(in), rng);
    nn::add_uniform(P, k + ".b", {out}, static_cast<double>(in), rng);
  };
  conv("pae.enc.conv1", 1, c1, 4);
  conv("pae.enc.conv2", c1, c2, 4);
  conv("pae.enc.conv3", c2, c3, 3);
  fc("pae.enc.fc", flat, F);
  fc("pae.gru.input", F, 3 * H);
  nn::add_uniform(P, "pae.gru.u", {3 * H, H}, static_cast<double>(H), rng);
  fc("pae.dec.fc", H, flat);
  deconv("pae.dec.deconv1", c3, c2, 3, 1);
  deconv("pae.dec.deconv2", c2, c1, 4, 2);
  deconv("pae.dec.deconv3", c1, 1, 4, 2);
  P.at("pae.dec.deconv3.b").value.fill(static_cast<T>(cfg.output_bias));
  return m;
}

/// Images [N,1,S,S] (or [N,S*S]) -> features [N,F].
template <class T, class Store>
Var<T> encode(Graph<T>& g, Store& P, const PaeConfig& cfg, Var<T> images) {
  const std::size_t N = images.value().dim(0), S = cfg.image_size;
  if (images.value().size() != N * S * S) throw nn::ShapeError("encode: expected " + std::to_string(S) + "x" + std::to_string(S) + " images");
  Var<T> x = nn::reshape(images, {N, 1, S, S});
  auto p = [&](const char* k) { return g.parameter(P, k); };
  x = nn::relu(nn::conv2d(x, p("pae.enc.conv1.w"), p("pae.enc.conv1.b"), 2, 1));
  x = nn::relu(nn::conv2d(x, p("pae.enc.conv2.w"), p("pae.enc.conv2.b"), 2, 1));
  x = nn::relu(nn::conv2d(x, p("pae.enc.conv3.w"), p("pae.enc.conv3.b"), 1, 1));
  x = nn::reshape(x, {N, x.value().size() / N});
  return nn::linear(x, p("pae.enc.fc.w"), p("pae.enc.fc.b"));
}

/// GRU input projection x W^T + b, [N,F] -> [N,3H].
template <class T, class Store>
Var<T> input_projection(Graph<T>& g, Store& P, Var<T> features) {
  return nn::linear(features, g.parameter(P, "pae.gru.input.w"), g.parameter(P, "pae.gru.input.b"));
}

template <class T, class Store>
Var<T> gru(Graph<T>& g, Store& P, Var<T> gx, Var<T> h) {
  return nn::gru_step(gx, h, g.parameter(P, "pae.gru.u"));
}

/// Beliefs [N,H] -> images [N,1,S,S] in [0,1].
template <class T, class Store>
Var<T> decode(Graph<T>& g, Store& P, const PaeConfig& cfg, Var<T> h) {
  const std::size_t N = h.value().dim(0), B = cfg.bottleneck();
  auto p = [&](const char* k) { return g.parameter(P, k); };
  Var<T> x = nn::relu(nn::linear(h, p("pae.dec.fc.w"), p("pae.dec.fc.b")));
  x = nn::reshape(x, {N, static_cast<std::size_t>(cfg.enc_channels3), B, B});
  x = nn::relu(nn::deconv2d(x, p("pae.dec.deconv1.w"), p("pae.dec.deconv1.b"), 1, 1));
  x = nn::relu(nn::deconv2d(x, p("pae.dec.deconv2.w"), p("pae.dec.deconv2.b"), 2, 1));
  return nn::sigmoid(nn::deconv2d(x, p("pae.dec.deconv3.w"), p("pae.dec.deconv3.b"), 2, 1));
}

/// One belief update per row: bs' = GRU(Enc(o), bs).
template <class T, class Store>
Var<T> propagate(Graph<T>& g, Store& P, const PaeConfig& cfg, Var<T> h, Var<T> images) {
  return gru(g, P, input_projection(g, P, encode(g, P, cfg, images)), h);
}

/// Summed squared prediction error over a time-major batch. `frames` holds T*B images with row index
/// t*B + b; `masked[t*B + b]` replaces that input by the null observation.
/// Targets are always the true frames. Returns the summed squared error
/// divided by B.
template <class T, class Store>
Var<T> pae_loss(Graph<T>& g, Store& P, const PaeConfig& cfg, const Tensor<T>& frames, const std::vector<bool>& masked,
                std::size_t batch) {
  const std::size_t px = cfg.pixels();
  if (batch == 0 || frames.size() % (batch * px) != 0) throw nn::ShapeError("pae_loss: frames not a whole T x B batch");
  const std::size_t rows = frames.size() / px, steps = rows / batch, H = cfg.hidden_dim;
  if (masked.size() != rows) throw std::invalid_argument("pae_loss: mask length does not match the sequence");
  Tensor<T> inputs({rows, px});
  for (std::size_t r = 0; r < rows; ++r)
    if (!masked[r]) std::copy_n(frames.data() + r * px, px, inputs.data() + r * px);
  Var<T> gx = input_projection(g, P, encode(g, P, cfg, g.constant(std::move(inputs))));
  Var<T> h = g.constant(Tensor<T>({batch, H}));
  std::vector<Var<T>> beliefs;
  beliefs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    h = gru(g, P, nn::slice_rows(gx, t * batch, batch), h);
    beliefs.push_back(h);
  }
  Var<T> pred = decode(g, P, cfg, nn::concat_rows(beliefs));
  Var<T> target = g.constant(frames.reshaped({rows, 1, static_cast<std::size_t>(cfg.image_size),
                                              static_cast<std::size_t>(cfg.image_size)}));
  return nn::scale(nn::sse(pred, target), T{1} / static_cast<T>(batch));
}

// ---------------------------------------------------------------------------
// Gradient-free inference on fixed parameters

template <class T>
Tensor<T> zero_belief(const Pae<T>& m, std::size_t n = 1) {
  return Tensor<T>({n, static_cast<std::size_t>(m.cfg.hidden_dim)});
}

/// h [N,H], images [N,S*S] (rows may be null observations) -> h' [N,H].
template <class T>
Tensor<T> propagate(const Pae<T>& m, const Tensor<T>& h, const Tensor<T>& images) {
  Graph<T> g;
  return propagate(g, m.params, m.cfg, g.constant(h), g.constant(images)).value();
}

/// Input projection of the all-zero image, [3H]. A blind step is a GRU step
/// driven by this constant.
template <class T>
Tensor<T> null_projection(const Pae<T>& m) {
  Graph<T> g;
  Tensor<T> zero({1, m.cfg.pixels()});
  const Tensor<T> gx = input_projection(g, m.params, encode(g, m.params, m.cfg, g.constant(zero))).value();
  return gx.reshaped({gx.size()});
}

template <class T>
Tensor<T> propagate_blind(const Pae<T>& m, const Tensor<T>& h, const Tensor<T>& gx_null) {
  const std::size_t N = h.dim(0), G = gx_null.size();
  Tensor<T> gx({N, G});
  for (std::size_t n = 0; n < N; ++n) std::copy_n(gx_null.data(), G, gx.data() + n * G);
  return nn::kernels::gru_step_forward<T>(gx, h, m.params.at("pae.gru.u").value, nullptr);
}

/// h [N,H] -> images [N,S*S].
template <class T>
Tensor<T> decode(const Pae<T>& m, const Tensor<T>& h) {
  Graph<T> g;
  const Tensor<T> y = decode(g, m.params, m.cfg, g.constant(h)).value();
  return y.reshaped({h.dim(0), m.cfg.pixels()});
}

/// images [N,S*S] -> encoder features [N,F].
template <class T>
Tensor<T> encode_features(const Pae<T>& m, const Tensor<T>& images) {
  Graph<T> g;
  return encode(g, m.params, m.cfg, g.constant(images)).value();
}

/// Scalar prediction loss for one episode, by direct recursion on fixed
/// parameters. `frames` is [T, S*S].
template <class T>
double pae_loss_value(const Pae<T>& m, const Tensor<T>& frames, const std::vector<bool>& masked) {
  Graph<T> g;
  return static_cast<double>(pae_loss(g, m.params, m.cfg, frames, masked, 1).value()[0]);
}

}  // namespace paegan::model
