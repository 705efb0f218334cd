#pragma once

// Gradient-free entry points for the layer set, for inference and tests.

#include <algorithm>
#include <cmath>

#include "paegan/nn/graph.hpp"
#include "paegan/nn/kernels.hpp"
#include "paegan/nn/tensor.hpp"

namespace paegan::nn {

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                         std::size_t padding) {
  if (x.rank() == 3) {
    Tensor<T> y = kernels::conv2d_forward(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}), w, b, stride, padding);
    return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
  }
  return kernels::conv2d_forward(x, w, b, stride, padding);
}

template <class T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                           std::size_t padding) {
  if (x.rank() == 3) {
    Tensor<T> y = kernels::deconv2d_forward(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}), w, b, stride, padding);
    return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
  }
  return kernels::deconv2d_forward(x, w, b, stride, padding);
}

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() == 1) {
    Tensor<T> y = kernels::linear_forward(x.reshaped({1, x.size()}), w, b);
    return y.reshaped({y.size()});
  }
  return kernels::linear_forward(x, w, b);
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> y(x.shape());
  std::transform(x.values().begin(), x.values().end(), y.values().begin(), f);
  return y;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return map(x, [](T v) { return std::max(v, T{0}); });
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map(x, [](T v) { return kernels::sigmoid(v); });
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return map(x, [](T v) { return std::tanh(v); });
}

/// Weights of a GRU cell: input projection w [3H,D], bias b [3H] and
/// recurrent weights u [3H,H], each stacked as (update, reset, candidate).
template <class T>
struct GruParams {
  Tensor<T> w, b, u;
};

/// h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h) for a single
/// vector x:[D], h:[H] or a batch x:[B,D], h:[B,H].
template <class T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h, const GruParams<T>& p) {
  const bool vec = h.rank() == 1;
  if (vec != (x.rank() == 1)) throw ShapeError("gru_cell: x and h must both be vectors or both batches");
  const Tensor<T> xb = vec ? x.reshaped({1, x.size()}) : x;
  const Tensor<T> hb = vec ? h.reshaped({1, h.size()}) : h;
  if (xb.dim(0) != hb.dim(0)) throw ShapeError("gru_cell: batch sizes differ");
  if (p.w.rank() != 2 || p.w.dim(0) != 3 * hb.dim(1) || p.w.dim(1) != xb.dim(1)) {
    throw ShapeError("gru_cell: input weights " + to_string(p.w.shape()) + " do not match x " + to_string(x.shape()) +
                     " and h " + to_string(h.shape()));
  }
  Tensor<T> gx = kernels::linear_forward(xb, p.w, p.b);
  Tensor<T> out = kernels::gru_step_forward<T>(gx, hb, p.u, nullptr);
  return vec ? out.reshaped({out.size()}) : out;
}

/// Sum of squared errors.
template <class T>
double mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred, target, "mse_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    s += d * d;
  }
  return s;
}

/// Binary cross-entropy of a probability against a 0/1 label, with the
/// probability clamped to [1e-7, 1 - 1e-7].
inline double bce_loss(double p, double label) {
  const double c = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
  return -(label * std::log(c) + (1.0 - label) * std::log(1.0 - c));
}

}  // namespace paegan::nn
