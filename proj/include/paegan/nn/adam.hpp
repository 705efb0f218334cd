#pragma once

#include <cmath>
#include <stdexcept>

#include "paegan/nn/param_store.hpp"

namespace paegan::nn {

struct AdamConfig {
  double learning_rate = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adam: learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("adam: betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be positive");
  }
};

/// Bias-corrected Adam update of every parameter in the store; gradients are
/// zeroed afterwards.
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  cfg.validate();
  for (auto& [key, p] : store) {
    ++p.step;
    const double t = static_cast<double>(p.step);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T lr = static_cast<T>(cfg.learning_rate);
    const T eps = static_cast<T>(cfg.epsilon);
    T* w = p.value.data();
    T* g = p.grad.data();
    T* m = p.m.data();
    T* v = p.v.data();
    for (std::size_t i = 0, n = p.value.size(); i < n; ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const T mhat = m[i] * c1;
      const T vhat = v[i] * c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      g[i] = T{0};
    }
  }
}

}  // namespace paegan::nn
