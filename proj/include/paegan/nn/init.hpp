#pragma once

#include <cmath>
#include <string>

#include "paegan/nn/param_store.hpp"
#include "paegan/rng.hpp"

namespace paegan::nn {

/// Adds a parameter drawn uniformly from ±sqrt(1/fan_in).
template <class T>
Parameter<T>& add_uniform(ParamStore<T>& store, const std::string& key, Shape shape, double fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / fan_in);
  Tensor<T> t(std::move(shape));
  for (auto& x : t.values()) x = static_cast<T>(rng.uniform(-bound, bound));
  return store.add(key, std::move(t));
}

}  // namespace paegan::nn
