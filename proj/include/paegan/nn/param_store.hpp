#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "paegan/nn/tensor.hpp"

namespace paegan::nn {

/// One trainable tensor together with its gradient and Adam moments.
template <class T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;
  Tensor<T> v;
  std::uint64_t step = 0;

  explicit Parameter(Tensor<T> init)
      : value(std::move(init)), grad(value.shape()), m(value.shape()), v(value.shape()) {}
};

/// Named collection of parameters. Iteration order is the lexicographic key
/// order, which fixes the layout of checkpoints and every reduction over
/// parameters.
template <class T>
class ParamStore {
 public:
  using map_type = std::map<std::string, Parameter<T>>;

  Parameter<T>& add(const std::string& key, Tensor<T> value) {
    auto [it, inserted] = params_.try_emplace(key, std::move(value));
    if (!inserted) throw std::invalid_argument("duplicate parameter key '" + key + "'");
    return it->second;
  }

  bool contains(const std::string& key) const { return params_.count(key) != 0; }

  Parameter<T>& at(const std::string& key) {
    auto it = params_.find(key);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + key + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + key + "'");
    return it->second;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.fill(T{0});
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  map_type params_;
};

}  // namespace paegan::nn
