#pragma once

// Reverse-mode differentiation over whole-tensor operations. A Graph records
// every operation applied to its variables; backward() walks the record in
// reverse and accumulates gradients, writing parameter gradients straight
// into the owning ParamStore.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "paegan/nn/kernels.hpp"
#include "paegan/nn/param_store.hpp"
#include "paegan/nn/tensor.hpp"

namespace paegan::nn {

template <class T>
class Graph;

/// Handle to a value recorded on a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false); }

  /// Trainable parameter: gradients accumulate into the store.
  Var<T> parameter(ParamStore<T>& store, const std::string& key) {
    Parameter<T>& p = store.at(key);
    Node n;
    n.ref = &p.value;
    n.param_grad = &p.grad;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Frozen parameter: read-only, receives no gradient.
  Var<T> parameter(const ParamStore<T>& store, const std::string& key) {
    Node n;
    n.ref = &store.at(key).value;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, allocated on first use.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.param_grad) return *n.param_grad;
    if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.param_grad != nullptr || !n.grad.empty();
  }

  /// Records the result of an operation whose inputs are `inputs`.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || requires_grad(v.id);
    Var<T> out = push(std::move(value), needs);
    if (needs) nodes_.back().backward = std::move(fn);
    return out;
  }
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || requires_grad(v.id);
    Var<T> out = push(std::move(value), needs);
    if (needs) nodes_.back().backward = std::move(fn);
    return out;
  }

  /// Back-propagates from a scalar. A graph can be differentiated once.
  void backward(Var<T> loss) {
    if (backward_done_) throw std::logic_error("backward already called on this graph; reset it first");
    if (value(loss.id).size() != 1) throw ShapeError("backward requires a scalar loss");
    backward_done_ = true;
    if (!requires_grad(loss.id)) return;
    grad(loss.id)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || !has_grad(i)) continue;
      n.backward(*this, i);
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    Tensor<T>* param_grad = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // deque: references stay valid as the graph grows
  bool backward_done_ = false;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

namespace detail {
template <class T>
Tensor<T>* grad_if(Graph<T>& g, const Var<T>& v) {
  return g.requires_grad(v.id) ? &g.grad(v.id) : nullptr;
}

template <class T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (a.graph != b.graph) throw std::invalid_argument("variables belong to different graphs");
  return *a.graph;
}

// Accepts [C,H,W] as a batch of one.
template <class T>
Tensor<T> as_batch(const Tensor<T>& t) {
  if (t.rank() == 3) return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
  return t;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Layers

namespace detail {
// Runs `fn(batched_input, batched_grad)` with rank-3 tensors viewed as a
// batch of one.
template <class T, class F>
void with_batched(const Tensor<T>& x, const Tensor<T>& dy, F fn) {
  if (x.rank() == 3) {
    fn(as_batch(x), as_batch(dy));
  } else {
    fn(x, dy);
  }
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}
}  // namespace detail

/// Cross-correlation layer. Accepts [N,C,H,W] or a single [C,H,W] image.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t padding) {
  Graph<T>& g = *x.graph;
  const bool unbatched = x.value().rank() == 3;
  Tensor<T> y = unbatched ? kernels::conv2d_forward(detail::as_batch(x.value()), w.value(), b.value(), stride, padding)
                          : kernels::conv2d_forward(x.value(), w.value(), b.value(), stride, padding);
  if (unbatched) y = y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
  return g.record(std::move(y), {x, w, b}, [x, w, b, stride, padding](Graph<T>& gr, std::size_t self) {
    detail::with_batched(x.value(), gr.grad(self), [&](const Tensor<T>& xb, const Tensor<T>& dy) {
      Tensor<T> dx;
      if (gr.requires_grad(x.id)) dx = Tensor<T>(xb.shape());
      kernels::conv2d_backward(xb, w.value(), dy, stride, padding, dx.empty() ? nullptr : &dx,
                               detail::grad_if(gr, w), detail::grad_if(gr, b));
      if (!dx.empty()) detail::add_into(gr.grad(x.id), dx);
    });
  });
}

/// Transposed convolution layer, weights [Cin,Cout,K,K].
template <class T>
Var<T> deconv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t padding) {
  Graph<T>& g = *x.graph;
  const bool unbatched = x.value().rank() == 3;
  Tensor<T> y = unbatched
                    ? kernels::deconv2d_forward(detail::as_batch(x.value()), w.value(), b.value(), stride, padding)
                    : kernels::deconv2d_forward(x.value(), w.value(), b.value(), stride, padding);
  if (unbatched) y = y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
  return g.record(std::move(y), {x, w, b}, [x, w, b, stride, padding](Graph<T>& gr, std::size_t self) {
    detail::with_batched(x.value(), gr.grad(self), [&](const Tensor<T>& xb, const Tensor<T>& dy) {
      Tensor<T> dx;
      if (gr.requires_grad(x.id)) dx = Tensor<T>(xb.shape());
      kernels::deconv2d_backward(xb, w.value(), dy, stride, padding, dx.empty() ? nullptr : &dx,
                                 detail::grad_if(gr, w), detail::grad_if(gr, b));
      if (!dx.empty()) detail::add_into(gr.grad(x.id), dx);
    });
  });
}

/// Fully connected layer; a rank-1 input is treated as a single row.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Graph<T>& g = *x.graph;
  const bool vec = x.value().rank() == 1;
  const Tensor<T> xm = vec ? x.value().reshaped({1, x.value().size()}) : x.value();
  Tensor<T> y = kernels::linear_forward(xm, w.value(), b.value());
  if (vec) y = y.reshaped({y.size()});
  return g.record(std::move(y), {x, w, b}, [x, w, b, vec](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& xv = x.value();
    const Tensor<T> xm2 = vec ? xv.reshaped({1, xv.size()}) : xv;
    const Tensor<T>& dyr = gr.grad(self);
    const Tensor<T> dy = vec ? dyr.reshaped({1, dyr.size()}) : dyr;
    Tensor<T>* dx = detail::grad_if(gr, x);
    Tensor<T> dxm;
    if (dx) dxm = Tensor<T>(xm2.shape());
    kernels::linear_backward(xm2, w.value(), dy, dx ? &dxm : nullptr, detail::grad_if(gr, w), detail::grad_if(gr, b));
    if (dx)
      for (std::size_t i = 0; i < dxm.size(); ++i) (*dx)[i] += dxm[i];
  });
}

/// One GRU step; gx is the input projection [B,3H], h the state [B,H].
template <class T>
Var<T> gru_step(Var<T> gx, Var<T> h, Var<T> u) {
  Graph<T>& g = *h.graph;
  auto cache = std::make_shared<kernels::GruCache<T>>();
  Tensor<T> out = kernels::gru_step_forward(gx.value(), h.value(), u.value(), cache.get());
  return g.record(std::move(out), {gx, h, u}, [gx, h, u, cache](Graph<T>& gr, std::size_t self) {
    kernels::gru_step_backward(h.value(), u.value(), *cache, gr.grad(self), detail::grad_if(gr, gx),
                               detail::grad_if(gr, h), detail::grad_if(gr, u));
  });
}

template <class T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  Graph<T>& g = *x.graph;
  auto cache = std::make_shared<kernels::BatchNormCache<T>>();
  Tensor<T> y = kernels::batchnorm_forward(x.value(), gamma.value(), beta.value(), eps, cache.get());
  return g.record(std::move(y), {x, gamma, beta}, [x, gamma, beta, cache](Graph<T>& gr, std::size_t self) {
    kernels::batchnorm_backward(gamma.value(), *cache, gr.grad(self), detail::grad_if(gr, x),
                                detail::grad_if(gr, gamma), detail::grad_if(gr, beta));
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {
// f maps x -> y; df maps (x, y) -> dy/dx.
template <class T, class F, class DF>
Var<T> unary(Var<T> x, F f, DF df) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return g.record(std::move(y), {x}, [x, df](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& xv2 = x.value();
    const Tensor<T>& yv = gr.value(self);
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad(x.id);
    for (std::size_t i = 0; i < xv2.size(); ++i) dx[i] += dy[i] * df(xv2[i], yv[i]);
  });
}
}  // namespace detail

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> leaky_relu(Var<T> x, T slope) {
  return detail::unary(
      x, [slope](T v) { return v > T{0} ? v : slope * v; }, [slope](T v, T) { return v > T{0} ? T{1} : slope; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary(
      x, [](T v) { return kernels::sigmoid(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  return detail::unary(
      x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> y(a.value().shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    for (const Var<T>& v : {a, b}) {
      if (!gr.requires_grad(v.id)) continue;
      Tensor<T>& d = gr.grad(v.id);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add(a, scale(b, T{-1}));
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> y(a.value().shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    if (gr.requires_grad(a.id)) {
      Tensor<T>& d = gr.grad(a.id);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * b.value()[i];
    }
    if (gr.requires_grad(b.id)) {
      Tensor<T>& d = gr.grad(b.id);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * a.value()[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Graph<T>& g = *x.graph;
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return g.record(std::move(y), {x}, [x](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

/// Rows [begin, begin + count) along the leading dimension.
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  Graph<T>& g = *x.graph;
  Tensor<T> y = x.value().rows(begin, count);
  const std::size_t offset = begin * (x.value().size() / x.value().dim(0));
  return g.record(std::move(y), {x}, [x, offset](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[offset + i] += dy[i];
  });
}

/// Stacks tensors of identical trailing shape along the leading dimension.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Graph<T>& g = *parts.front().graph;
  Shape s = parts.front().value().shape();
  std::size_t rows = 0;
  AlignedVector<T> data;
  for (const auto& p : parts) {
    const Shape& ps = p.value().shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1)) {
      throw ShapeError("concat_rows: trailing shapes differ");
    }
    rows += ps[0];
    data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  }
  s[0] = rows;
  return g.record(Tensor<T>(s, std::move(data), 0), parts, [parts](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.value().size();
      if (gr.requires_grad(p.id)) {
        Tensor<T>& dx = gr.grad(p.id);
        for (std::size_t i = 0; i < n; ++i) dx[i] += dy[offset + i];
      }
      offset += n;
    }
  });
}

/// [N,A] and [N,B] -> [N,A+B].
template <class T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) throw ShapeError("concat_cols: need [N,A] and [N,B]");
  const std::size_t N = av.dim(0), A = av.dim(1), B = bv.dim(1);
  Tensor<T> y({N, A + B});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.data() + n * A, A, y.data() + n * (A + B));
    std::copy_n(bv.data() + n * B, B, y.data() + n * (A + B) + A);
  }
  return g.record(std::move(y), {a, b}, [a, b, N, A, B](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    if (gr.requires_grad(a.id)) {
      Tensor<T>& d = gr.grad(a.id);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < A; ++i) d[n * A + i] += dy[n * (A + B) + i];
    }
    if (gr.requires_grad(b.id)) {
      Tensor<T>& d = gr.grad(b.id);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < B; ++i) d[n * B + i] += dy[n * (A + B) + A + i];
    }
  });
}

/// Each row repeated `times` times consecutively: [N,...] -> [N*times,...].
template <class T>
Var<T> repeat_rows(Var<T> x, std::size_t times) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  const std::size_t N = xv.dim(0), row = xv.size() / N;
  Shape s = xv.shape();
  s[0] = N * times;
  Tensor<T> y(s);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < times; ++k) std::copy_n(xv.data() + n * row, row, y.data() + (n * times + k) * row);
  return g.record(std::move(y), {x}, [x, N, row, times](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad(x.id);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t i = 0; i < row; ++i) dx[n * row + i] += dy[(n * times + k) * row + i];
  });
}

/// Mean over consecutive groups of `group` rows: [N*group,...] -> [N,...].
template <class T>
Var<T> group_mean_rows(Var<T> x, std::size_t group) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  if (group == 0 || xv.dim(0) % group != 0) throw ShapeError("group_mean_rows: rows not divisible by group");
  const std::size_t N = xv.dim(0) / group, row = xv.size() / xv.dim(0);
  Shape s = xv.shape();
  s[0] = N;
  Tensor<T> y(s);
  const T inv = T{1} / static_cast<T>(group);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < group; ++k)
      for (std::size_t i = 0; i < row; ++i) y[n * row + i] += xv[(n * group + k) * row + i] * inv;
  return g.record(std::move(y), {x}, [x, N, row, group, inv](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad(x.id);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < group; ++k)
        for (std::size_t i = 0; i < row; ++i) dx[(n * group + k) * row + i] += dy[n * row + i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses (all return shape [1])

template <class T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = *x.graph;
  T s{0};
  for (auto v : x.value().values()) s += v;
  return g.record(Tensor<T>({1}, std::vector<T>{s}), {x}, [x](Graph<T>& gr, std::size_t self) {
    const T d = gr.grad(self)[0];
    Tensor<T>& dx = gr.grad(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
  });
}

/// Sum of squared differences.
template <class T>
Var<T> sse(Var<T> pred, Var<T> target) {
  Graph<T>& g = detail::same_graph(pred, target);
  require_same_shape(pred.value(), target.value(), "sse");
  T s{0};
  for (std::size_t i = 0; i < pred.value().size(); ++i) {
    const T d = pred.value()[i] - target.value()[i];
    s += d * d;
  }
  return g.record(Tensor<T>({1}, std::vector<T>{s}), {pred, target}, [pred, target](Graph<T>& gr, std::size_t self) {
    const T d = gr.grad(self)[0];
    const Tensor<T>& p = pred.value();
    const Tensor<T>& t = target.value();
    if (gr.requires_grad(pred.id)) {
      Tensor<T>& dp = gr.grad(pred.id);
      for (std::size_t i = 0; i < p.size(); ++i) dp[i] += T{2} * d * (p[i] - t[i]);
    }
    if (gr.requires_grad(target.id)) {
      Tensor<T>& dt = gr.grad(target.id);
      for (std::size_t i = 0; i < p.size(); ++i) dt[i] -= T{2} * d * (p[i] - t[i]);
    }
  });
}

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy of probabilities against a constant label.
/// Probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is the BCE
/// derivative evaluated at the clamped probability.
template <class T>
Var<T> bce(Var<T> p, T label) {
  Graph<T>& g = *p.graph;
  const Tensor<T>& pv = p.value();
  const T lo = static_cast<T>(kBceClamp), hi = T{1} - static_cast<T>(kBceClamp);
  T s{0};
  for (auto v : pv.values()) {
    const T c = std::clamp(v, lo, hi);
    s -= label * std::log(c) + (T{1} - label) * std::log(T{1} - c);
  }
  const T n = static_cast<T>(pv.size());
  return g.record(Tensor<T>({1}, std::vector<T>{s / n}), {p}, [p, label, lo, hi, n](Graph<T>& gr, std::size_t self) {
    const T d = gr.grad(self)[0] / n;
    const Tensor<T>& pv2 = p.value();
    Tensor<T>& dp = gr.grad(p.id);
    for (std::size_t i = 0; i < pv2.size(); ++i) {
      const T c = std::clamp(pv2[i], lo, hi);
      dp[i] += d * (-label / c + (T{1} - label) / (T{1} - c));
    }
  });
}

}  // namespace paegan::nn
