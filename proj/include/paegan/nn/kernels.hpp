#pragma once

// Forward and backward kernels for the layer set. Images are [N, C, H, W]
// row-major; matrices are [rows, cols] row-major. Backward routines
// accumulate into whichever gradient outputs are non-null.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "paegan/nn/tensor.hpp"

namespace paegan::nn::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Geometry of a strided, zero-padded cross-correlation from an image of
/// `channels` x `height` x `width` to an output grid of out_h x out_w.
struct ConvGeom {
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t kernel = 1, stride = 1, padding = 0;
  std::size_t out_h = 0, out_w = 0;

  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t out_pixels() const { return out_h * out_w; }
  std::size_t image_size() const { return channels * height * width; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (in + 2 * padding < kernel) throw ShapeError("kernel larger than padded input");
  return (in + 2 * padding - kernel) / stride + 1;
}

inline std::size_t deconv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("stride must be positive");
  const std::size_t full = (in - 1) * stride + kernel;
  if (full <= 2 * padding) throw ShapeError("transposed convolution output would be empty");
  return full - 2 * padding;
}

inline ConvGeom make_geom(std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s, std::size_t p) {
  ConvGeom g{c, h, w, k, s, p, 0, 0};
  g.out_h = conv_out_size(h, k, s, p);
  g.out_w = conv_out_size(w, k, s, p);
  return g;
}

/// Writes the patches of one image into columns [offset, offset + out_pixels)
/// of a col_rows x ld row-major matrix.
template <class T>
void im2col(const T* img, const ConvGeom& g, T* col, std::size_t ld, std::size_t offset) {
  const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
  const auto S = static_cast<std::ptrdiff_t>(g.stride), P = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* dst = col + ((c * g.kernel + ki) * g.kernel + kj) * ld + offset;
        const T* src = img + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * S - P + static_cast<std::ptrdiff_t>(ki);
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= H) {
            std::fill(row, row + g.out_w, T{0});
            continue;
          }
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * S - P + static_cast<std::ptrdiff_t>(kj);
            row[ow] = (iw < 0 || iw >= W) ? T{0} : src[ih * W + iw];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds columns back into an image.
template <class T>
void col2im(const T* col, const ConvGeom& g, std::size_t ld, std::size_t offset, T* img) {
  const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
  const auto S = static_cast<std::ptrdiff_t>(g.stride), P = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* src = col + ((c * g.kernel + ki) * g.kernel + kj) * ld + offset;
        T* dst = img + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * S - P + static_cast<std::ptrdiff_t>(ki);
          if (ih < 0 || ih >= H) continue;
          const T* row = src + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * S - P + static_cast<std::ptrdiff_t>(kj);
            if (iw >= 0 && iw < W) dst[ih * W + iw] += row[ow];
          }
        }
      }
    }
  }
}

// Samples are processed in chunks so the column buffer stays near 256K entries.
inline std::size_t chunk_samples(std::size_t col_rows, std::size_t pixels, std::size_t n) {
  const std::size_t per = std::max<std::size_t>(1, col_rows * pixels);
  return std::clamp<std::size_t>((std::size_t{1} << 18) / per, 1, n);
}

// [nb, C, P] (sample-major) <-> [C, nb * P] (channel-major)
template <class T>
void to_channel_major(const T* src, std::size_t nb, std::size_t C, std::size_t P, T* dst) {
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t c = 0; c < C; ++c) std::copy_n(src + (n * C + c) * P, P, dst + c * nb * P + n * P);
}
template <class T>
void from_channel_major(const T* src, std::size_t nb, std::size_t C, std::size_t P, T* dst) {
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t c = 0; c < C; ++c) std::copy_n(src + c * nb * P + n * P, P, dst + (n * C + c) * P);
}

struct ConvShape {
  std::size_t batch, in_c, in_h, in_w, out_c, kernel, stride, padding, out_h, out_w;
};

/// Validates x:[N,Cin,H,W], w:[Cout,Cin,K,K], b:[Cout].
template <class T>
ConvShape conv_shape(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + to_string(x.shape()));
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) throw ShapeError("conv2d: weights must be [Cout,Cin,K,K]");
  if (w.dim(1) != x.dim(1)) throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                                             " do not match weights " + to_string(w.shape()));
  require_shape(b, Shape{w.dim(0)}, "conv2d bias");
  const std::size_t k = w.dim(2);
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), k, stride, padding,
          conv_out_size(x.dim(2), k, stride, padding), conv_out_size(x.dim(3), k, stride, padding)};
}

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                         std::size_t padding) {
  const auto s = conv_shape(x, w, b, stride, padding);
  const ConvGeom g{s.in_c, s.in_h, s.in_w, s.kernel, stride, padding, s.out_h, s.out_w};
  const std::size_t P = g.out_pixels(), R = g.col_rows();
  Tensor<T> y({s.batch, s.out_c, s.out_h, s.out_w});
  const std::size_t chunk = chunk_samples(R, P, s.batch);
  AlignedVector<T> col(R * chunk * P), out(s.out_c * chunk * P);
  ConstMatMap<T> W(w.data(), static_cast<Eigen::Index>(s.out_c), static_cast<Eigen::Index>(R));
  for (std::size_t n0 = 0; n0 < s.batch; n0 += chunk) {
    const std::size_t nb = std::min(chunk, s.batch - n0);
    const std::size_t ld = nb * P;
    for (std::size_t j = 0; j < nb; ++j) im2col(x.data() + (n0 + j) * g.image_size(), g, col.data(), ld, j * P);
    ConstMatMap<T> C(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld));
    MatMap<T> O(out.data(), static_cast<Eigen::Index>(s.out_c), static_cast<Eigen::Index>(ld));
    O.noalias() = W * C;
    for (std::size_t co = 0; co < s.out_c; ++co) O.row(static_cast<Eigen::Index>(co)).array() += b[co];
    from_channel_major(out.data(), nb, s.out_c, P, y.data() + n0 * s.out_c * P);
  }
  return y;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, std::size_t stride,
                     std::size_t padding, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const ConvGeom g = make_geom(x.dim(1), x.dim(2), x.dim(3), k, stride, padding);
  const std::size_t N = x.dim(0), P = g.out_pixels(), R = g.col_rows();
  require_shape(dy, Shape{N, cout, g.out_h, g.out_w}, "conv2d backward");
  const std::size_t chunk = chunk_samples(R, P, N);
  AlignedVector<T> col(R * chunk * P), dout(cout * chunk * P);
  ConstMatMap<T> W(w.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(R));
  for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
    const std::size_t nb = std::min(chunk, N - n0);
    const std::size_t ld = nb * P;
    to_channel_major(dy.data() + n0 * cout * P, nb, cout, P, dout.data());
    ConstMatMap<T> DO(dout.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ld));
    if (db) {
      for (std::size_t co = 0; co < cout; ++co) (*db)[co] += DO.row(static_cast<Eigen::Index>(co)).sum();
    }
    if (dw) {
      for (std::size_t j = 0; j < nb; ++j) im2col(x.data() + (n0 + j) * g.image_size(), g, col.data(), ld, j * P);
      ConstMatMap<T> C(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld));
      MatMap<T> DW(dw->data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(R));
      DW.noalias() += DO * C.transpose();
    }
    if (dx) {
      MatMap<T> DC(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld));
      DC.noalias() = W.transpose() * DO;
      for (std::size_t j = 0; j < nb; ++j) col2im(col.data(), g, ld, j * P, dx->data() + (n0 + j) * g.image_size());
    }
  }
}

/// Transposed convolution, x:[N,Cin,H,W], w:[Cin,Cout,K,K], b:[Cout]. It is
/// the adjoint of conv2d with the same weights, plus a bias.
template <class T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                           std::size_t padding) {
  if (x.rank() != 4) throw ShapeError("deconv2d: input must be [N,C,H,W], got " + to_string(x.shape()));
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) throw ShapeError("deconv2d: weights must be [Cin,Cout,K,K]");
  if (w.dim(0) != x.dim(1)) throw ShapeError("deconv2d: input channels " + std::to_string(x.dim(1)) +
                                             " do not match weights " + to_string(w.shape()));
  const std::size_t N = x.dim(0), cin = x.dim(1), cout = w.dim(1), k = w.dim(2);
  require_shape(b, Shape{cout}, "deconv2d bias");
  const std::size_t oh = deconv_out_size(x.dim(2), k, stride, padding);
  const std::size_t ow = deconv_out_size(x.dim(3), k, stride, padding);
  const ConvGeom g = make_geom(cout, oh, ow, k, stride, padding);
  if (g.out_h != x.dim(2) || g.out_w != x.dim(3)) throw ShapeError("deconv2d: inconsistent geometry");
  const std::size_t P = g.out_pixels(), R = g.col_rows();
  Tensor<T> y({N, cout, oh, ow});
  const std::size_t chunk = chunk_samples(R, P, N);
  AlignedVector<T> xin(cin * chunk * P), col(R * chunk * P);
  ConstMatMap<T> W(w.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(R));
  for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
    const std::size_t nb = std::min(chunk, N - n0);
    const std::size_t ld = nb * P;
    to_channel_major(x.data() + n0 * cin * P, nb, cin, P, xin.data());
    ConstMatMap<T> X(xin.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(ld));
    MatMap<T> C(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld));
    C.noalias() = W.transpose() * X;
    for (std::size_t j = 0; j < nb; ++j) col2im(col.data(), g, ld, j * P, y.data() + (n0 + j) * g.image_size());
  }
  const std::size_t plane = oh * ow;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < cout; ++c) {
      T* p = y.data() + (n * cout + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
    }
  return y;
}

template <class T>
void deconv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, std::size_t stride,
                       std::size_t padding, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t N = x.dim(0), cin = x.dim(1), cout = w.dim(1), k = w.dim(2);
  const ConvGeom g = make_geom(cout, dy.dim(2), dy.dim(3), k, stride, padding);
  require_shape(dy, Shape{N, cout, g.height, g.width}, "deconv2d backward");
  const std::size_t P = g.out_pixels(), R = g.col_rows();
  const std::size_t plane = g.height * g.width;
  if (db) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < cout; ++c) {
        const T* p = dy.data() + (n * cout + c) * plane;
        T acc{0};
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        (*db)[c] += acc;
      }
  }
  if (!dx && !dw) return;
  const std::size_t chunk = chunk_samples(R, P, N);
  AlignedVector<T> col(R * chunk * P), xin(cin * chunk * P);
  ConstMatMap<T> W(w.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(R));
  for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
    const std::size_t nb = std::min(chunk, N - n0);
    const std::size_t ld = nb * P;
    for (std::size_t j = 0; j < nb; ++j) im2col(dy.data() + (n0 + j) * g.image_size(), g, col.data(), ld, j * P);
    ConstMatMap<T> C(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld));
    if (dw) {
      to_channel_major(x.data() + n0 * cin * P, nb, cin, P, xin.data());
      ConstMatMap<T> X(xin.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(ld));
      MatMap<T> DW(dw->data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(R));
      DW.noalias() += X * C.transpose();
    }
    if (dx) {
      MatMap<T> DX(xin.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(ld));
      DX.noalias() = W * C;
      AlignedVector<T> tmp(nb * cin * P);
      from_channel_major(xin.data(), nb, cin, P, tmp.data());
      T* out = dx->data() + n0 * cin * P;
      for (std::size_t i = 0; i < tmp.size(); ++i) out[i] += tmp[i];
    }
  }
}

/// y = x w^T + b with x:[N,D], w:[O,D], b:[O].
template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: incompatible shapes " + to_string(x.shape()) + " and " + to_string(w.shape()));
  }
  require_shape(b, Shape{w.dim(0)}, "linear bias");
  const auto N = static_cast<Eigen::Index>(x.dim(0)), D = static_cast<Eigen::Index>(x.dim(1)),
             O = static_cast<Eigen::Index>(w.dim(0));
  Tensor<T> y({x.dim(0), w.dim(0)});
  MatMap<T> Y(y.data(), N, O);
  Y.noalias() = ConstMatMap<T>(x.data(), N, D) * ConstMatMap<T>(w.data(), O, D).transpose();
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), O);
  return y;
}

template <class T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dw,
                     Tensor<T>* db) {
  const auto N = static_cast<Eigen::Index>(x.dim(0)), D = static_cast<Eigen::Index>(x.dim(1)),
             O = static_cast<Eigen::Index>(w.dim(0));
  ConstMatMap<T> DY(dy.data(), N, O);
  if (dx) MatMap<T>(dx->data(), N, D).noalias() += DY * ConstMatMap<T>(w.data(), O, D);
  if (dw) MatMap<T>(dw->data(), O, D).noalias() += DY.transpose() * ConstMatMap<T>(x.data(), N, D);
  if (db) Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db->data(), O) += DY.colwise().sum();
}

template <class T>
T sigmoid(T x) {
  return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

/// Intermediate values of one GRU step kept for the backward pass.
template <class T>
struct GruCache {
  Tensor<T> z, r, n, rh;
};

/// One GRU step on a batch, given the input projection gx = x W^T + b of
/// shape [B, 3H] laid out as (update, reset, candidate) blocks, the previous
/// state h:[B,H] and recurrent weights u:[3H,H]:
///   z = s(gx_z + U_z h), r = s(gx_r + U_r h), n = tanh(gx_n + U_n (r*h)),
///   h' = (1 - z) * h + z * n
template <class T>
Tensor<T> gru_step_forward(const Tensor<T>& gx, const Tensor<T>& h, const Tensor<T>& u, GruCache<T>* cache) {
  if (h.rank() != 2) throw ShapeError("gru: hidden state must be [B,H]");
  const std::size_t B = h.dim(0), H = h.dim(1);
  require_shape(gx, Shape{B, 3 * H}, "gru input projection");
  require_shape(u, Shape{3 * H, H}, "gru recurrent weights");
  const auto Bi = static_cast<Eigen::Index>(B), Hi = static_cast<Eigen::Index>(H);
  ConstMatMap<T> U(u.data(), 3 * Hi, Hi);
  ConstMatMap<T> Hm(h.data(), Bi, Hi);
  RowMat<T> a = Hm * U.topRows(2 * Hi).transpose();  // [B, 2H]
  Tensor<T> z({B, H}), r({B, H}), rh({B, H}), n({B, H}), out({B, H});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      const T zv = sigmoid(gx[i * 3 * H + j] + a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      const T rv = sigmoid(gx[i * 3 * H + H + j] + a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(H + j)));
      z[i * H + j] = zv;
      r[i * H + j] = rv;
      rh[i * H + j] = rv * h[i * H + j];
    }
  RowMat<T> c = ConstMatMap<T>(rh.data(), Bi, Hi) * U.bottomRows(Hi).transpose();
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      const T nv = std::tanh(gx[i * 3 * H + 2 * H + j] + c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      n[i * H + j] = nv;
      const T zv = z[i * H + j];
      out[i * H + j] = (T{1} - zv) * h[i * H + j] + zv * nv;
    }
  if (cache) *cache = GruCache<T>{std::move(z), std::move(r), std::move(n), std::move(rh)};
  return out;
}

template <class T>
void gru_step_backward(const Tensor<T>& h, const Tensor<T>& u, const GruCache<T>& cache, const Tensor<T>& dout,
                       Tensor<T>* dgx, Tensor<T>* dh, Tensor<T>* du) {
  const std::size_t B = h.dim(0), H = h.dim(1);
  const auto Bi = static_cast<Eigen::Index>(B), Hi = static_cast<Eigen::Index>(H);
  ConstMatMap<T> U(u.data(), 3 * Hi, Hi);
  RowMat<T> dpre(Bi, 3 * Hi);  // gradient w.r.t. gate pre-activations
  RowMat<T> dh_local(Bi, Hi);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t k = i * H + j;
      const T g = dout[k], zv = cache.z[k], nv = cache.n[k];
      dpre(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(2 * H + j)) = g * zv * (T{1} - nv * nv);
      dpre(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g * (nv - h[k]) * zv * (T{1} - zv);
      dh_local(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g * (T{1} - zv);
    }
  RowMat<T> drh = dpre.rightCols(Hi) * U.bottomRows(Hi);  // [B,H]
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t k = i * H + j;
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      const T rv = cache.r[k];
      dpre(ii, static_cast<Eigen::Index>(H + j)) = drh(ii, jj) * h[k] * rv * (T{1} - rv);
      dh_local(ii, jj) += drh(ii, jj) * rv;
    }
  if (du) {
    MatMap<T> DU(du->data(), 3 * Hi, Hi);
    DU.topRows(2 * Hi).noalias() += dpre.leftCols(2 * Hi).transpose() * ConstMatMap<T>(h.data(), Bi, Hi);
    DU.bottomRows(Hi).noalias() += dpre.rightCols(Hi).transpose() * ConstMatMap<T>(cache.rh.data(), Bi, Hi);
  }
  if (dh) {
    dh_local.noalias() += dpre.leftCols(2 * Hi) * U.topRows(2 * Hi);
    MatMap<T>(dh->data(), Bi, Hi) += dh_local;
  }
  if (dgx) MatMap<T>(dgx->data(), Bi, 3 * Hi) += dpre;
}

/// Per-channel normalisation over batch and spatial positions using the
/// statistics of the current batch.
template <class T>
struct BatchNormCache {
  std::vector<T> inv_std;
  Tensor<T> xhat;
};

template <class T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                            BatchNormCache<T>* cache) {
  if (x.rank() != 4) throw ShapeError("batchnorm: input must be [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  require_shape(gamma, Shape{C}, "batchnorm gamma");
  require_shape(beta, Shape{C}, "batchnorm beta");
  const T M = static_cast<T>(N * P);
  Tensor<T> y(x.shape()), xhat(x.shape());
  std::vector<T> inv(C);
  for (std::size_t c = 0; c < C; ++c) {
    T mean{0};
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) mean += x[(n * C + c) * P + p];
    mean /= M;
    T var{0};
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const T d = x[(n * C + c) * P + p] - mean;
        var += d * d;
      }
    var /= M;
    inv[c] = T{1} / std::sqrt(var + eps);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t k = (n * C + c) * P + p;
        xhat[k] = (x[k] - mean) * inv[c];
        y[k] = gamma[c] * xhat[k] + beta[c];
      }
  }
  if (cache) *cache = BatchNormCache<T>{std::move(inv), std::move(xhat)};
  return y;
}

template <class T>
void batchnorm_backward(const Tensor<T>& gamma, const BatchNormCache<T>& cache, const Tensor<T>& dy, Tensor<T>* dx,
                        Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const std::size_t N = dy.dim(0), C = dy.dim(1), P = dy.dim(2) * dy.dim(3);
  const T M = static_cast<T>(N * P);
  for (std::size_t c = 0; c < C; ++c) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t k = (n * C + c) * P + p;
        sum_dy += dy[k];
        sum_dy_xhat += dy[k] * cache.xhat[k];
      }
    if (dgamma) (*dgamma)[c] += sum_dy_xhat;
    if (dbeta) (*dbeta)[c] += sum_dy;
    if (dx) {
      const T scale = gamma[c] * cache.inv_std[c] / M;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t k = (n * C + c) * P + p;
          (*dx)[k] += scale * (M * dy[k] - sum_dy - cache.xhat[k] * sum_dy_xhat);
        }
    }
  }
}

}  // namespace paegan::nn::kernels
