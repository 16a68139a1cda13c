#pragma once

// Forward kernels and gradient rules for every op the model, losses and
// pretraining consume. Layouts: conv/interp/pool/group-norm ops take NCHW;
// window ops take token maps laid out as N x H x W x C.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "sarseg/numerics/tensor.hpp"

namespace sarseg::num {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// C[m,n] (+)= op(A) * op(B), all row-major.
template <class T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::int64_t m,
          std::int64_t n, std::int64_t k, bool accumulate) {
  MapMat<T> cm(c, m, n);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += CMapMat<T>(a, m, k) * CMapMat<T>(b, k, n);
  } else if (!trans_a && trans_b) {
    cm.noalias() += CMapMat<T>(a, m, k) * CMapMat<T>(b, n, k).transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += CMapMat<T>(a, k, m).transpose() * CMapMat<T>(b, k, n);
  } else {
    cm.noalias() += CMapMat<T>(a, k, m).transpose() * CMapMat<T>(b, n, k).transpose();
  }
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` viewed inside the broadcast shape `out` (0 on broadcast axes).
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> s(out.size(), 0);
  const auto rs = row_major_strides(in);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) s[i + off] = in[i] == 1 ? 0 : rs[i];
  return s;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t total = numel(out);
  if (total == 0) return;
  const std::size_t nd = out.size();
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(nd, 0);
  const std::int64_t inner = out[nd - 1];
  const std::int64_t ia_step = sa[nd - 1], ib_step = sb[nd - 1];
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    // advance the outer odometer
    for (std::int64_t d = static_cast<std::int64_t>(nd) - 2; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  static constexpr std::string_view names[] = {"add", "sub", "mul"};
  const auto name = names[static_cast<int>(kind)];
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
      switch (kind) {
        case BinaryKind::Add: out[i] = av[i] + bv[i]; break;
        case BinaryKind::Sub: out[i] = av[i] - bv[i]; break;
        case BinaryKind::Mul: out[i] = av[i] * bv[i]; break;
      }
    }
    return make_result<T>(name, a.shape(), std::move(out), {a, b}, [kind](Node<T>& self) {
      const auto& go = self.grad;
      T* ga = parent_grad(self, 0);
      T* gb = parent_grad(self, 1);
      const auto& x = parent_value(self, 0);
      const auto& y = parent_value(self, 1);
      for (std::size_t i = 0; i < go.size(); ++i) {
        switch (kind) {
          case BinaryKind::Add:
            if (ga) ga[i] += go[i];
            if (gb) gb[i] += go[i];
            break;
          case BinaryKind::Sub:
            if (ga) ga[i] += go[i];
            if (gb) gb[i] -= go[i];
            break;
          case BinaryKind::Mul:
            if (ga) ga[i] += go[i] * y[i];
            if (gb) gb[i] += go[i] * x[i];
            break;
        }
      }
    });
  }
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  for_each_broadcast(out_shape, sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
    switch (kind) {
      case BinaryKind::Add: out[o] = av[i] + bv[j]; break;
      case BinaryKind::Sub: out[o] = av[i] - bv[j]; break;
      case BinaryKind::Mul: out[o] = av[i] * bv[j]; break;
    }
  });
  return make_result<T>(name, out_shape, std::move(out), {a, b},
                        [kind, out_shape, sa, sb](Node<T>& self) {
                          const auto& go = self.grad;
                          T* ga = parent_grad(self, 0);
                          T* gb = parent_grad(self, 1);
                          const auto& x = parent_value(self, 0);
                          const auto& y = parent_value(self, 1);
                          for_each_broadcast(out_shape, sa, sb,
                                             [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                                               switch (kind) {
                                                 case BinaryKind::Add:
                                                   if (ga) ga[i] += go[o];
                                                   if (gb) gb[j] += go[o];
                                                   break;
                                                 case BinaryKind::Sub:
                                                   if (ga) ga[i] += go[o];
                                                   if (gb) gb[j] -= go[o];
                                                   break;
                                                 case BinaryKind::Mul:
                                                   if (ga) ga[i] += go[o] * y[j];
                                                   if (gb) gb[j] += go[o] * x[i];
                                                   break;
                                               }
                                             });
                        });
}

// Output = f(x) elementwise with derivative df(x, y).
template <class T, class F, class DF>
Tensor<T> unary(std::string_view name, const Tensor<T>& x, F f, DF df) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(name, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = parent_value(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i)
      gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

// Output[i] = x[index[i]]; a pure data movement op.
template <class T>
Tensor<T> gather(std::string_view name, const Tensor<T>& x, Shape out_shape,
                 std::vector<std::int64_t> index) {
  const auto& xv = x.values();
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = xv[index[i]];
  return make_result<T>(name, std::move(out_shape), std::move(out), {x},
                        [index = std::move(index)](Node<T>& self) {
                          T* gx = parent_grad(self, 0);
                          if (!gx) return;
                          for (std::size_t i = 0; i < index.size(); ++i)
                            gx[index[i]] += self.grad[i];
                        });
}

// Half-pixel-center source coordinates for one resized axis.
struct InterpAxis {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> w1;
};

inline InterpAxis bilinear_axis(std::int64_t in, std::int64_t out) {
  InterpAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    ax.i0[o] = lo;
    ax.i1[o] = std::min(lo + 1, in - 1);
    ax.w1[o] = src - static_cast<double>(lo);
  }
  return ax;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Add);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Sub);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Mul);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "mul", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "add", x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
        return cdf + v * pdf;
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------------------
// Linear algebra

// a: [..., M, K]; b: [K, N] shared across the batch, or [..., K, N] with the
// same leading dims as a. transpose_b reads b as [..., N, K].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::require(a.ndim() >= 2 && b.ndim() >= 2, "matmul: operands must be at least 2-D");
  const std::int64_t m = a.dim(-2), k = a.dim(-1);
  const std::int64_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::int64_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  detail::require(bk == k, "matmul: inner dims differ " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()));
  const bool shared = b.ndim() == 2;
  const std::int64_t batch = a.numel() / (m * k);
  if (!shared) {
    detail::require(b.ndim() == a.ndim() && std::equal(a.shape().begin(), a.shape().end() - 2,
                                                       b.shape().begin()),
                    "matmul: batch dims differ " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  if (shared) {
    detail::gemm(av, false, bv, transpose_b, out.data(), batch * m, n, k, false);
  } else {
    for (std::int64_t i = 0; i < batch; ++i)
      detail::gemm(av + i * m * k, false, bv + i * k * n, transpose_b, out.data() + i * m * n,
                   m, n, k, false);
  }
  return make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [=](Node<T>& self) {
        const T* go = self.grad.data();
        const T* x = parent_value(self, 0).data();
        const T* y = parent_value(self, 1).data();
        T* ga = parent_grad(self, 0);
        T* gb = parent_grad(self, 1);
        if (shared) {
          const std::int64_t rows = batch * m;
          if (ga) detail::gemm(go, false, y, !transpose_b, ga, rows, k, n, true);
          if (gb) {
            if (transpose_b)
              detail::gemm(go, true, x, false, gb, n, k, rows, true);
            else
              detail::gemm(x, true, go, false, gb, k, n, rows, true);
          }
          return;
        }
        for (std::int64_t i = 0; i < batch; ++i) {
          const T* goi = go + i * m * n;
          if (ga) detail::gemm(goi, false, y + i * k * n, !transpose_b, ga + i * m * k, m, k, n, true);
          if (gb) {
            if (transpose_b)
              detail::gemm(goi, true, x + i * m * k, false, gb + i * k * n, n, k, m, true);
            else
              detail::gemm(x + i * m * k, true, goi, false, gb + i * k * n, k, n, m, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};

// x: [N,C,H,W]; w: [O,C,kh,kw]; bias: [O] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Conv2dOptions opt = {}) {
  detail::require(x.ndim() == 4 && w.ndim() == 4, "conv2d: expects 4-D input and weight");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(w.dim(1) == c, "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                     shape_str(w.shape()));
  if (opt.stride < 1 || opt.padding < 0) throw ArgumentError("conv2d: bad stride/padding");
  if (bias.defined()) detail::require(bias.numel() == o, "conv2d: bias size mismatch");
  const std::int64_t s = opt.stride, p = opt.padding;
  const std::int64_t ho = (h + 2 * p - kh) / s + 1, wo = (wd + 2 * p - kw) / s + 1;
  detail::require(ho > 0 && wo > 0, "conv2d: kernel larger than padded input");
  const std::int64_t ckk = c * kh * kw, hw_out = ho * wo, hw_in = h * wd;
  const bool pointwise = kh == 1 && kw == 1 && s == 1 && p == 0;

  // Output columns [lo, hi) read inside the image for kernel column kx.
  auto valid_cols = [=](std::int64_t kx) {
    std::int64_t lo = 0, hi = wo;
    while (lo < wo && lo * s - p + kx < 0) ++lo;
    while (hi > lo && (hi - 1) * s - p + kx >= wd) --hi;
    return std::pair{lo, hi};
  };
  auto im2col = [=](const T* img, T* cols) {
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t ky = 0; ky < kh; ++ky)
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          T* row = cols + ((ci * kh + ky) * kw + kx) * hw_out;
          const auto [lo, hi] = valid_cols(kx);
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            T* dst = row + oy * wo;
            const std::int64_t iy = oy * s - p + ky;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T{});
              continue;
            }
            const T* src = img + (ci * h + iy) * wd;
            const std::int64_t off = kx - p;  // ix = ox * s + off
            std::fill(dst, dst + lo, T{});
            if (s == 1) {
              std::copy(src + lo + off, src + hi + off, dst + lo);
            } else {
              for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * s + off];
            }
            std::fill(dst + hi, dst + wo, T{});
          }
        }
  };

  const T* xv = x.values().data();
  const T* wv = w.values().data();
  std::vector<T> out(static_cast<std::size_t>(n * o * hw_out));
  std::vector<T> cols;
  if (!pointwise) cols.resize(static_cast<std::size_t>(n * ckk * hw_out));
  for (std::int64_t b = 0; b < n; ++b) {
    const T* rhs = xv + b * c * hw_in;
    if (!pointwise) {
      im2col(rhs, cols.data() + b * ckk * hw_out);
      rhs = cols.data() + b * ckk * hw_out;
    }
    T* ob = out.data() + b * o * hw_out;
    detail::gemm(wv, false, rhs, false, ob, o, hw_out, ckk, false);
    if (bias.defined()) {
      const auto& bv = bias.values();
      for (std::int64_t oc = 0; oc < o; ++oc)
        for (std::int64_t i = 0; i < hw_out; ++i) ob[oc * hw_out + i] += bv[oc];
    }
  }
  if (!grad_enabled()) cols.clear();
  trace("conv2d", std::to_string(kh) + "x" + std::to_string(kw) + "/s" + std::to_string(s));
  return make_result<T>(
      "conv2d", {n, o, ho, wo}, std::move(out), {x, w, bias},
      [=, cols = std::move(cols)](Node<T>& self) {
        const T* go = self.grad.data();
        T* gx = parent_grad(self, 0);
        T* gw = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        const T* xs = parent_value(self, 0).data();
        const T* ws = parent_value(self, 1).data();
        std::vector<T> dcols;
        if (gx && !pointwise) dcols.resize(static_cast<std::size_t>(ckk * hw_out));
        for (std::int64_t b = 0; b < n; ++b) {
          const T* gob = go + b * o * hw_out;
          const T* colb = pointwise ? xs + b * c * hw_in : cols.data() + b * ckk * hw_out;
          if (gw) detail::gemm(gob, false, colb, true, gw, o, ckk, hw_out, true);
          if (gb)
            for (std::int64_t oc = 0; oc < o; ++oc)
              for (std::int64_t i = 0; i < hw_out; ++i) gb[oc] += gob[oc * hw_out + i];
          if (!gx) continue;
          if (pointwise) {
            detail::gemm(ws, true, gob, false, gx + b * c * hw_in, c, hw_out, o, true);
            continue;
          }
          detail::gemm(ws, true, gob, false, dcols.data(), ckk, hw_out, o, false);
          T* gimg = gx + b * c * hw_in;
          for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const T* row = dcols.data() + ((ci * kh + ky) * kw + kx) * hw_out;
                const auto [lo, hi] = valid_cols(kx);
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                  const std::int64_t iy = oy * s - p + ky;
                  if (iy < 0 || iy >= h) continue;
                  T* dst = gimg + (ci * h + iy) * wd;
                  const T* src = row + oy * wo;
                  const std::int64_t off = kx - p;
                  for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * s + off] += src[ox];
                }
              }
        }
      });
}

// Learned 2x upsampling: transposed convolution with kernel 2, stride 2.
// x: [N,C,H,W]; w: [C,O,2,2]; bias: [O] or undefined.
template <class T>
Tensor<T> transposed_upsample2x(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require(x.ndim() == 4 && w.ndim() == 4 && w.dim(2) == 2 && w.dim(3) == 2,
                  "transposed_upsample2x: expects [N,C,H,W] and [C,O,2,2]");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(1);
  detail::require(w.dim(0) == c, "transposed_upsample2x: channel mismatch");
  const std::int64_t hw = h * wd, o4 = o * 4;
  std::vector<T> out(static_cast<std::size_t>(n * o * 4 * hw));
  std::vector<T> tmp(static_cast<std::size_t>(o4 * hw));
  // tmp[(oc,a,b), pix] = sum_c w[c,(oc,a,b)] x[c,pix]
  for (std::int64_t b = 0; b < n; ++b) {
    detail::gemm(w.values().data(), true, x.values().data() + b * c * hw, false, tmp.data(), o4,
                 hw, c, false);
    T* ob = out.data() + b * o * 4 * hw;
    for (std::int64_t oc = 0; oc < o; ++oc)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const T* src = tmp.data() + ((oc * 2 + dy) * 2 + dx) * hw;
          const T bv = bias.defined() ? bias.values()[oc] : T{};
          for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < wd; ++xx)
              ob[(oc * 2 * h + 2 * y + dy) * 2 * wd + 2 * xx + dx] = src[y * wd + xx] + bv;
        }
  }
  trace("transposed_upsample", "x2");
  return make_result<T>(
      "transposed_upsample2x", {n, o, 2 * h, 2 * wd}, std::move(out), {x, w, bias},
      [=](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        T* gw = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        std::vector<T> gt(static_cast<std::size_t>(o4 * hw));
        for (std::int64_t b = 0; b < n; ++b) {
          const T* gob = self.grad.data() + b * o * 4 * hw;
          for (std::int64_t oc = 0; oc < o; ++oc)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                T* dst = gt.data() + ((oc * 2 + dy) * 2 + dx) * hw;
                for (std::int64_t y = 0; y < h; ++y)
                  for (std::int64_t xx = 0; xx < wd; ++xx) {
                    const T g = gob[(oc * 2 * h + 2 * y + dy) * 2 * wd + 2 * xx + dx];
                    dst[y * wd + xx] = g;
                    if (gb) gb[oc] += g;
                  }
              }
          const T* xb = parent_value(self, 0).data() + b * c * hw;
          if (gw) detail::gemm(xb, false, gt.data(), true, gw, c, o4, hw, true);
          if (gx)
            detail::gemm(parent_value(self, 1).data(), false, gt.data(), false, gx + b * c * hw, c,
                         hw, o4, true);
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling

// Bilinear resize of [N,C,H,W] to [N,C,out_h,out_w], half-pixel centers
// (align-corners off), border-clamped.
namespace detail {

template <class T>
Tensor<T> resize_bilinear_untraced(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require(x.ndim() == 4, "resize_bilinear: expects NCHW");
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize_bilinear: non-positive output size");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ay = detail::bilinear_axis(h, out_h);
  auto ax = detail::bilinear_axis(w, out_w);
  const auto& xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(nc * out_h * out_w));
  for (std::int64_t p = 0; p < nc; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const T wy = T(ay.w1[oy]);
      const T* r0 = src + ay.i0[oy] * w;
      const T* r1 = src + ay.i1[oy] * w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const T wx = T(ax.w1[ox]);
        const auto x0 = ax.i0[ox], x1 = ax.i1[ox];
        const T top = r0[x0] + wx * (r0[x1] - r0[x0]);
        const T bot = r1[x0] + wx * (r1[x1] - r1[x0]);
        dst[oy * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  Shape shape{x.dim(0), x.dim(1), out_h, out_w};
  return make_result<T>("resize_bilinear", std::move(shape), std::move(out), {x},
                        [=](Node<T>& self) {
                          T* gx = parent_grad(self, 0);
                          if (!gx) return;
                          for (std::int64_t p = 0; p < nc; ++p) {
                            const T* go = self.grad.data() + p * out_h * out_w;
                            T* g = gx + p * h * w;
                            for (std::int64_t oy = 0; oy < out_h; ++oy) {
                              const T wy = T(ay.w1[oy]);
                              T* r0 = g + ay.i0[oy] * w;
                              T* r1 = g + ay.i1[oy] * w;
                              for (std::int64_t ox = 0; ox < out_w; ++ox) {
                                const T wx = T(ax.w1[ox]);
                                const T v = go[oy * out_w + ox];
                                r0[ax.i0[ox]] += v * (1 - wy) * (1 - wx);
                                r0[ax.i1[ox]] += v * (1 - wy) * wx;
                                r1[ax.i0[ox]] += v * wy * (1 - wx);
                                r1[ax.i1[ox]] += v * wy * wx;
                              }
                            }
                          }
                        });
}

}  // namespace detail

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require(x.ndim() == 4, "resize_bilinear: expects NCHW");
  trace("resize_bilinear", std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) + "->" +
                               std::to_string(out_h) + "x" + std::to_string(out_w));
  return detail::resize_bilinear_untraced(x, out_h, out_w);
}

template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
  if (factor <= 0) throw ArgumentError("bilinear_upsample: scale must be positive");
  detail::require(x.ndim() == 4, "bilinear_upsample: expects NCHW");
  trace("bilinear_upsample", "x" + std::to_string(factor));
  return detail::resize_bilinear_untraced(x, x.dim(2) * factor, x.dim(3) * factor);
}

template <class T>
Tensor<T> nearest_upsample(const Tensor<T>& x, int factor) {
  if (factor <= 0) throw ArgumentError("nearest_upsample: scale must be positive");
  detail::require(x.ndim() == 4, "nearest_upsample: expects NCHW");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  std::vector<std::int64_t> index(static_cast<std::size_t>(nc * oh * ow));
  std::size_t i = 0;
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx) index[i++] = (p * h + y / factor) * w + xx / factor;
  trace("nearest_upsample", "x" + std::to_string(factor));
  return detail::gather<T>("nearest_upsample", x, {x.dim(0), x.dim(1), oh, ow}, std::move(index));
}

// Adaptive average pooling of [N,C,H,W] onto an out_h x out_w grid; bin i
// spans [floor(i*H/out), ceil((i+1)*H/out)). Output may be larger than input.
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require(x.ndim() == 4, "adaptive_avg_pool2d: expects NCHW");
  if (out_h < 1 || out_w < 1) throw ArgumentError("adaptive_avg_pool2d: non-positive grid");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto bins = [](std::int64_t in, std::int64_t out) {
    std::vector<std::pair<std::int64_t, std::int64_t>> b(out);
    for (std::int64_t i = 0; i < out; ++i)
      b[i] = {(i * in) / out, ((i + 1) * in + out - 1) / out};
    return b;
  };
  auto by = bins(h, out_h), bx = bins(w, out_w);
  const auto& xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(nc * out_h * out_w));
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t oy = 0; oy < out_h; ++oy)
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        T acc{};
        for (auto y = by[oy].first; y < by[oy].second; ++y)
          for (auto xx = bx[ox].first; xx < bx[ox].second; ++xx) acc += xv[(p * h + y) * w + xx];
        const auto area = (by[oy].second - by[oy].first) * (bx[ox].second - bx[ox].first);
        out[(p * out_h + oy) * out_w + ox] = acc / T(area);
      }
  trace("adaptive_avg_pool", std::to_string(out_h) + "x" + std::to_string(out_w));
  return make_result<T>("adaptive_avg_pool2d", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out),
                        {x}, [=](Node<T>& self) {
                          T* gx = parent_grad(self, 0);
                          if (!gx) return;
                          for (std::int64_t p = 0; p < nc; ++p)
                            for (std::int64_t oy = 0; oy < out_h; ++oy)
                              for (std::int64_t ox = 0; ox < out_w; ++ox) {
                                const auto area = (by[oy].second - by[oy].first) *
                                                  (bx[ox].second - bx[ox].first);
                                const T g = self.grad[(p * out_h + oy) * out_w + ox] / T(area);
                                for (auto y = by[oy].first; y < by[oy].second; ++y)
                                  for (auto xx = bx[ox].first; xx < bx[ox].second; ++xx)
                                    gx[(p * h + y) * w + xx] += g;
                              }
                        });
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

// Normalizes `groups` contiguous blocks of `len` values each, then applies a
// per-channel affine map where channel(j) = (j / inner) % channels.
template <class T>
Tensor<T> normalize_blocks(std::string_view name, const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, std::int64_t groups, std::int64_t len,
                           std::int64_t inner, std::int64_t channels, double eps) {
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(static_cast<std::size_t>(groups));
  for (std::int64_t g = 0; g < groups; ++g) {
    const T* src = xv.data() + g * len;
    double mean = 0;
    for (std::int64_t i = 0; i < len; ++i) mean += src[i];
    mean /= static_cast<double>(len);
    double var = 0;
    for (std::int64_t i = 0; i < len; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(len);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[g] = T(r);
    for (std::int64_t i = 0; i < len; ++i) {
      const std::int64_t j = g * len + i;
      const T xh = T((src[i] - mean) * r);
      const std::int64_t ch = (j / inner) % channels;
      xhat[j] = xh;
      out[j] = xh * gv[ch] + bv[ch];
    }
  }
  return make_result<T>(
      name, x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        T* gg = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        const auto& gv = parent_value(self, 1);
        const auto& go = self.grad;
        for (std::int64_t g = 0; g < groups; ++g) {
          double sum_d = 0, sum_dx = 0;
          for (std::int64_t i = 0; i < len; ++i) {
            const std::int64_t j = g * len + i;
            const std::int64_t ch = (j / inner) % channels;
            const double d = static_cast<double>(go[j]) * gv[ch];
            sum_d += d;
            sum_dx += d * xhat[j];
            if (gg) gg[ch] += go[j] * xhat[j];
            if (gb) gb[ch] += go[j];
          }
          if (!gx) continue;
          const double md = sum_d / static_cast<double>(len);
          const double mdx = sum_dx / static_cast<double>(len);
          for (std::int64_t i = 0; i < len; ++i) {
            const std::int64_t j = g * len + i;
            const std::int64_t ch = (j / inner) % channels;
            const double d = static_cast<double>(go[j]) * gv[ch];
            gx[j] += T(rstd[g] * (d - md - xhat[j] * mdx));
          }
        }
      });
}

}  // namespace detail

// Normalizes over the last axis; gamma/beta have that axis' size.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  const std::int64_t c = x.dim(-1);
  detail::require(gamma.numel() == c && beta.numel() == c, "layer_norm: affine size mismatch");
  return detail::normalize_blocks("layer_norm", x, gamma, beta, x.numel() / c, c, 1, c, eps);
}

// x: [N,C,H,W]; statistics per (sample, group of C/groups channels).
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::int64_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5) {
  detail::require(x.ndim() == 4, "group_norm: expects NCHW");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups < 1 || c % groups != 0)
    throw ArgumentError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                        std::to_string(groups) + " groups");
  detail::require(gamma.numel() == c && beta.numel() == c, "group_norm: affine size mismatch");
  return detail::normalize_blocks("group_norm", x, gamma, beta, n * groups, (c / groups) * hw,
                                  hw, c, eps);
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::int64_t c = x.dim(-1);
  const std::int64_t rows = x.numel() / c;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * c;
    T* dst = out.data() + r * c;
    const T mx = *std::max_element(src, src + c);
    T sum{};
    for (std::int64_t i = 0; i < c; ++i) {
      dst[i] = std::exp(src[i] - mx);
      sum += dst[i];
    }
    for (std::int64_t i = 0; i < c; ++i) dst[i] /= sum;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [=](Node<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * c;
      const T* go = self.grad.data() + r * c;
      T dot{};
      for (std::int64_t i = 0; i < c; ++i) dot += go[i] * y[i];
      for (std::int64_t i = 0; i < c; ++i) gx[r * c + i] += y[i] * (go[i] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t infer = -1, known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dim");
      infer = static_cast<std::int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out = x.values();
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& dims) {
  const std::size_t nd = x.ndim();
  detail::require(dims.size() == nd, "permute: wrong number of dims");
  std::vector<bool> used(nd, false);
  Shape out_shape(nd);
  const auto in_strides = row_major_strides(x.shape());
  std::vector<std::int64_t> src_strides(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const int d = dims[i];
    detail::require(d >= 0 && d < static_cast<int>(nd) && !used[d], "permute: invalid dims");
    used[d] = true;
    out_shape[i] = x.shape()[d];
    src_strides[i] = in_strides[d];
  }
  std::vector<std::int64_t> index(static_cast<std::size_t>(x.numel()));
  std::vector<std::int64_t> zero(nd, 0);
  detail::for_each_broadcast(out_shape, src_strides, zero,
                             [&](std::int64_t o, std::int64_t i, std::int64_t) { index[o] = i; });
  return detail::gather<T>("permute", x, std::move(out_shape), std::move(index));
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  detail::require(!xs.empty(), "concat: no inputs");
  const int nd = static_cast<int>(xs[0].ndim());
  if (axis < 0) axis += nd;
  detail::require(axis >= 0 && axis < nd, "concat: bad axis");
  Shape out_shape = xs[0].shape();
  std::int64_t total = 0;
  for (const auto& t : xs) {
    detail::require(static_cast<int>(t.ndim()) == nd, "concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && t.shape()[d] != out_shape[d])
        throw ShapeError("concat: " + shape_str(t.shape()) + " vs " + shape_str(out_shape));
    total += t.shape()[axis];
  }
  out_shape[axis] = total;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[d];
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> widths;
  for (const auto& t : xs) widths.push_back(t.shape()[axis] * inner);
  const std::int64_t row = total * inner;
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), xs, [=](Node<T>& self) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (T* g = parent_grad(self, k)) {
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * row + off;
          T* dst = g + o * widths[k];
          for (std::int64_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
        }
      }
      off += widths[k];
    }
  });
}

namespace detail {

// Source index (into N x H x W x C) for every element of the windowed layout
// [N * (H/ws) * (W/ws), ws*ws, C], after a cyclic shift of -shift on H and W.
inline std::vector<std::int64_t> window_index(std::int64_t n, std::int64_t h, std::int64_t w,
                                              std::int64_t c, std::int64_t ws, std::int64_t shift) {
  std::vector<std::int64_t> index(static_cast<std::size_t>(n * h * w * c));
  const std::int64_t nh = h / ws, nw = w / ws;
  std::size_t i = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t wy = 0; wy < nh; ++wy)
      for (std::int64_t wx = 0; wx < nw; ++wx)
        for (std::int64_t ty = 0; ty < ws; ++ty)
          for (std::int64_t tx = 0; tx < ws; ++tx) {
            const std::int64_t y = (wy * ws + ty + shift) % h;
            const std::int64_t x = (wx * ws + tx + shift) % w;
            const std::int64_t base = ((b * h + y) * w + x) * c;
            for (std::int64_t ch = 0; ch < c; ++ch) index[i++] = base + ch;
          }
  return index;
}

}  // namespace detail

// [N,H,W,C] -> [N*nW, ws*ws, C], windows taken after rolling by -shift.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t ws, std::int64_t shift = 0) {
  detail::require(x.ndim() == 4, "window_partition: expects [N,H,W,C]");
  const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (ws < 1 || h % ws || w % ws)
    throw ConfigError("window_partition: " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by window " + std::to_string(ws));
  shift = ((shift % ws) + ws) % ws;
  auto index = detail::window_index(n, h, w, c, ws, shift);
  return detail::gather<T>("window_partition", x, {n * (h / ws) * (w / ws), ws * ws, c},
                           std::move(index));
}

// Inverse of window_partition for a token map of size h x w.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::int64_t ws, std::int64_t shift,
                         std::int64_t h, std::int64_t w) {
  detail::require(windows.ndim() == 3 && windows.dim(1) == ws * ws,
                  "window_reverse: expects [B, ws*ws, C]");
  if (h % ws || w % ws) throw ConfigError("window_reverse: map not divisible by window");
  const std::int64_t c = windows.dim(2);
  const std::int64_t n = windows.dim(0) / ((h / ws) * (w / ws));
  shift = ((shift % ws) + ws) % ws;
  auto fwd = detail::window_index(n, h, w, c, ws, shift);
  std::vector<std::int64_t> index(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) index[fwd[i]] = static_cast<std::int64_t>(i);
  return detail::gather<T>("window_reverse", windows, {n, h, w, c}, std::move(index));
}

// ---------------------------------------------------------------------------
// Reductions (to a scalar). Accumulation runs in double in index order, so a
// mask of all ones reproduces the unmasked result bit for bit.

template <class T>
Tensor<T> masked_sum(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != x.numel())
    throw ShapeError("masked_sum: mask size mismatch");
  const auto& xv = x.values();
  double acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i)
    if (mask.empty() || mask[i]) acc += xv[i];
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_result<T>("sum", {}, {T(acc)}, {x}, [m = std::move(m)](Node<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    const T g = self.grad[0];
    const std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i)
      if (m.empty() || m[i]) gx[i] += g;
  });
}

template <class T>
Tensor<T> masked_mean(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != x.numel())
    throw ShapeError("masked_mean: mask size mismatch");
  const auto& xv = x.values();
  double acc = 0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < xv.size(); ++i)
    if (mask.empty() || mask[i]) {
      acc += xv[i];
      ++count;
    }
  if (count == 0) throw EmptyInputError("masked_mean: mask selects no elements");
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const double inv = 1.0 / static_cast<double>(count);
  return make_result<T>("mean", {}, {T(acc * inv)}, {x},
                        [m = std::move(m), inv](Node<T>& self) {
                          T* gx = parent_grad(self, 0);
                          if (!gx) return;
                          const T g = T(self.grad[0] * inv);
                          const std::size_t n = self.parents[0]->value.size();
                          for (std::size_t i = 0; i < n; ++i)
                            if (m.empty() || m[i]) gx[i] += g;
                        });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  return masked_sum(x, {});
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return masked_mean(x, {});
}

}  // namespace sarseg::num
