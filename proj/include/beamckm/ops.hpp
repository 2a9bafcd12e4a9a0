// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "beamckm/tensor.hpp"

namespace beamckm {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Eigen's vectorized kernels peel a scalar head that depends on where the
// data starts, so the same product over std::vector memory can round
// differently from one allocation to the next. Products therefore run on
// Eigen-owned copies, which always start on the same boundary.
template <class T>
RowMat<T> owned(const T* p, Eigen::Index r, Eigen::Index c) {
  return ConstMatMap<T>(p, r, c);
}

/// Evaluates a product expression and writes (or adds) it to row-major dst.
template <class T, class Expr>
void store(T* dst, const Expr& e, bool accumulate) {
  const RowMat<T> v = e;
  const T* src = v.data();
  const auto n = static_cast<std::size_t>(v.size());
  if (accumulate)
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  else
    std::copy(src, src + n, dst);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
std::size_t last_dim(const Tensor<T>& x, const char* op) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError(std::string(op) + ": empty last axis");
  return x.shape().back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// Applies f elementwise; dfdx(x, y) gives the local derivative.
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF dfdx) {
  std::vector<T> out(x.numel());
  const auto& xv = x.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [dfdx](Node<T>& n) {
    auto& in = *n.inputs[0];
    for (std::size_t i = 0; i < n.value.size(); ++i) in.grad[i] += n.grad[i] * dfdx(in.value[i], n.value[i]);
  });
}

template <class T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(k * (v + c * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// Clamp with zero gradient outside (lo, hi).
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary(
      x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& in = *n.inputs[k];
      if (!in.requires_grad) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += n.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    auto& ia = *n.inputs[0];
    auto& ib = *n.inputs[1];
    if (ia.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) ia.grad[i] += n.grad[i];
    if (ib.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) ib.grad[i] -= n.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    auto& ia = *n.inputs[0];
    auto& ib = *n.inputs[1];
    if (ia.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) ia.grad[i] += n.grad[i] * ib.value[i];
    if (ib.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) ib.grad[i] += n.grad[i] * ia.value[i];
  });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Row broadcasting: x[..., D] with v[D]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t d = detail::last_dim(x, "add_rows");
  if (v.numel() != d) throw DimensionError("add_rows: vector length " + std::to_string(v.numel()) + " vs " + std::to_string(d));
  std::vector<T> out(x.vec());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i % d];
  return make_result<T>(x.shape(), std::move(out), {x, v}, [d](Node<T>& n) {
    auto& ix = *n.inputs[0];
    auto& iv = *n.inputs[1];
    if (ix.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) ix.grad[i] += n.grad[i];
    if (iv.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) iv.grad[i % d] += n.grad[i];
  });
}

template <class T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t d = detail::last_dim(x, "mul_rows");
  if (v.numel() != d) throw DimensionError("mul_rows: vector length " + std::to_string(v.numel()) + " vs " + std::to_string(d));
  std::vector<T> out(x.vec());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= v[i % d];
  return make_result<T>(x.shape(), std::move(out), {x, v}, [d](Node<T>& n) {
    auto& ix = *n.inputs[0];
    auto& iv = *n.inputs[1];
    if (ix.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) ix.grad[i] += n.grad[i] * iv.value[i % d];
    if (iv.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) iv.grad[i % d] += n.grad[i] * ix.value[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.vec()) s += v;
  return make_result<T>(Shape{1}, {s}, {x}, [](Node<T>& n) {
    auto& in = *n.inputs[0];
    for (auto& g : in.grad) g += n.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean of squared differences.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(square(sub(a, b)));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result<T>(std::move(shape), x.vec(), {x}, [](Node<T>& n) {
    auto& in = *n.inputs[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += n.grad[i];
  });
}

/// out[i] = x[index[i]]; the backward pass scatter-adds.
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::size_t> index, Shape shape) {
  if (numel_of(shape) != index.size()) throw DimensionError("gather: index count does not match shape " + shape_str(shape));
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.numel()) throw DimensionError("gather: index out of range");
    out[i] = x[index[i]];
  }
  return make_result<T>(std::move(shape), std::move(out), {x}, [index = std::move(index)](Node<T>& n) {
    auto& in = *n.inputs[0];
    for (std::size_t i = 0; i < index.size(); ++i) in.grad[index[i]] += n.grad[i];
  });
}

/// Leading-axis slice x[begin:end, ...].
template <class T>
Tensor<T> slice0(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin >= end || end > x.dim(0)) throw DimensionError("slice0: bad range");
  const std::size_t inner = x.numel() / x.dim(0);
  std::vector<std::size_t> idx((end - begin) * inner);
  std::iota(idx.begin(), idx.end(), begin * inner);
  Shape s = x.shape();
  s[0] = end - begin;
  return gather(x, std::move(idx), std::move(s));
}

/// Column block x[:, begin:end] of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 2 || begin >= end || end > x.dim(1)) throw DimensionError("slice_cols: bad range");
  const std::size_t rows = x.dim(0), cols = x.dim(1), w = end - begin;
  std::vector<std::size_t> idx(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) idx[r * w + c] = r * cols + begin + c;
  return gather(x, std::move(idx), Shape{rows, w});
}

/// Concatenation along the leading axis.
template <class T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat0: no inputs");
  Shape s = parts[0].shape();
  std::size_t lead = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1))
      throw DimensionError("concat0: trailing shapes differ: " + shape_str(p.shape()) + " vs " + shape_str(s));
    lead += p.dim(0);
    out.insert(out.end(), p.vec().begin(), p.vec().end());
  }
  s[0] = lead;
  return make_result<T>(std::move(s), std::move(out), parts, [](Node<T>& n) {
    std::size_t off = 0;
    for (auto& in : n.inputs) {
      if (in->requires_grad)
        for (std::size_t i = 0; i < in->value.size(); ++i) in->grad[i] += n.grad[off + i];
      off += in->value.size();
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// op(a) · op(b) for matrices, op = transpose when the flag is set.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: operands must be matrices");
  const Eigen::Index ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const Eigen::Index m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const Eigen::Index k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2) throw DimensionError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  using detail::owned;
  using detail::store;
  std::vector<T> out(static_cast<std::size_t>(m * n));
  {
    const auto A = owned(a.vec().data(), ar, ac);
    const auto B = owned(b.vec().data(), br, bc);
    if (!trans_a && !trans_b) store(out.data(), A * B, false);
    else if (trans_a && !trans_b) store(out.data(), A.transpose() * B, false);
    else if (!trans_a && trans_b) store(out.data(), A * B.transpose(), false);
    else store(out.data(), A.transpose() * B.transpose(), false);
  }

  return make_result<T>(Shape{static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out), {a, b},
                        [=](Node<T>& node) {
                          auto& na = *node.inputs[0];
                          auto& nb = *node.inputs[1];
                          const auto G = owned(node.grad.data(), m, n);
                          if (na.requires_grad) {
                            const auto Bv = owned(nb.value.data(), br, bc);
                            T* ga = na.grad.data();
                            // d op(A) = G op(B)^T
                            if (!trans_a) {
                              if (!trans_b) store(ga, G * Bv.transpose(), true);
                              else store(ga, G * Bv, true);
                            } else {
                              if (!trans_b) store(ga, Bv * G.transpose(), true);
                              else store(ga, Bv.transpose() * G.transpose(), true);
                            }
                          }
                          if (nb.requires_grad) {
                            const auto Av = owned(na.value.data(), ar, ac);
                            T* gb = nb.grad.data();
                            // d op(B) = op(A)^T G
                            if (!trans_b) {
                              if (!trans_a) store(gb, Av.transpose() * G, true);
                              else store(gb, Av * G, true);
                            } else {
                              if (!trans_a) store(gb, G.transpose() * Av, true);
                              else store(gb, G.transpose() * Av.transpose(), true);
                            }
                          }
                        });
}

/// y = x Wᵀ + b with W stored [out, in]; x is [in] or [L, in].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be [out, in]");
  const std::size_t in = weight.dim(1), out = weight.dim(0);
  const bool vec_in = x.rank() == 1;
  if (x.shape().back() != in) throw DimensionError("linear: input width " + std::to_string(x.shape().back()) + " vs " + std::to_string(in));
  Tensor<T> x2 = vec_in ? reshape(x, Shape{1, in}) : x;
  if (x2.rank() != 2) throw DimensionError("linear: input must be rank 1 or 2");
  Tensor<T> y = matmul(x2, weight, false, true);
  if (bias.defined()) y = add_rows(y, bias);
  return vec_in ? reshape(y, Shape{out}) : y;
}

/// Numerically stable softmax along the last axis.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim(x, "softmax_rows");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.vec().data() + r * d;
    T* yr = out.data() + r * d;
    const T mx = *std::max_element(xr, xr + d);
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= s;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [d, rows](Node<T>& n) {
    auto& in = *n.inputs[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = n.value.data() + r * d;
      const T* g = n.grad.data() + r * d;
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) in.grad[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

// Normalizes `count` contiguous groups of `size` elements; returns xhat and 1/std.
template <class T>
void normalize_groups(const std::vector<T>& x, std::size_t count, std::size_t size, T eps, std::vector<T>& xhat,
                      std::vector<T>& rstd) {
  xhat.resize(x.size());
  rstd.resize(count);
  for (std::size_t g = 0; g < count; ++g) {
    const T* xs = x.data() + g * size;
    T mu = T(0);
    for (std::size_t i = 0; i < size; ++i) mu += xs[i];
    mu /= static_cast<T>(size);
    T var = T(0);
    for (std::size_t i = 0; i < size; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= static_cast<T>(size);
    rstd[g] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < size; ++i) xhat[g * size + i] = (xs[i] - mu) * rstd[g];
  }
}

// gx = rstd * (gxhat - mean(gxhat) - xhat * mean(gxhat * xhat)) per group.
template <class T>
void normalize_groups_backward(const std::vector<T>& gxhat, const std::vector<T>& xhat, const std::vector<T>& rstd,
                               std::size_t count, std::size_t size, std::vector<T>& gx) {
  for (std::size_t g = 0; g < count; ++g) {
    const std::size_t off = g * size;
    T m1 = T(0), m2 = T(0);
    for (std::size_t i = 0; i < size; ++i) {
      m1 += gxhat[off + i];
      m2 += gxhat[off + i] * xhat[off + i];
    }
    m1 /= static_cast<T>(size);
    m2 /= static_cast<T>(size);
    for (std::size_t i = 0; i < size; ++i) gx[off + i] += rstd[g] * (gxhat[off + i] - m1 - xhat[off + i] * m2);
  }
}

}  // namespace detail

/// Layer normalization over the last axis without affine parameters.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  const std::size_t d = detail::last_dim(x, "layer_norm");
  const std::size_t rows = x.numel() / d;
  std::vector<T> xhat, rstd;
  detail::normalize_groups(x.vec(), rows, d, eps, xhat, rstd);
  std::vector<T> out = xhat;
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, d, rstd = std::move(rstd)](Node<T>& n) {
    detail::normalize_groups_backward(n.grad, n.value, rstd, rows, d, n.inputs[0]->grad);
  });
}

/// Layer normalization over the last axis followed by gamma * xhat + beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = detail::last_dim(x, "layer_norm");
  if (gamma.numel() != d || beta.numel() != d) throw DimensionError("layer_norm: affine length mismatch");
  return add_rows(mul_rows(layer_norm(x, eps), gamma), beta);
}

/// Group normalization of x[C, H, W] with per-channel affine.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() != 3) throw DimensionError("group_norm: input must be [C,H,W]");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (groups == 0 || c % groups != 0) throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible by " + std::to_string(groups) + " groups");
  if (gamma.numel() != c || beta.numel() != c) throw DimensionError("group_norm: affine length mismatch");
  const std::size_t gsize = (c / groups) * hw;
  std::vector<T> xhat, rstd;
  detail::normalize_groups(x.vec(), groups, gsize, eps, xhat, rstd);
  std::vector<T> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = gamma[ch] * xhat[ch * hw + i] + beta[ch];
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
                          auto& ix = *n.inputs[0];
                          auto& ig = *n.inputs[1];
                          auto& ib = *n.inputs[2];
                          if (ig.requires_grad || ib.requires_grad) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              T sg = T(0), sb = T(0);
                              for (std::size_t i = 0; i < hw; ++i) {
                                sg += n.grad[ch * hw + i] * xhat[ch * hw + i];
                                sb += n.grad[ch * hw + i];
                              }
                              if (ig.requires_grad) ig.grad[ch] += sg;
                              if (ib.requires_grad) ib.grad[ch] += sb;
                            }
                          }
                          if (ix.requires_grad) {
                            std::vector<T> gxhat(n.grad.size());
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t i = 0; i < hw; ++i) gxhat[ch * hw + i] = n.grad[ch * hw + i] * ig.value[ch];
                            detail::normalize_groups_backward(gxhat, xhat, rstd, groups, gsize, ix.grad);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution and resampling
// ---------------------------------------------------------------------------

/// Zero-padded 2-D cross-correlation of x[Cin, H, W] with kernel[Cout, Cin, k, k].
///
/// Lowered to one GEMM over an im2col buffer; the backward pass reuses the
/// buffer for the kernel gradient and folds the column gradient back with
/// col2im.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  using detail::owned;
  using detail::RowMat;
  using detail::store;
  if (x.rank() != 3 || kernel.rank() != 4) throw DimensionError("conv2d: expected x[C,H,W] and kernel[Co,Ci,k,k]");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin)
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " + std::to_string(kernel.dim(1)));
  if (kernel.dim(3) != k || k % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (h + 2 * padding < k || w + 2 * padding < k) throw DimensionError("conv2d: kernel larger than padded input");
  if (bias.defined() && bias.numel() != cout) throw DimensionError("conv2d: bias length mismatch");
  const std::size_t ho = (h + 2 * padding - k) / stride + 1, wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t rows = cin * k * k, cols = ho * wo;

  // cols[(c,ky,kx), (oy,ox)] = x[c, oy*s+ky-p, ox*s+kx-p] or 0
  RowMat<T> col = RowMat<T>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const auto& xv = x.vec();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((c * k + ky) * k + kx) * cols;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const T* src = xv.data() + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[oy * wo + ox] = src[ix];
          }
        }
      }

  std::vector<T> out(cout * cols);
  store(out.data(), owned(kernel.vec().data(), cout, rows) * col, false);
  if (bias.defined())
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t j = 0; j < cols; ++j) out[o * cols + j] += bias[o];

  std::vector<Tensor<T>> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(Shape{cout, ho, wo}, std::move(out), std::move(inputs), [=, col = std::move(col)](Node<T>& n) {
    auto& ix = *n.inputs[0];
    auto& ik = *n.inputs[1];
    const auto G = owned(n.grad.data(), cout, cols);
    if (ik.requires_grad) store(ik.grad.data(), G * col.transpose(), true);
    if (n.inputs.size() > 2 && n.inputs[2]->requires_grad) {
      auto& ib = *n.inputs[2];
      for (std::size_t o = 0; o < cout; ++o) {
        T acc = T(0);
        for (std::size_t j = 0; j < cols; ++j) acc += n.grad[o * cols + j];
        ib.grad[o] += acc;
      }
    }
    if (ix.requires_grad) {
      const RowMat<T> gcol = owned(ik.value.data(), cout, rows).transpose() * G;
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T* src = gcol.data() + ((c * k + ky) * k + kx) * cols;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              T* dst = ix.grad.data() + (c * h + static_cast<std::size_t>(iy)) * w;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long xx = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                if (xx >= 0 && xx < static_cast<long>(w)) dst[xx] += src[oy * wo + ox];
              }
            }
          }
    }
  });
}

/// Nearest-neighbour 2x upsampling of x[C, H, W].
template <class T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("upsample2x: input must be [C,H,W]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<std::size_t> idx(c * 4 * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) idx[(ch * 2 * h + y) * 2 * w + xx] = (ch * h + y / 2) * w + xx / 2;
  return gather(x, std::move(idx), Shape{c, 2 * h, 2 * w});
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product self-attention on x[L, D].
///
/// Projection weights are [D, D] and applied as x Wᵀ. When `weights_out`
/// is given it receives the per-head [L, L] attention matrices.
template <class T>
Tensor<T> multihead_attention(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv,
                              const Tensor<T>& wo, std::size_t heads, std::vector<Tensor<T>>* weights_out = nullptr) {
  if (x.rank() != 2) throw DimensionError("multihead_attention: input must be [L, D]");
  const std::size_t l = x.dim(0), d = x.dim(1);
  if (l == 0) throw DimensionError("multihead_attention: empty sequence");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("multihead_attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  for (const auto* wm : {&wq, &wk, &wv, &wo})
    if (wm->rank() != 2 || wm->dim(0) != d || wm->dim(1) != d) throw DimensionError("multihead_attention: projections must be [D, D]");
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  const Tensor<T> q = matmul(x, wq, false, true);
  const Tensor<T> k = matmul(x, wk, false, true);
  const Tensor<T> v = matmul(x, wv, false, true);
  std::vector<Tensor<T>> head_out;
  head_out.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const Tensor<T> qh = slice_cols(q, hd * dh, (hd + 1) * dh);
    const Tensor<T> kh = slice_cols(k, hd * dh, (hd + 1) * dh);
    const Tensor<T> vh = slice_cols(v, hd * dh, (hd + 1) * dh);
    const Tensor<T> attn = softmax_rows(scale(matmul(qh, kh, false, true), inv_sqrt));
    if (weights_out) weights_out->push_back(attn);
    head_out.push_back(matmul(attn, vh));
  }
  // stacked is [heads * L, dh]; interleave back to [L, D]
  const Tensor<T> stacked = concat0(head_out);
  std::vector<std::size_t> idx(l * d);
  for (std::size_t r = 0; r < l; ++r)
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t j = 0; j < dh; ++j) idx[r * d + hd * dh + j] = (hd * l + r) * dh + j;
  const Tensor<T> merged = gather(stacked, std::move(idx), Shape{l, d});
  return matmul(merged, wo, false, true);
}

}  // namespace beamckm
