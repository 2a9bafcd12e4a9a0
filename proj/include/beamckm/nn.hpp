// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "beamckm/ops.hpp"
#include "beamckm/rng.hpp"

namespace beamckm {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
std::vector<Tensor<T>> tensors_of(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; zeros when zero_init.
template <class T>
Tensor<T> init_weight(Shape shape, std::size_t fan_in, Rng& rng, bool zero_init = false) {
  std::vector<T> v(numel_of(shape), T(0));
  if (!zero_init) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  }
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

/// Group count for GroupNorm: 8 when it divides the channel count, else
/// the channel count itself below 8, else gcd(C, 8).
inline std::size_t default_groups(std::size_t channels) {
  if (channels % 8 == 0) return 8;
  if (channels < 8) return channels;
  return std::gcd(channels, std::size_t{8});
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false)
      : weight(init_weight<T>(Shape{out, in}, in, rng, zero_init)), bias(Tensor<T>::zeros(Shape{out}, true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  /// "same" padding (k / 2).
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, Rng& rng, bool zero_init = false)
      : weight(init_weight<T>(Shape{out, in, k, k}, in * k * k, rng, zero_init)),
        bias(Tensor<T>::zeros(Shape{out}, true)),
        stride(stride_),
        padding(k / 2) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct GroupNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::size_t groups = 1;
  T eps = T(1e-5);

  GroupNorm() = default;
  explicit GroupNorm(std::size_t channels)
      : gamma(Tensor<T>::full(Shape{channels}, T(1), true)),
        beta(Tensor<T>::zeros(Shape{channels}, true)),
        groups(default_groups(channels)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta, eps); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

/// GroupNorm -> SiLU -> Conv -> GroupNorm -> SiLU -> Conv, plus identity
/// (or 1x1 projection) skip.
template <class T>
struct ResNetBlock {
  GroupNorm<T> gn1;
  Conv2d<T> conv1;
  GroupNorm<T> gn2;
  Conv2d<T> conv2;
  std::optional<Conv2d<T>> skip;

  ResNetBlock() = default;
  ResNetBlock(std::size_t in, std::size_t out, Rng& rng)
      : gn1(in), conv1(in, out, 3, 1, rng), gn2(out), conv2(out, out, 3, 1, rng) {
    if (in != out) skip.emplace(in, out, 1, 1, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = conv1(silu(gn1(x)));
    h = conv2(silu(gn2(h)));
    return add(skip ? (*skip)(x) : x, h);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    gn1.collect(out, prefix + ".gn1");
    conv1.collect(out, prefix + ".conv1");
    gn2.collect(out, prefix + ".gn2");
    conv2.collect(out, prefix + ".conv2");
    if (skip) skip->collect(out, prefix + ".skip");
  }
};

/// Linear -> SiLU -> Linear.
template <class T>
struct Mlp2 {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp2() = default;
  Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(silu(fc1(x))); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

}  // namespace beamckm
