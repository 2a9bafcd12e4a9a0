// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "beamckm/tensor.hpp"

namespace beamckm {

/// Moment estimates for a fixed, ordered parameter list.
template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step_count = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(const std::vector<Tensor<T>>& params, double lr_, double beta1_ = 0.9, double beta2_ = 0.999,
            double eps_ = 1e-8)
      : lr(lr_), beta1(beta1_), beta2(beta2_), eps(eps_) {
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }
};

/// One bias-corrected Adam update. Gradients are left in place.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("adam_step: state has " + std::to_string(state.m.size()) + " slots for " +
                        std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel())
      throw ContractError("adam_step: moment shape mismatch for parameter " + std::to_string(i));
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(state.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(state.beta2, t));
  const T lr = static_cast<T>(state.lr), eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].values();
    auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const T g = grad[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      const T mhat = m[j] / c1;
      const T vhat = v[j] / c2;
      values[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

/// Allocates (if needed) and zeroes every gradient buffer.
template <class T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) {
    p.grad();
    p.zero_grad();
  }
}

}  // namespace beamckm
