// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "beamckm/ops.hpp"
#include "beamckm/rng.hpp"

namespace beamckm {

/// Arrays are indexed by t - 1 for t in 1..T.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  void check_t(std::size_t t) const {
    if (t < 1 || t > T) throw ContractError("diffusion step t=" + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
  double beta_at(std::size_t t) const { return check_t(t), beta[t - 1]; }
  double alpha_at(std::size_t t) const { return check_t(t), alpha[t - 1]; }
  double alpha_bar_at(std::size_t t) const { return check_t(t), alpha_bar[t - 1]; }
  double sigma_at(std::size_t t) const { return check_t(t), sigma[t - 1]; }
};

/// Linear β from beta_1 to beta_T inclusive; σ_t = √β_t except σ_1 = 0.
inline NoiseSchedule make_schedule(std::size_t T, double beta_1, double beta_T) {
  if (T < 1) throw ConfigError("schedule: T must be at least 1");
  if (!(beta_1 > 0.0 && beta_1 < beta_T && beta_T < 1.0)) throw ConfigError("schedule: need 0 < beta_1 < beta_T < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    // endpoints are pinned so they are exact
    if (i == 0) s.beta[i] = beta_1;
    else if (i == T - 1) s.beta[i] = beta_T;
    else s.beta[i] = beta_1 + (beta_T - beta_1) * static_cast<double>(i) / static_cast<double>(T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
    s.sigma[i] = i == 0 ? 0.0 : std::sqrt(s.beta[i]);
  }
  return s;
}

/// √ᾱ_t z0 + √(1 − ᾱ_t) ε.
template <class T>
Tensor<T> q_sample(const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar_at(t);
  if (z0.shape() != eps.shape()) throw DimensionError("q_sample: z0 and eps shapes differ");
  return add(scale(z0, static_cast<T>(std::sqrt(ab))), scale(eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

template <class T>
Tensor<T> standard_normal(Shape shape, Rng& rng) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>(std::move(shape), std::move(v));
}

/// One element of a denoising batch.
template <class T>
struct DiffusionExample {
  Tensor<T> z0;
  Tensor<T> c_env;
  Tensor<T> w;
  std::size_t t = 1;
  Tensor<T> eps;
};

/// ε_θ(z_t, c_env, t, w).
template <class T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>& z_t, const Tensor<T>& c_env, std::size_t t, const Tensor<T>& w)>;

/// Mean over batch and elements of (ε − ε_θ(z_t, ...))².
template <class T>
Tensor<T> training_loss(const std::vector<DiffusionExample<T>>& batch, const NoisePredictor<T>& model, const NoiseSchedule& sched) {
  if (batch.empty()) throw ContractError("training_loss: empty batch");
  std::vector<Tensor<T>> per;
  per.reserve(batch.size());
  for (const auto& ex : batch) {
    const Tensor<T> zt = q_sample(ex.z0, ex.t, ex.eps, sched);
    const Tensor<T> pred = model(zt, ex.c_env, ex.t, ex.w);
    if (pred.shape() != ex.eps.shape()) throw DimensionError("training_loss: prediction shape " + shape_str(pred.shape()));
    per.push_back(sum(square(sub(ex.eps, pred))));
  }
  Tensor<T> total = per.size() == 1 ? per[0] : sum(concat0(per));
  return scale(total, T(1) / static_cast<T>(batch.size() * batch[0].eps.numel()));
}

/// z_{t−1} = (z_t − (1 − α_t)/√(1 − ᾱ_t) ε̂) / √α_t + σ_t z, z ~ N(0, I) for
/// t > 1 and z = 0 at t = 1.
template <class T>
Tensor<T> p_sample_step(const Tensor<T>& z_t, std::size_t t, const std::function<Tensor<T>(const Tensor<T>&, std::size_t)>& eps_model,
                        const NoiseSchedule& sched, Rng& rng) {
  sched.check_t(t);
  const Tensor<T> eps_hat = eps_model(z_t, t);
  if (eps_hat.shape() != z_t.shape()) throw DimensionError("p_sample_step: prediction shape " + shape_str(eps_hat.shape()));
  const double a = sched.alpha_at(t), ab = sched.alpha_bar_at(t), sig = sched.sigma_at(t);
  const double c1 = 1.0 / std::sqrt(a), c2 = (1.0 - a) / std::sqrt(1.0 - ab);
  std::vector<T> out(z_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = c1 * (static_cast<double>(z_t[i]) - c2 * static_cast<double>(eps_hat[i]));
    if (t > 1) v += sig * rng.normal();
    out[i] = static_cast<T>(v);
  }
  return Tensor<T>(z_t.shape(), std::move(out));
}

/// Full ancestral chain from z_T ~ N(0, I) down to z_0.
template <class T>
Tensor<T> sample_chain(Shape shape, const std::function<Tensor<T>(const Tensor<T>&, std::size_t)>& eps_model,
                       const NoiseSchedule& sched, Rng& rng) {
  NoGradGuard no_grad;
  Tensor<T> z = standard_normal<T>(std::move(shape), rng);
  for (std::size_t t = sched.T; t >= 1; --t) z = p_sample_step(z, t, eps_model, sched, rng);
  return z;
}

}  // namespace beamckm
