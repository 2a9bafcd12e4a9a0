// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "beamckm/nn.hpp"

namespace beamckm {

struct VaeConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t latent_channels = 4;
  std::vector<std::size_t> enc_channels{32, 64, 128};  // one entry per downsampling stage
  std::vector<std::size_t> dec_channels{64, 32, 16};
  double kl_weight = 1e-6;

  /// Input 256x256, latent 8x32x32.
  static VaeConfig paper_scale() {
    VaeConfig c;
    c.height = c.width = 256;
    c.latent_channels = 8;
    c.enc_channels = {64, 128, 256};
    c.dec_channels = {128, 64, 32};
    return c;
  }

  std::size_t factor() const { return std::size_t{1} << enc_channels.size(); }
  std::size_t latent_h() const { return height / factor(); }
  std::size_t latent_w() const { return width / factor(); }

  void validate() const {
    if (enc_channels.empty()) throw ConfigError("vae: need at least one downsampling stage");
    if (dec_channels.size() != enc_channels.size()) throw ConfigError("vae: encoder and decoder stage counts differ");
    if (latent_channels == 0) throw ConfigError("vae: latent_channels must be positive");
    for (auto c : enc_channels)
      if (c == 0) throw ConfigError("vae: zero-width encoder stage");
    for (auto c : dec_channels)
      if (c == 0) throw ConfigError("vae: zero-width decoder stage");
    if (height % factor() != 0 || width % factor() != 0)
      throw ConfigError("vae: " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by f=" + std::to_string(factor()));
    if (kl_weight < 0) throw ConfigError("vae: negative kl_weight");
  }
};

inline nlohmann::json to_json(const VaeConfig& c) {
  return {{"height", c.height},          {"width", c.width},          {"latent_channels", c.latent_channels},
          {"enc_channels", c.enc_channels}, {"dec_channels", c.dec_channels}, {"kl_weight", c.kl_weight}};
}

template <class T>
struct LatentDistribution {
  Tensor<T> mu;       // [D_lat, h, w]
  Tensor<T> log_var;  // same shape, clamped to [-30, 20]
};

/// z = mu + exp(log_var / 2) * noise.
template <class T>
Tensor<T> sample_latent(const LatentDistribution<T>& dist, const Tensor<T>& noise) {
  if (noise.shape() != dist.mu.shape())
    throw DimensionError("sample_latent: noise " + shape_str(noise.shape()) + " vs mu " + shape_str(dist.mu.shape()));
  return add(dist.mu, mul(exp(scale(dist.log_var, T(0.5))), noise));
}

/// ½ Σ (exp(log_var) + mu² − 1 − log_var).
template <class T>
Tensor<T> kl_divergence(const LatentDistribution<T>& dist) {
  const Tensor<T> terms = sub(add(exp(dist.log_var), square(dist.mu)), add_scalar(dist.log_var, T(1)));
  return scale(sum(terms), T(0.5));
}

/// Convolutional VAE: conv -> [Downsample -> ResNetBlock] x S -> map_latent
/// and conv -> [ResNetBlock -> Upsample -> Conv] x S -> final -> Sigmoid.
/// Downsampling is a stride-2 3x3 conv, upsampling nearest-neighbour.
template <class T>
class Vae {
 public:
  Vae() = default;
  Vae(VaeConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& enc = cfg_.enc_channels;
    const auto& dec = cfg_.dec_channels;
    enc_in_ = Conv2d<T>(1, enc[0], 3, 1, rng);
    std::size_t c = enc[0];
    for (std::size_t s = 0; s < enc.size(); ++s) {
      downs_.emplace_back(c, c, 3, 2, rng);
      enc_blocks_.emplace_back(c, enc[s], rng);
      c = enc[s];
    }
    map_latent_ = Conv2d<T>(c, 2 * cfg_.latent_channels, 3, 1, rng);
    dec_in_ = Conv2d<T>(cfg_.latent_channels, c, 3, 1, rng);
    for (std::size_t s = 0; s < dec.size(); ++s) {
      dec_blocks_.emplace_back(c, dec[s], rng);
      dec_convs_.emplace_back(dec[s], dec[s], 3, 1, rng);
      c = dec[s];
    }
    final_ = Conv2d<T>(c, 1, 3, 1, rng);
  }

  const VaeConfig& config() const { return cfg_; }

  LatentDistribution<T> encode(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) != 1) throw DimensionError("vae.encode: expected [1,H,W], got " + shape_str(x.shape()));
    const std::size_t f = cfg_.factor();
    if (x.dim(1) % f != 0 || x.dim(2) % f != 0)
      throw ConfigError("vae.encode: " + shape_str(x.shape()) + " not divisible by f=" + std::to_string(f));
    Tensor<T> h = enc_in_(x);
    for (std::size_t s = 0; s < downs_.size(); ++s) h = enc_blocks_[s](downs_[s](h));
    const Tensor<T> m = map_latent_(h);
    const std::size_t d = cfg_.latent_channels;
    return {slice0(m, 0, d), clamp(slice0(m, d, 2 * d), T(-30), T(20))};
  }

  Tensor<T> decode(const Tensor<T>& z) const {
    if (z.rank() != 3 || z.dim(0) != cfg_.latent_channels)
      throw DimensionError("vae.decode: expected [" + std::to_string(cfg_.latent_channels) + ",h,w], got " + shape_str(z.shape()));
    Tensor<T> h = dec_in_(z);
    for (std::size_t s = 0; s < dec_blocks_.size(); ++s) h = dec_convs_[s](upsample2x(dec_blocks_[s](h)));
    return sigmoid(final_(h));
  }

  ParamList<T> params() const {
    ParamList<T> out;
    enc_in_.collect(out, "enc.conv_in");
    for (std::size_t s = 0; s < downs_.size(); ++s) {
      downs_[s].collect(out, "enc.stage" + std::to_string(s) + ".down");
      enc_blocks_[s].collect(out, "enc.stage" + std::to_string(s) + ".block");
    }
    map_latent_.collect(out, "enc.map_latent");
    dec_in_.collect(out, "dec.conv_in");
    for (std::size_t s = 0; s < dec_blocks_.size(); ++s) {
      dec_blocks_[s].collect(out, "dec.stage" + std::to_string(s) + ".block");
      dec_convs_[s].collect(out, "dec.stage" + std::to_string(s) + ".conv");
    }
    final_.collect(out, "dec.final");
    return out;
  }

 private:
  VaeConfig cfg_;
  Conv2d<T> enc_in_;
  std::vector<Conv2d<T>> downs_;
  std::vector<ResNetBlock<T>> enc_blocks_;
  Conv2d<T> map_latent_;
  Conv2d<T> dec_in_;
  std::vector<ResNetBlock<T>> dec_blocks_;
  std::vector<Conv2d<T>> dec_convs_;
  Conv2d<T> final_;
};

/// Mean-over-pixels reconstruction error plus λ_KL · KL to the unit prior.
template <class T>
Tensor<T> vae_loss(const Vae<T>& vae, const Tensor<T>& map_norm, const LatentDistribution<T>& dist, const Tensor<T>& noise) {
  const Tensor<T> recon = mse(map_norm, vae.decode(sample_latent(dist, noise)));
  return add(recon, scale(kl_divergence(dist), static_cast<T>(vae.config().kl_weight)));
}

}  // namespace beamckm
