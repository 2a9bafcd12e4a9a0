// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <nlohmann/json.hpp>
#include <vector>

#include "beamckm/nn.hpp"

namespace beamckm {

struct CondEncoderConfig {
  bool distance_channel = false;  // optional third input: normalized distance to tx
  std::size_t head_channels = 16;
  std::vector<std::size_t> channels{16, 32, 64};  // one ResNetBlock + Downsample per entry
  std::size_t out_channels = 16;                  // D_cond

  static CondEncoderConfig paper_scale() {
    CondEncoderConfig c;
    c.distance_channel = true;
    c.head_channels = 32;
    c.channels = {32, 64, 128};
    c.out_channels = 32;
    return c;
  }

  std::size_t in_channels() const { return distance_channel ? 3 : 2; }
  std::size_t factor() const { return std::size_t{1} << channels.size(); }

  void validate() const {
    if (channels.empty()) throw ConfigError("condition encoder: need at least one stage");
    if (head_channels == 0 || out_channels == 0) throw ConfigError("condition encoder: zero width");
  }
};

inline nlohmann::json to_json(const CondEncoderConfig& c) {
  return {{"distance_channel", c.distance_channel},
          {"head_channels", c.head_channels},
          {"channels", c.channels},
          {"out_channels", c.out_channels}};
}

/// head conv -> [ResNetBlock -> Downsample] x S -> zero-init out conv.
template <class T>
class ConditionEncoder {
 public:
  ConditionEncoder() = default;
  ConditionEncoder(CondEncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    head_ = Conv2d<T>(cfg_.in_channels(), cfg_.head_channels, 3, 1, rng);
    std::size_t c = cfg_.head_channels;
    for (auto ch : cfg_.channels) {
      blocks_.emplace_back(c, ch, rng);
      downs_.emplace_back(ch, ch, 3, 2, rng);
      c = ch;
    }
    out_ = Conv2d<T>(c, cfg_.out_channels, 3, 1, rng, /*zero_init=*/true);
  }

  const CondEncoderConfig& config() const { return cfg_; }

  /// Stacks the encoder input [C_in, H, W] from building and tx grids.
  Tensor<T> stack_inputs(const Tensor<T>& buildings, const Tensor<T>& tx_onehot) const {
    if (buildings.rank() != 3 || buildings.dim(0) != 1 || buildings.shape() != tx_onehot.shape())
      throw DimensionError("condition encoder: inputs " + shape_str(buildings.shape()) + " and " + shape_str(tx_onehot.shape()) +
                           " must both be [1,H,W]");
    std::size_t tx_idx = 0;
    T total = T(0);
    for (std::size_t i = 0; i < tx_onehot.numel(); ++i) {
      total += tx_onehot[i];
      if (tx_onehot[i] > tx_onehot[tx_idx]) tx_idx = i;
    }
    if (std::abs(static_cast<double>(total) - 1.0) > 1e-6) throw ContractError("condition encoder: tx map must sum to 1");
    std::vector<Tensor<T>> parts{buildings, tx_onehot};
    if (cfg_.distance_channel) {
      const std::size_t h = buildings.dim(1), w = buildings.dim(2);
      const double ty = static_cast<double>(tx_idx / w), tx = static_cast<double>(tx_idx % w);
      const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
      std::vector<T> d(h * w);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) d[r * w + c] = static_cast<T>(std::hypot(r - ty, c - tx) / diag);
      parts.push_back(Tensor<T>(Shape{1, h, w}, std::move(d)));
    }
    return concat0(parts);
  }

  /// c_env [D_cond, H/f, W/f].
  Tensor<T> operator()(const Tensor<T>& buildings, const Tensor<T>& tx_onehot) const {
    Tensor<T> h = head_(stack_inputs(buildings, tx_onehot));
    for (std::size_t s = 0; s < blocks_.size(); ++s) h = downs_[s](blocks_[s](h));
    return out_(h);
  }

  ParamList<T> params() const {
    ParamList<T> out;
    head_.collect(out, "cond.head");
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      blocks_[s].collect(out, "cond.stage" + std::to_string(s) + ".block");
      downs_[s].collect(out, "cond.stage" + std::to_string(s) + ".down");
    }
    out_.collect(out, "cond.out");
    return out;
  }

 private:
  CondEncoderConfig cfg_;
  Conv2d<T> head_;
  std::vector<ResNetBlock<T>> blocks_;
  std::vector<Conv2d<T>> downs_;
  Conv2d<T> out_;
};

}  // namespace beamckm
