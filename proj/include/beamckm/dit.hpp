// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <nlohmann/json.hpp>
#include <vector>

#include "beamckm/nn.hpp"

namespace beamckm {

struct DitConfig {
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t hidden = 128;
  std::size_t patch = 2;
  std::size_t latent_channels = 4;
  std::size_t cond_channels = 16;
  std::size_t latent_h = 8;
  std::size_t latent_w = 8;
  std::size_t n_antennas = 8;
  std::size_t mlp_ratio = 4;
  std::size_t max_timestep = 500;
  bool beam_conditioning = true;  // false: w_emb forced to zero (ablation)

  static DitConfig paper_scale() {
    DitConfig c;
    c.depth = 12;
    c.heads = 8;
    c.hidden = 512;
    c.latent_channels = 8;
    c.cond_channels = 32;
    c.latent_h = c.latent_w = 32;
    c.n_antennas = 16;
    return c;
  }

  std::size_t tokens() const { return (latent_h / patch) * (latent_w / patch); }
  std::size_t patch_dim() const { return patch * patch * (latent_channels + cond_channels); }

  void validate() const {
    if (depth == 0 || hidden == 0 || patch == 0 || latent_channels == 0 || n_antennas == 0)
      throw ConfigError("dit: sizes must be positive");
    if (heads == 0 || hidden % heads != 0) throw ConfigError("dit: hidden " + std::to_string(hidden) + " not divisible by heads");
    if (hidden % 2 != 0) throw ConfigError("dit: hidden must be even for the sinusoidal encoding");
    if (latent_h % patch != 0 || latent_w % patch != 0) throw ConfigError("dit: latent dims not divisible by patch size");
    if (max_timestep == 0) throw ConfigError("dit: max_timestep must be positive");
  }
};

inline nlohmann::json to_json(const DitConfig& c) {
  return {{"depth", c.depth},
          {"heads", c.heads},
          {"hidden", c.hidden},
          {"patch", c.patch},
          {"latent_channels", c.latent_channels},
          {"cond_channels", c.cond_channels},
          {"latent_h", c.latent_h},
          {"latent_w", c.latent_w},
          {"n_antennas", c.n_antennas},
          {"mlp_ratio", c.mlp_ratio},
          {"max_timestep", c.max_timestep},
          {"beam_conditioning", c.beam_conditioning}};
}

/// Per-site scale and shift.
template <class T>
struct Modulation {
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Values observed during one forward pass.
template <class T>
struct DitTrace {
  std::vector<T> t_emb;
  std::vector<T> w_emb;
  std::vector<T> c_emb;
  std::vector<std::vector<T>> gamma;  // 2 per block, then the final site
  std::vector<std::vector<T>> beta;
  std::vector<std::vector<T>> tokens;  // after tokenize, then after each block
};

/// Interleaved [sin(t ω_0), cos(t ω_0), sin(t ω_1), ...] with
/// ω_i = 10000^(-i / (dim/2 - 1)), geometric from 1 down to 1e-4.
template <class T>
std::vector<T> sinusoidal_encoding(double t, std::size_t dim) {
  std::vector<T> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double w = half > 1 ? std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half - 1)) : 1.0;
    e[2 * i] = static_cast<T>(std::sin(t * w));
    e[2 * i + 1] = static_cast<T>(std::cos(t * w));
  }
  return e;
}

/// (1 + γ) ⊙ LN(f) + β, with γ and β broadcast over tokens.
template <class T>
Tensor<T> adaln_apply(const Tensor<T>& f_in, const Modulation<T>& mod, T eps = T(1e-6)) {
  return add_rows(mul_rows(layer_norm(f_in, eps), add_scalar(mod.gamma, T(1))), mod.beta);
}

/// Channel concatenation, z_t first.
template <class T>
Tensor<T> fuse_spatial(const Tensor<T>& z_t, const Tensor<T>& c_env) {
  if (z_t.rank() != 3 || c_env.rank() != 3 || z_t.dim(1) != c_env.dim(1) || z_t.dim(2) != c_env.dim(2))
    throw DimensionError("fuse_spatial: " + shape_str(z_t.shape()) + " vs " + shape_str(c_env.shape()));
  return concat0(std::vector<Tensor<T>>{z_t, c_env});
}

/// Gather indices turning x[C, H, W] into [(H/p)(W/p), C p p] patches whose
/// rows follow a conv kernel's [C, ky, kx] layout.
inline std::vector<std::size_t> patch_indices(std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  std::vector<std::size_t> idx;
  idx.reserve(c * h * w);
  for (std::size_t ty = 0; ty < h / p; ++ty)
    for (std::size_t tx = 0; tx < w / p; ++tx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ky = 0; ky < p; ++ky)
          for (std::size_t kx = 0; kx < p; ++kx) idx.push_back((ch * h + ty * p + ky) * w + tx * p + kx);
  return idx;
}

template <class T>
struct DitBlock {
  Linear<T> mod_attn;  // c -> [γ, β], zero-init
  Tensor<T> wq, wk, wv, wo;
  Linear<T> mod_mlp;
  Linear<T> fc1, fc2;

  DitBlock() = default;
  DitBlock(std::size_t d, std::size_t ratio, Rng& rng)
      : mod_attn(d, 2 * d, rng, true),
        wq(init_weight<T>(Shape{d, d}, d, rng)),
        wk(init_weight<T>(Shape{d, d}, d, rng)),
        wv(init_weight<T>(Shape{d, d}, d, rng)),
        wo(init_weight<T>(Shape{d, d}, d, rng, true)),
        mod_mlp(d, 2 * d, rng, true),
        fc1(d, ratio * d, rng),
        fc2(ratio * d, d, rng, true) {}

  void collect(ParamList<T>& out, const std::string& prefix) const {
    mod_attn.collect(out, prefix + ".mod_attn");
    out.push_back({prefix + ".attn.wq", wq});
    out.push_back({prefix + ".attn.wk", wk});
    out.push_back({prefix + ".attn.wv", wv});
    out.push_back({prefix + ".attn.wo", wo});
    mod_mlp.collect(out, prefix + ".mod_mlp");
    fc1.collect(out, prefix + ".mlp.fc1");
    fc2.collect(out, prefix + ".mlp.fc2");
  }
};

/// Noise predictor ε_θ(z_t, c_env, t, w).
template <class T>
class BeamDit {
 public:
  BeamDit() = default;
  BeamDit(DitConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.hidden;
    x_emb_ = Linear<T>(cfg_.patch_dim(), d, rng);
    std::vector<T> pos(cfg_.tokens() * d);
    for (auto& v : pos) v = static_cast<T>(0.02 * rng.normal());
    pos_emb_ = Tensor<T>::parameter(Shape{cfg_.tokens(), d}, std::move(pos));
    t_mlp_ = Mlp2<T>(d, d, d, rng);
    w_mlp_ = Mlp2<T>(2 * cfg_.n_antennas, d, d, rng);
    for (std::size_t b = 0; b < cfg_.depth; ++b) blocks_.emplace_back(d, cfg_.mlp_ratio, rng);
    mod_final_ = Linear<T>(d, 2 * d, rng, true);
    out_ = Linear<T>(d, cfg_.patch * cfg_.patch * cfg_.latent_channels, rng, true);
  }

  const DitConfig& config() const { return cfg_; }

  Tensor<T> embed_timestep(std::size_t t) const {
    if (t > cfg_.max_timestep)
      throw ContractError("embed_timestep: t=" + std::to_string(t) + " outside [0, " + std::to_string(cfg_.max_timestep) + "]");
    return t_mlp_(Tensor<T>(Shape{cfg_.hidden}, sinusoidal_encoding<T>(static_cast<double>(t), cfg_.hidden)));
  }

  /// w as interleaved [2 N_t] reals.
  Tensor<T> embed_beam(const Tensor<T>& w) const {
    if (w.rank() != 1 || w.dim(0) != 2 * cfg_.n_antennas)
      throw DimensionError("embed_beam: expected [" + std::to_string(2 * cfg_.n_antennas) + "], got " + shape_str(w.shape()));
    return w_mlp_(w);
  }

  /// [γ, β] = A_mod SiLU(c) + b_mod at a site: 2 b for attention, 2 b + 1
  /// for MLP in block b, 2 depth for the final layer.
  Modulation<T> modulate(const Tensor<T>& c_emb, std::size_t site) const {
    const Linear<T>* lin = nullptr;
    if (site == 2 * cfg_.depth) lin = &mod_final_;
    else if (site < 2 * cfg_.depth) lin = site % 2 == 0 ? &blocks_[site / 2].mod_attn : &blocks_[site / 2].mod_mlp;
    else throw ContractError("modulate: site out of range");
    const Tensor<T> gb = (*lin)(silu(c_emb));
    return {slice0(gb, 0, cfg_.hidden), slice0(gb, cfg_.hidden, 2 * cfg_.hidden)};
  }

  /// [L, D] tokens with positional embedding added.
  Tensor<T> tokenize(const Tensor<T>& fused) const {
    const std::size_t p = cfg_.patch;
    if (fused.rank() != 3) throw DimensionError("tokenize: expected [C,h,w]");
    if (fused.dim(1) % p != 0 || fused.dim(2) % p != 0) throw ConfigError("tokenize: spatial dims not divisible by patch size");
    if (fused.dim(0) != cfg_.latent_channels + cfg_.cond_channels || fused.dim(1) != cfg_.latent_h || fused.dim(2) != cfg_.latent_w)
      throw DimensionError("tokenize: fused input " + shape_str(fused.shape()) + " does not match config");
    const Tensor<T> patches =
        gather(fused, patch_indices(fused.dim(0), fused.dim(1), fused.dim(2), p), Shape{cfg_.tokens(), cfg_.patch_dim()});
    return add(x_emb_(patches), pos_emb_);
  }

  /// [L, p² D_lat] -> [D_lat, h, w].
  Tensor<T> unpatchify(const Tensor<T>& x) const {
    const std::size_t c = cfg_.latent_channels, h = cfg_.latent_h, w = cfg_.latent_w;
    const auto fwd = patch_indices(c, h, w, cfg_.patch);
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return gather(x, std::move(inv), Shape{c, h, w});
  }

  /// c_emb = t_emb + w_emb (w_emb ≡ 0 when beam conditioning is off).
  Tensor<T> global_token(std::size_t t, const Tensor<T>& w) const {
    const Tensor<T> te = embed_timestep(t);
    if (!cfg_.beam_conditioning) {
      if (w.defined() && (w.rank() != 1 || w.dim(0) != 2 * cfg_.n_antennas)) throw DimensionError("dit: bad beam length");
      return te;
    }
    return add(te, embed_beam(w));
  }

  Tensor<T> forward(const Tensor<T>& z_t, const Tensor<T>& c_env, std::size_t t, const Tensor<T>& w,
                    DitTrace<T>* trace = nullptr) const {
    if (z_t.rank() != 3 || z_t.dim(0) != cfg_.latent_channels) throw DimensionError("dit: z_t shape " + shape_str(z_t.shape()));
    const Tensor<T> c = global_token(t, w);
    if (trace) {
      *trace = {};
      trace->t_emb = embed_timestep(t).vec();
      trace->w_emb = cfg_.beam_conditioning ? embed_beam(w).vec() : std::vector<T>(cfg_.hidden, T(0));
      trace->c_emb = c.vec();
    }
    auto site = [&](std::size_t s) {
      Modulation<T> m = modulate(c, s);
      if (trace) {
        trace->gamma.push_back(m.gamma.vec());
        trace->beta.push_back(m.beta.vec());
      }
      return m;
    };
    Tensor<T> x = tokenize(fuse_spatial(z_t, c_env));
    if (trace) trace->tokens.push_back(x.vec());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const DitBlock<T>& blk = blocks_[b];
      const Tensor<T> a = adaln_apply(x, site(2 * b));
      x = add(x, multihead_attention(a, blk.wq, blk.wk, blk.wv, blk.wo, cfg_.heads));
      const Tensor<T> m = adaln_apply(x, site(2 * b + 1));
      x = add(x, blk.fc2(gelu(blk.fc1(m))));
      if (trace) trace->tokens.push_back(x.vec());
    }
    x = adaln_apply(x, site(2 * cfg_.depth));
    return unpatchify(out_(x));
  }

  ParamList<T> params() const {
    ParamList<T> out;
    x_emb_.collect(out, "dit.x_emb");
    out.push_back({"dit.pos_emb", pos_emb_});
    t_mlp_.collect(out, "dit.t_emb");
    w_mlp_.collect(out, "dit.w_emb");
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, "dit.block" + std::to_string(b));
    mod_final_.collect(out, "dit.final.mod");
    out_.collect(out, "dit.final.linear");
    return out;
  }

  // direct access for tests and instrumentation
  const std::vector<DitBlock<T>>& blocks() const { return blocks_; }
  const Linear<T>& final_modulation() const { return mod_final_; }
  const Linear<T>& output_head() const { return out_; }
  const Mlp2<T>& beam_mlp() const { return w_mlp_; }
  const Tensor<T>& pos_emb() const { return pos_emb_; }

 private:
  DitConfig cfg_;
  Linear<T> x_emb_;
  Tensor<T> pos_emb_;
  Mlp2<T> t_mlp_;
  Mlp2<T> w_mlp_;
  std::vector<DitBlock<T>> blocks_;
  Linear<T> mod_final_;
  Linear<T> out_;
};

}  // namespace beamckm
