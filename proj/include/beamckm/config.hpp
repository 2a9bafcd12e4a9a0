// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "beamckm/condition_encoder.hpp"
#include "beamckm/dataset.hpp"
#include "beamckm/diffusion.hpp"
#include "beamckm/dit.hpp"
#include "beamckm/serialize.hpp"
#include "beamckm/vae.hpp"

namespace beamckm {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Optimizer and loop settings for one training stage.
struct TrainConfig {
  std::size_t steps = 0;
  std::size_t batch = 4;  // VAE: maps per step; DiT: beams per environment
  std::size_t envs_per_batch = 2;  // DiT only
  double lr = 1e-4;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
  std::uint64_t seed = 0;

  void validate(const std::string& section) const {
    if (steps == 0) throw ConfigError(section + ".steps must be positive");
    if (batch == 0 || envs_per_batch == 0) throw ConfigError(section + ": batch sizes must be positive");
    if (!(lr > 0)) throw ConfigError(section + ".lr must be positive");
    if (log_every == 0) throw ConfigError(section + ".log_every must be positive");
  }
};

struct DiffusionConfig {
  std::size_t T = 500;
  double beta_1 = 4e-5;
  double beta_T = 5e-3;

  NoiseSchedule schedule() const { return make_schedule(T, beta_1, beta_T); }
};

struct EvalConfig {
  std::uint64_t sample_seed = 7;
  int lobe_radius_px = 8;
  int lobe_bins = 32;
  bool write_png = true;
};

/// Output locations, each relative to run_dir unless absolute. A relative
/// run_dir is resolved against $BEAMCKM_RUN_ROOT when set.
struct PathConfig {
  std::string run_dir = "run";
  std::string dataset = "data";
  std::string vae = "vae";
  std::string dit = "dit";
  std::string eval = "eval";
  std::string infer = "infer";
};

inline constexpr const char* kRunRootEnv = "BEAMCKM_RUN_ROOT";

struct RunConfig {
  DatasetConfig dataset;
  VaeConfig vae;
  CondEncoderConfig cond;
  DitConfig dit;  // latent/cond/antenna/timestep fields are derived, see dit_config()
  DiffusionConfig diffusion;
  TrainConfig vae_train{1000, 4, 1, 1e-3, 10, 0, 11};
  TrainConfig dit_train{4000, 4, 2, 1e-3, 10, 0, 23};
  EvalConfig eval;
  PathConfig paths;

  DitConfig dit_config() const {
    DitConfig d = dit;
    d.latent_channels = vae.latent_channels;
    d.latent_h = vae.latent_h();
    d.latent_w = vae.latent_w();
    d.cond_channels = cond.out_channels;
    d.n_antennas = dataset.channel.n_antennas;
    d.max_timestep = diffusion.T;
    return d;
  }

  void validate() const {
    dataset.validate();
    if (vae.height != static_cast<std::size_t>(dataset.scene.height) || vae.width != static_cast<std::size_t>(dataset.scene.width))
      throw ConfigError("vae input size must equal the scene grid");
    vae.validate();
    cond.validate();
    if (cond.factor() != vae.factor()) throw ConfigError("condition encoder and VAE must downsample by the same factor");
    dit_config().validate();
    diffusion.schedule();
    vae_train.validate("vae_train");
    dit_train.validate("dit_train");
    if (eval.lobe_bins < 1 || eval.lobe_radius_px < 1) throw ConfigError("eval: lobe_bins and lobe_radius_px must be positive");
  }

  fs::path run_dir() const {
    fs::path p(paths.run_dir);
    if (p.is_relative())
      if (const char* root = std::getenv(kRunRootEnv); root && *root) p = fs::path(root) / p;
    return p;
  }
  fs::path under_run(const std::string& sub) const {
    const fs::path p(sub);
    return p.is_absolute() ? p : run_dir() / p;
  }
  fs::path dataset_dir() const { return under_run(paths.dataset); }
  fs::path vae_dir() const { return under_run(paths.vae); }
  fs::path dit_dir() const { return under_run(paths.dit); }
  fs::path eval_dir() const { return under_run(paths.eval); }
  fs::path infer_dir() const { return under_run(paths.infer); }
};

// ---- JSON ----

inline json to_json(const TrainConfig& c) {
  return {{"steps", c.steps}, {"batch", c.batch}, {"envs_per_batch", c.envs_per_batch}, {"lr", c.lr},
          {"log_every", c.log_every}, {"checkpoint_every", c.checkpoint_every}, {"seed", c.seed}};
}

inline json dit_user_json(const DitConfig& c) {
  return {{"depth", c.depth}, {"heads", c.heads}, {"hidden", c.hidden}, {"patch", c.patch}, {"mlp_ratio", c.mlp_ratio},
          {"beam_conditioning", c.beam_conditioning}};
}

inline json to_json(const RunConfig& r) {
  json j;
  j["dataset"] = to_json(r.dataset);
  j["vae"] = to_json(r.vae);
  j["cond"] = to_json(r.cond);
  j["dit"] = dit_user_json(r.dit);
  j["diffusion"] = {{"T", r.diffusion.T}, {"beta_1", r.diffusion.beta_1}, {"beta_T", r.diffusion.beta_T}};
  j["vae_train"] = to_json(r.vae_train);
  j["dit_train"] = to_json(r.dit_train);
  j["eval"] = {{"sample_seed", r.eval.sample_seed}, {"lobe_radius_px", r.eval.lobe_radius_px}, {"lobe_bins", r.eval.lobe_bins},
               {"write_png", r.eval.write_png}};
  j["paths"] = {{"run_dir", r.paths.run_dir}, {"dataset", r.paths.dataset}, {"vae", r.paths.vae},
                {"dit", r.paths.dit},         {"eval", r.paths.eval},       {"infer", r.paths.infer}};
  return j;
}

namespace detail {

inline void train_from_json(const json& j, TrainConfig& c, const std::string& s) {
  check_keys(j, {"steps", "batch", "envs_per_batch", "lr", "log_every", "checkpoint_every", "seed"}, s);
  read_key(j, "steps", c.steps, s);
  read_key(j, "batch", c.batch, s);
  read_key(j, "envs_per_batch", c.envs_per_batch, s);
  read_key(j, "lr", c.lr, s);
  read_key(j, "log_every", c.log_every, s);
  read_key(j, "checkpoint_every", c.checkpoint_every, s);
  read_key(j, "seed", c.seed, s);
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are configuration errors.
inline RunConfig run_config_from_json(const json& j) {
  using detail::check_keys;
  using detail::read_key;
  RunConfig r;
  check_keys(j, {"dataset", "vae", "cond", "dit", "diffusion", "vae_train", "dit_train", "eval", "paths"}, "config");
  if (j.contains("dataset")) r.dataset = dataset_config_from_json(j.at("dataset"));
  if (j.contains("vae")) {
    const json& v = j.at("vae");
    check_keys(v, {"height", "width", "latent_channels", "enc_channels", "dec_channels", "kl_weight"}, "vae");
    read_key(v, "height", r.vae.height, "vae");
    read_key(v, "width", r.vae.width, "vae");
    read_key(v, "latent_channels", r.vae.latent_channels, "vae");
    read_key(v, "enc_channels", r.vae.enc_channels, "vae");
    read_key(v, "dec_channels", r.vae.dec_channels, "vae");
    read_key(v, "kl_weight", r.vae.kl_weight, "vae");
  }
  if (j.contains("cond")) {
    const json& c = j.at("cond");
    check_keys(c, {"distance_channel", "head_channels", "channels", "out_channels"}, "cond");
    read_key(c, "distance_channel", r.cond.distance_channel, "cond");
    read_key(c, "head_channels", r.cond.head_channels, "cond");
    read_key(c, "channels", r.cond.channels, "cond");
    read_key(c, "out_channels", r.cond.out_channels, "cond");
  }
  if (j.contains("dit")) {
    const json& d = j.at("dit");
    check_keys(d, {"depth", "heads", "hidden", "patch", "mlp_ratio", "beam_conditioning"}, "dit");
    read_key(d, "depth", r.dit.depth, "dit");
    read_key(d, "heads", r.dit.heads, "dit");
    read_key(d, "hidden", r.dit.hidden, "dit");
    read_key(d, "patch", r.dit.patch, "dit");
    read_key(d, "mlp_ratio", r.dit.mlp_ratio, "dit");
    read_key(d, "beam_conditioning", r.dit.beam_conditioning, "dit");
  }
  if (j.contains("diffusion")) {
    const json& d = j.at("diffusion");
    check_keys(d, {"T", "beta_1", "beta_T"}, "diffusion");
    read_key(d, "T", r.diffusion.T, "diffusion");
    read_key(d, "beta_1", r.diffusion.beta_1, "diffusion");
    read_key(d, "beta_T", r.diffusion.beta_T, "diffusion");
  }
  if (j.contains("vae_train")) detail::train_from_json(j.at("vae_train"), r.vae_train, "vae_train");
  if (j.contains("dit_train")) detail::train_from_json(j.at("dit_train"), r.dit_train, "dit_train");
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, {"sample_seed", "lobe_radius_px", "lobe_bins", "write_png"}, "eval");
    read_key(e, "sample_seed", r.eval.sample_seed, "eval");
    read_key(e, "lobe_radius_px", r.eval.lobe_radius_px, "eval");
    read_key(e, "lobe_bins", r.eval.lobe_bins, "eval");
    read_key(e, "write_png", r.eval.write_png, "eval");
  }
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    check_keys(p, {"run_dir", "dataset", "vae", "dit", "eval", "infer"}, "paths");
    read_key(p, "run_dir", r.paths.run_dir, "paths");
    read_key(p, "dataset", r.paths.dataset, "paths");
    read_key(p, "vae", r.paths.vae, "paths");
    read_key(p, "dit", r.paths.dit, "paths");
    read_key(p, "eval", r.paths.eval, "paths");
    read_key(p, "infer", r.paths.infer, "paths");
  }
  return r;
}

/// Applies `a.b.c=value` assignments. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
inline void apply_overrides(json& j, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + s + "' is not key=value");
    std::string ptr = "/" + s.substr(0, eq);
    for (auto& ch : ptr)
      if (ch == '.') ch = '/';
    const std::string raw = s.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    try {
      j[json::json_pointer(ptr)] = value;
    } catch (const json::exception& e) {
      throw ConfigError("override '" + s + "': " + e.what());
    }
  }
}

/// Reads the file (if any), applies overrides, validates.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets = {}) {
  json j = json::object();
  if (!path.empty()) {
    if (!fs::exists(path)) throw ConfigError("config file " + path + " does not exist");
    try {
      j = json::parse(read_bytes(path));
    } catch (const json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  apply_overrides(j, sets);
  RunConfig r = run_config_from_json(j);
  r.validate();
  return r;
}

// Hashes cover the sections that shape an artifact; paths and evaluation
// settings are excluded so relocating a run keeps its provenance.

inline std::string vae_hash(const RunConfig& r) {
  const json j = to_json(r);
  return content_hash(json{{"dataset", j["dataset"]}, {"vae", j["vae"]}, {"vae_train", j["vae_train"]}});
}

inline std::string model_hash(const RunConfig& r) {
  json j = to_json(r);
  j.erase("paths");
  j.erase("eval");
  return content_hash(j);
}

}  // namespace beamckm
