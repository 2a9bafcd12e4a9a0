// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "beamckm/adam.hpp"
#include "beamckm/config.hpp"
#include "beamckm/metrics.hpp"
#include "beamckm/png.hpp"

namespace beamckm {

// ---------------------------------------------------------------------------
// Shared plumbing

inline std::string scenario_split(const std::string& scenario) {
  if (scenario == "unseen-beams") return "unseen_beams";
  if (scenario == "unseen-locations") return "unseen_locations";
  throw ConfigError("unknown scenario '" + scenario + "' (expected unseen-beams or unseen-locations)");
}

/// Loads the dataset and checks it was generated from cfg.dataset.
inline Dataset load_dataset_for(const RunConfig& cfg) {
  Dataset ds = Dataset::load(cfg.dataset_dir());
  if (to_json(ds.config) != to_json(cfg.dataset))
    throw ConfigError("dataset at " + cfg.dataset_dir().string() + " was generated with a different dataset config");
  return ds;
}

/// Normalized [1, H, W] tensor of a dB map.
inline Tensor<float> map_tensor(const ChannelMap& m, double floor_db, double ceiling_db) {
  std::vector<float> v(m.values_db.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(normalize_db(m.values_db[i], floor_db, ceiling_db));
  return Tensor<float>(Shape{1, static_cast<std::size_t>(m.height_px), static_cast<std::size_t>(m.width_px)}, std::move(v));
}

struct EnvInputs {
  Tensor<float> buildings;
  Tensor<float> tx;
};

inline EnvInputs env_inputs(const EnvScene& s) {
  const Shape shape{1, static_cast<std::size_t>(s.height_px), static_cast<std::size_t>(s.width_px)};
  std::vector<float> b(s.buildings.begin(), s.buildings.end());
  return {Tensor<float>(shape, std::move(b)), Tensor<float>(shape, one_hot(s.width_px, s.height_px, s.tx_pos))};
}

inline Tensor<float> beam_tensor(const BeamVector& w) {
  const auto v = w.interleaved();
  return Tensor<float>(Shape{v.size()}, std::vector<float>(v.begin(), v.end()));
}

inline void write_map_png(const fs::path& path, const ChannelMap& m, double floor_db, double ceiling_db) {
  std::vector<double> v(m.values_db.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.valid_mask[i] ? normalize_db(m.values_db[i], floor_db, ceiling_db) : 0.0;
  write_png_gray(path, m.width_px, m.height_px, v);
}

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

/// CSV of (step, loss). On resume, rows past the resume step are dropped.
class LossLog {
 public:
  LossLog(const fs::path& path, std::size_t resume_step) : path_(path) {
    std::string kept = "step,loss\n";
    if (resume_step > 0 && fs::exists(path)) {
      std::ifstream in(path);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        if (std::stoull(line.substr(0, comma)) <= resume_step) kept += line + "\n";
      }
    }
    write_bytes(path, kept);
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot append to " + path.string());
  }

  void add(std::size_t step, double loss) {
    out_ << step << ',' << fmt_real(loss) << '\n';
    out_.flush();
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

/// Reads (step, loss) rows.
inline std::vector<std::pair<std::size_t, double>> read_loss_log(const fs::path& path) {
  if (!fs::exists(path)) throw MissingDependencyError("no loss log at " + path.string());
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::size_t, double>> rows;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    rows.emplace_back(std::stoull(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
  }
  return rows;
}

/// Parameter list extended with the optimizer moments, for checkpointing.
template <class T>
ParamList<T> with_optimizer(const ParamList<T>& params, const std::vector<Tensor<T>>& trained, const AdamState<T>& st,
                            const std::vector<std::string>& trained_names) {
  ParamList<T> out = params;
  for (std::size_t i = 0; i < trained.size(); ++i) {
    out.push_back({"adam.m." + trained_names[i], Tensor<T>(trained[i].shape(), st.m[i])});
    out.push_back({"adam.v." + trained_names[i], Tensor<T>(trained[i].shape(), st.v[i])});
  }
  return out;
}

template <class T>
void restore_optimizer(const ParamList<T>& loaded, AdamState<T>& st, const std::vector<std::string>& trained_names) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& p : loaded) by_name[p.name] = &p.tensor;
  for (std::size_t i = 0; i < trained_names.size(); ++i) {
    st.m[i] = by_name.at("adam.m." + trained_names[i])->vec();
    st.v[i] = by_name.at("adam.v." + trained_names[i])->vec();
  }
}

/// Model parameters, optimizer slots, and the names of trained entries.
template <class T>
struct TrainState {
  ParamList<T> params;
  std::vector<Tensor<T>> trained;
  std::vector<std::string> trained_names;
  AdamState<T> adam;

  TrainState(ParamList<T> ps, double lr, const std::function<bool(const std::string&)>& frozen) : params(std::move(ps)) {
    for (const auto& p : params)
      if (!frozen(p.name)) {
        trained.push_back(p.tensor);
        trained_names.push_back(p.name);
      }
    adam = AdamState<T>(trained, lr);
  }

  void save(const fs::path& dir, json meta) const {
    meta["step"] = adam.step_count;
    save_checkpoint(dir, with_optimizer(params, trained, adam, trained_names), meta);
  }

  /// Returns the checkpoint manifest.
  json load(const fs::path& dir) {
    ParamList<T> all = params;
    ParamList<T> slots;
    for (std::size_t i = 0; i < trained.size(); ++i) {
      slots.push_back({"adam.m." + trained_names[i], Tensor<T>::zeros(trained[i].shape())});
      slots.push_back({"adam.v." + trained_names[i], Tensor<T>::zeros(trained[i].shape())});
    }
    all.insert(all.end(), slots.begin(), slots.end());
    json manifest = load_checkpoint(dir, all);
    restore_optimizer(slots, adam, trained_names);
    adam.step_count = manifest.at("step").get<std::uint64_t>();
    return manifest;
  }
};

/// Indices [0, n) in a seeded random order, truncated to k (with repeats
/// when k > n).
inline std::vector<std::size_t> draw_indices(Rng& rng, std::size_t n, std::size_t k) {
  if (n == 0) throw ContractError("draw_indices: empty population");
  std::vector<std::size_t> out;
  while (out.size() < k) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t i = 0; i < n && out.size() < k; ++i) out.push_back(perm[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// VAE pretraining

/// Mean reconstruction MSE decoding the posterior mean.
inline double recon_mse(const Vae<float>& vae, const std::vector<Tensor<float>>& maps) {
  NoGradGuard ng;
  double s = 0.0;
  for (const auto& m : maps) s += static_cast<double>(mse(m, vae.decode(vae.encode(m).mu)).item());
  return s / static_cast<double>(maps.size());
}

inline std::vector<Tensor<float>> train_maps(const Dataset& ds) {
  std::vector<Tensor<float>> maps;
  for (std::size_t i : ds.split("train")) maps.push_back(map_tensor(ds.truth_of(ds.records[i]), ds.floor_db, ds.ceiling_db));
  if (maps.empty()) throw ConfigError("dataset has no training records");
  return maps;
}

/// Trains the VAE on the train split and writes its checkpoint.
inline json train_vae(const RunConfig& cfg, const fs::path& resume = {}, std::ostream* log = nullptr) {
  const Dataset ds = load_dataset_for(cfg);
  const auto maps = train_maps(ds);
  const TrainConfig& tc = cfg.vae_train;
  Rng init(tc.seed);
  Vae<float> vae(cfg.vae, init);
  TrainState<float> st(vae.params(), tc.lr, [](const std::string&) { return false; });
  const std::string vhash = vae_hash(cfg);

  double mse_init = 0.0;
  std::size_t start = 0;
  if (!resume.empty()) {
    const json m = st.load(resume);
    if (m.value("vae_hash", "") != vhash) throw ConfigError("checkpoint " + resume.string() + " belongs to a different VAE config");
    start = m.at("step").get<std::size_t>();
    mse_init = m.at("recon_mse_init").get<double>();
  } else {
    mse_init = recon_mse(vae, maps);
  }
  const fs::path dir = cfg.vae_dir();
  fs::create_directories(dir);
  LossLog loss_log(dir / "loss.csv", start);
  json meta{{"kind", "vae"}, {"vae_hash", vhash}, {"config_hash", model_hash(cfg)}, {"config", to_json(cfg)},
            {"recon_mse_init", mse_init}};

  const Shape lat{cfg.vae.latent_channels, cfg.vae.latent_h(), cfg.vae.latent_w()};
  for (std::size_t step = start + 1; step <= tc.steps; ++step) {
    Rng r = Rng::derive(tc.seed, 10, step);
    const auto pick = draw_indices(r, maps.size(), tc.batch);
    std::vector<Tensor<float>> losses;
    for (std::size_t i : pick) {
      const auto noise = standard_normal<float>(lat, r);
      losses.push_back(vae_loss(vae, maps[i], vae.encode(maps[i]), noise));
    }
    const Tensor<float> loss = scale(sum(concat0(losses)), 1.0f / static_cast<float>(losses.size()));
    for (auto& p : st.trained) p.zero_grad();
    backward(loss);
    adam_step(st.trained, st.adam);
    if (step % tc.log_every == 0 || step == tc.steps || step == 1) {
      loss_log.add(step, loss.item());
      if (log) *log << "vae step " << step << " loss " << fmt_real(loss.item()) << "\n";
    }
    if (tc.checkpoint_every && step % tc.checkpoint_every == 0 && step != tc.steps) {
      std::ostringstream name;
      name << "step_" << std::setw(6) << std::setfill('0') << step;
      st.save(dir / name.str(), meta);
    }
  }
  meta["recon_mse_final"] = recon_mse(vae, maps);
  meta["frozen"] = true;
  st.save(dir, meta);
  meta["step"] = st.adam.step_count;
  return meta;
}

inline Vae<float> load_vae(const RunConfig& cfg, json* manifest_out = nullptr) {
  Rng dummy(0);
  Vae<float> vae(cfg.vae, dummy);
  ParamList<float> ps = vae.params();
  const json m = read_checkpoint_manifest(cfg.vae_dir());
  if (m.value("kind", "") != "vae") throw ConfigError(cfg.vae_dir().string() + " is not a VAE checkpoint");
  if (m.value("vae_hash", "") != vae_hash(cfg))
    throw ConfigError("VAE checkpoint at " + cfg.vae_dir().string() + " was trained with a different configuration");
  load_checkpoint(cfg.vae_dir(), ps);
  if (manifest_out) *manifest_out = m;
  return vae;
}

// ---------------------------------------------------------------------------
// DiT training

/// Posterior means of the training maps, used as z0 without rescaling.
inline std::vector<Tensor<float>> encode_latents(const Vae<float>& vae, const std::vector<Tensor<float>>& maps) {
  NoGradGuard ng;
  std::vector<Tensor<float>> z0;
  for (const auto& m : maps) z0.push_back(vae.encode(m).mu.detach());
  return z0;
}

inline bool frozen_for(const RunConfig& cfg, const std::string& name) {
  // the beam MLP takes no part in the ablated forward pass
  return !cfg.dit.beam_conditioning && name.rfind("dit.w_emb", 0) == 0;
}

/// Trains the condition encoder and DiT against a frozen VAE.
inline json train_dit(const RunConfig& cfg, const fs::path& resume = {}, std::ostream* log = nullptr) {
  json vae_manifest;
  const Vae<float> vae = load_vae(cfg, &vae_manifest);
  const Dataset ds = load_dataset_for(cfg);
  const auto train = ds.split("train");
  const std::vector<Tensor<float>> z0 = encode_latents(vae, train_maps(ds));

  // group training records by environment
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t k = 0; k < train.size(); ++k) {
    const RecordInfo& r = ds.records[train[k]];
    groups[{r.scene, r.tx}].push_back(k);
  }
  std::vector<EnvInputs> envs;
  std::vector<std::vector<std::size_t>> env_records;
  for (const auto& [key, ks] : groups) {
    envs.push_back(env_inputs(ds.scene_for(key.first, key.second)));
    env_records.push_back(ks);
  }
  std::vector<Tensor<float>> beams;
  for (std::size_t i : train) beams.push_back(beam_tensor(ds.beam_of(ds.records[i])));

  const TrainConfig& tc = cfg.dit_train;
  Rng init(tc.seed);
  ConditionEncoder<float> cond(cfg.cond, init);
  BeamDit<float> dit(cfg.dit_config(), init);
  ParamList<float> ps = cond.params();
  for (const auto& p : dit.params()) ps.push_back(p);
  TrainState<float> st(ps, tc.lr, [&](const std::string& n) { return frozen_for(cfg, n); });
  const NoiseSchedule sched = cfg.diffusion.schedule();
  const std::string mhash = model_hash(cfg);

  std::size_t start = 0;
  double last_loss = 0.0;
  if (!resume.empty()) {
    const json m = st.load(resume);
    if (m.value("config_hash", "") != mhash) throw ConfigError("checkpoint " + resume.string() + " belongs to a different config");
    start = m.at("step").get<std::size_t>();
    last_loss = m.value("last_loss", m.value("final_loss", 0.0));
  }
  const fs::path dir = cfg.dit_dir();
  fs::create_directories(dir);
  LossLog loss_log(dir / "loss.csv", start);
  json meta{{"kind", "dit"},
            {"config_hash", mhash},
            {"vae_hash", vae_hash(cfg)},
            {"vae_manifest_hash", content_hash(vae_manifest)},
            {"config", to_json(cfg)}};

  const Shape lat = z0.front().shape();
  NoisePredictor<float> model = [&](const Tensor<float>& zt, const Tensor<float>& ce, std::size_t t, const Tensor<float>& w) {
    return dit.forward(zt, ce, t, w);
  };
  for (std::size_t step = start + 1; step <= tc.steps; ++step) {
    Rng r = Rng::derive(tc.seed, 20, step);
    std::vector<DiffusionExample<float>> batch;
    for (std::size_t e : draw_indices(r, envs.size(), std::min(tc.envs_per_batch, envs.size()))) {
      const Tensor<float> c_env = cond(envs[e].buildings, envs[e].tx);
      for (std::size_t j : draw_indices(r, env_records[e].size(), tc.batch)) {
        const std::size_t k = env_records[e][j];
        const std::size_t t = 1 + static_cast<std::size_t>(r.below(sched.T));
        batch.push_back({z0[k], c_env, beams[k], t, standard_normal<float>(lat, r)});
      }
    }
    const Tensor<float> loss = training_loss(batch, model, sched);
    for (auto& p : st.trained) p.zero_grad();
    backward(loss);
    adam_step(st.trained, st.adam);
    last_loss = loss.item();
    if (step % tc.log_every == 0 || step == tc.steps || step == 1) {
      loss_log.add(step, last_loss);
      if (log) *log << "dit step " << step << " loss " << fmt_real(last_loss) << "\n";
    }
    if (tc.checkpoint_every && step % tc.checkpoint_every == 0 && step != tc.steps) {
      std::ostringstream name;
      name << "step_" << std::setw(6) << std::setfill('0') << step;
      meta["last_loss"] = last_loss;
      st.save(dir / name.str(), meta);
    }
  }
  meta.erase("last_loss");
  meta["final_loss"] = last_loss;
  st.save(dir, meta);
  meta["step"] = st.adam.step_count;
  return meta;
}

// ---------------------------------------------------------------------------
// Sampling

/// Frozen VAE + condition encoder + DiT restored from a run directory.
struct Predictor {
  RunConfig cfg;
  Vae<float> vae;
  ConditionEncoder<float> cond;
  BeamDit<float> dit;
  NoiseSchedule sched;
  json manifest;

  static Predictor load(const RunConfig& cfg) {
    Predictor p;
    p.cfg = cfg;
    p.vae = load_vae(cfg);
    Rng dummy(0);
    p.cond = ConditionEncoder<float>(cfg.cond, dummy);
    p.dit = BeamDit<float>(cfg.dit_config(), dummy);
    ParamList<float> ps = p.cond.params();
    for (const auto& q : p.dit.params()) ps.push_back(q);
    p.manifest = read_checkpoint_manifest(cfg.dit_dir());
    if (p.manifest.value("kind", "") != "dit") throw ConfigError(cfg.dit_dir().string() + " is not a DiT checkpoint");
    if (p.manifest.value("config_hash", "") != model_hash(cfg))
      throw ConfigError("DiT checkpoint at " + cfg.dit_dir().string() + " was trained with a different configuration");
    load_checkpoint(cfg.dit_dir(), ps);
    p.sched = cfg.diffusion.schedule();
    return p;
  }

  Tensor<float> environment(const EnvScene& s) const {
    NoGradGuard ng;
    const EnvInputs in = env_inputs(s);
    return cond(in.buildings, in.tx);
  }

  /// z_T ~ N(0, I), T ancestral steps, decode, de-normalize; building
  /// pixels are masked and set to the floor.
  ChannelMap sample(const EnvScene& s, const Tensor<float>& c_env, const BeamVector& w, Rng& rng, double floor_db,
                    double ceiling_db) const {
    NoGradGuard ng;
    const Tensor<float> wt = beam_tensor(w);
    const std::function<Tensor<float>(const Tensor<float>&, std::size_t)> eps = [&](const Tensor<float>& z, std::size_t t) {
      return dit.forward(z, c_env, t, wt);
    };
    const Shape lat{cfg.vae.latent_channels, cfg.vae.latent_h(), cfg.vae.latent_w()};
    const Tensor<float> x = vae.decode(sample_chain<float>(lat, eps, sched, rng));
    ChannelMap m;
    m.width_px = s.width_px;
    m.height_px = s.height_px;
    m.values_db.resize(x.numel());
    m.valid_mask.resize(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      m.valid_mask[i] = s.buildings[i] ? 0 : 1;
      m.values_db[i] = s.buildings[i] ? floor_db : denormalize_db(x[i], floor_db, ceiling_db);
    }
    m.beam = w;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Inference

struct InferRequest {
  std::string scene_id;
  int tx = 0;
  std::optional<double> theta;
  std::string beam_file;
};

/// Beam weights from a BCKM tensor or a text list of 2 N_t reals.
inline BeamVector read_beam_file(const fs::path& path, std::size_t n_antennas, double budget) {
  if (!fs::exists(path)) throw InputValidationError("beam file " + path.string() + " does not exist");
  const std::string bytes = read_bytes(path);
  std::vector<double> v;
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kTensorMagic.data(), 4) == 0) {
    try {
      const TensorBlob b = decode_tensor(bytes, path.string());
      v.assign(b.data.begin(), b.data.end());
    } catch (const std::exception& e) {
      throw InputValidationError(e.what());
    }
  } else {
    std::string text = bytes;
    std::replace(text.begin(), text.end(), ',', ' ');
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw InputValidationError("beam file " + path.string() + ": '" + tok + "' is not a number");
      }
    }
  }
  if (v.size() != 2 * n_antennas)
    throw InputValidationError("beam file " + path.string() + " holds " + std::to_string(v.size()) + " values, expected " +
                               std::to_string(2 * n_antennas));
  for (double x : v)
    if (!std::isfinite(x)) throw InputValidationError("beam file " + path.string() + " holds a non-finite value");
  BeamVector w = BeamVector::from_interleaved(v, budget);
  const double p = w.power();
  if (p > budget * (1.0 + 1e-6))
    throw InputValidationError("beam file " + path.string() + " has power " + fmt_real(p) + ", budget is " + fmt_real(budget));
  // float storage of a full-power beam can overshoot by rounding
  if (p > budget)
    for (auto& x : w.weights) x *= std::sqrt(budget / p);
  return w;
}

inline json infer(const RunConfig& cfg, const InferRequest& req, std::ostream* log = nullptr) {
  const auto& ch = cfg.dataset.channel;
  BeamVector w;
  std::string tag;
  if (req.theta.has_value() == !req.beam_file.empty()) throw InputValidationError("give exactly one of --theta or --beam-file");
  if (req.theta) {
    if (!std::isfinite(*req.theta)) throw InputValidationError("theta must be finite");
    w = steered_beam(*req.theta, ch.n_antennas, cfg.dataset.power_budget, ch.spacing_ratio);
    tag = "theta" + fmt_real(*req.theta);
  } else {
    w = read_beam_file(req.beam_file, ch.n_antennas, cfg.dataset.power_budget);
    tag = fs::path(req.beam_file).stem().string();
  }
  const Dataset ds = load_dataset_for(cfg);
  std::size_t si = ds.scenes.size();
  for (std::size_t i = 0; i < ds.scenes.size(); ++i)
    if (ds.scenes[i].id == req.scene_id) si = i;
  if (si == ds.scenes.size()) throw InputValidationError("unknown scene '" + req.scene_id + "'");
  if (req.tx < 0 || static_cast<std::size_t>(req.tx) >= ds.scenes[si].tx.size())
    throw InputValidationError("scene " + req.scene_id + " has no tx " + std::to_string(req.tx));
  const EnvScene scene = ds.scene_for(si, static_cast<std::size_t>(req.tx));

  const Predictor pred = Predictor::load(cfg);
  const auto wi = w.interleaved();
  std::string key = req.scene_id + "/" + std::to_string(req.tx) + "/";
  key.append(reinterpret_cast<const char*>(wi.data()), wi.size() * sizeof(double));
  Rng rng = Rng::derive(cfg.eval.sample_seed, 50, fnv1a(key));
  const ChannelMap m = pred.sample(scene, pred.environment(scene), w, rng, ds.floor_db, ds.ceiling_db);
  const ChannelMap truth = generate_ckm(scene, ch, w, req.scene_id);

  const fs::path dir = cfg.infer_dir();
  fs::create_directories(dir);
  const std::string stem = req.scene_id + "_" + ds.scenes[si].tx[static_cast<std::size_t>(req.tx)].id + "_" + tag;
  std::vector<float> vals(m.values_db.begin(), m.values_db.end());
  write_tensor_file(dir / (stem + ".bckm"), Shape{static_cast<std::size_t>(m.height_px), static_cast<std::size_t>(m.width_px)}, vals);
  write_map_png(dir / (stem + ".png"), m, ds.floor_db, ds.ceiling_db);
  const double nmse = nmse_db(m, truth);
  if (log) *log << "wrote " << (dir / (stem + ".bckm")).string() << " and .png; NMSE vs oracle " << fmt_real(nmse) << " dB\n";
  return {{"map", (dir / (stem + ".bckm")).string()}, {"png", (dir / (stem + ".png")).string()}, {"nmse_db", nmse}};
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
  std::string id;
  std::string scene;
  std::string tx;
  int beam_index = 0;
  double nmse_db = 0.0;
  std::optional<double> main_lobe_error;  // radians; absent when the ring does not fit
};

struct EvalReport {
  std::string scenario;
  std::string config_hash;
  std::vector<EvalRecord> records;
  double aggregate_nmse_db = 0.0;
  double mean_map_nmse_db = 0.0;  // dataset-mean-map predictor on the same records
  std::size_t failures = 0;
};

inline json to_json(const EvalReport& r) {
  json rows = json::array();
  for (const auto& e : r.records) {
    json row{{"id", e.id}, {"scene", e.scene}, {"tx", e.tx}, {"beam_index", e.beam_index}, {"nmse_db", e.nmse_db}};
    row["main_lobe_error_rad"] = e.main_lobe_error ? json(*e.main_lobe_error) : json(nullptr);
    rows.push_back(row);
  }
  return {{"scenario", r.scenario},
          {"config_hash", r.config_hash},
          {"aggregate_nmse_db", r.aggregate_nmse_db},
          {"mean_map_nmse_db", r.mean_map_nmse_db},
          {"failures", r.failures},
          {"records", rows}};
}

/// Pixel-wise mean of the training maps in dB.
inline std::vector<double> mean_train_map(const Dataset& ds) {
  std::vector<double> acc(static_cast<std::size_t>(ds.width * ds.height), 0.0);
  const auto train = ds.split("train");
  for (std::size_t i : train) {
    const ChannelMap m = ds.truth_of(ds.records[i]);
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += m.values_db[p];
  }
  for (auto& v : acc) v /= static_cast<double>(train.size());
  return acc;
}

/// Samples every record of the scenario's split, scores it, and writes the
/// report JSON and prediction/truth PNG pairs under the eval directory.
inline EvalReport run_scenario(const RunConfig& cfg, const std::string& scenario, std::ostream* log = nullptr) {
  const std::string split = scenario_split(scenario);
  const Dataset ds = load_dataset_for(cfg);
  const auto ids = ds.split(split);
  const Predictor pred = Predictor::load(cfg);
  const auto mean_map = mean_train_map(ds);

  const fs::path dir = cfg.eval_dir();
  const fs::path png_dir = dir / scenario;
  fs::create_directories(png_dir);
  EvalReport rep;
  rep.scenario = scenario;
  rep.config_hash = pred.manifest.at("config_hash").get<std::string>();
  NmseAccumulator acc, base;
  std::map<std::pair<std::size_t, std::size_t>, Tensor<float>> env_cache;
  for (std::size_t idx : ids) {
    const RecordInfo& rec = ds.records[idx];
    const EnvScene scene = ds.scene_of(rec);
    auto it = env_cache.find({rec.scene, rec.tx});
    if (it == env_cache.end()) it = env_cache.emplace(std::make_pair(rec.scene, rec.tx), pred.environment(scene)).first;
    const ChannelMap truth = ds.truth_of(rec);
    Rng rng = Rng::derive(cfg.eval.sample_seed, 40, fnv1a(rec.id));
    const ChannelMap m = pred.sample(scene, it->second, truth.beam, rng, ds.floor_db, ds.ceiling_db);
    EvalRecord er;
    er.id = rec.id;
    er.scene = ds.scenes[rec.scene].id;
    er.tx = ds.scenes[rec.scene].tx[rec.tx].id;
    er.beam_index = rec.beam_index;
    try {
      er.nmse_db = nmse_db(m, truth);
      acc.add(m, truth);
      ChannelMap mm = truth;
      for (std::size_t p = 0; p < mm.values_db.size(); ++p) mm.values_db[p] = truth.valid_mask[p] ? mean_map[p] : truth.values_db[p];
      base.add(mm, truth);
    } catch (const EvaluationError& e) {
      ++rep.failures;
      if (log) *log << "record " << rec.id << " failed: " << e.what() << "\n";
      continue;
    }
    const Pixel tx = scene.tx_pos;
    const int room = std::min({tx.row, tx.col, ds.height - 1 - tx.row, ds.width - 1 - tx.col});
    const int radius = std::min(cfg.eval.lobe_radius_px, room);
    if (radius >= 2) {
      try {
        er.main_lobe_error = std::abs(main_lobe_angle(m, tx, radius, cfg.eval.lobe_bins) - main_lobe_angle(truth, tx, radius, cfg.eval.lobe_bins));
      } catch (const EvaluationError&) {
      }
    }
    if (cfg.eval.write_png) {
      write_map_png(png_dir / (rec.id + "_pred.png"), m, ds.floor_db, ds.ceiling_db);
      write_map_png(png_dir / (rec.id + "_truth.png"), truth, ds.floor_db, ds.ceiling_db);
    }
    if (log) *log << rec.id << " nmse " << fmt_real(er.nmse_db) << " dB\n";
    rep.records.push_back(er);
  }
  if (!rep.records.empty()) {
    rep.aggregate_nmse_db = acc.value_db();
    rep.mean_map_nmse_db = base.value_db();
  }
  write_json(dir / ("report_" + scenario + ".json"), to_json(rep));
  return rep;
}

}  // namespace beamckm
