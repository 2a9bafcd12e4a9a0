// SPDX-License-Identifier: Apache-2.0
#pragma once

// Oracle dataset on disk:
//   manifest.json
//   scenes/<scene>_buildings.bckm     [H, W]  0/1
//   scenes/<scene>_<tx>.bckm          [H, W]  transmitter one-hot
//   records/<record>_map.bckm         [H, W]  dB, floor on buildings
//   records/<record>_beam.bckm        [2 N_t] interleaved re/im
//   records/<record>.png              optional normalized map

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "beamckm/png.hpp"
#include "beamckm/propagation.hpp"
#include "beamckm/serialize.hpp"

namespace beamckm {

inline const std::vector<std::string> kSplitNames{"train", "unseen_beams", "unseen_locations"};

namespace detail {

/// Throws ConfigError on keys outside `allowed`.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(section + ": unknown key '" + k + "'");
  }
}

template <class V>
void read_key(const json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type");
  }
}

inline std::string fmt_id(const char* prefix, int v) {
  std::string digits = std::to_string(v);
  if (digits.size() < 2) digits.insert(0, 2 - digits.size(), '0');
  return prefix + digits;
}

}  // namespace detail

inline json to_json(const ChannelParams& p) {
  return {{"path_loss_exponent", p.path_loss_exponent},
          {"reference_distance_m", p.reference_distance_m},
          {"shadow_penalty_db", p.shadow_penalty_db},
          {"reflection_enabled", p.reflection_enabled},
          {"reflection_loss_db", p.reflection_loss_db},
          {"noise_floor_db", std::isfinite(p.noise_floor_db) ? json(p.noise_floor_db) : json(nullptr)},
          {"floor_db", p.floor_db},
          {"carrier_ghz", p.carrier_ghz},
          {"n_antennas", p.n_antennas},
          {"spacing_ratio", p.spacing_ratio}};
}

inline ChannelParams channel_params_from_json(const json& j) {
  const std::string s = "channel";
  detail::check_keys(j,
                     {"path_loss_exponent", "reference_distance_m", "shadow_penalty_db", "reflection_enabled",
                      "reflection_loss_db", "noise_floor_db", "floor_db", "carrier_ghz", "n_antennas", "spacing_ratio"},
                     s);
  ChannelParams p;
  detail::read_key(j, "path_loss_exponent", p.path_loss_exponent, s);
  detail::read_key(j, "reference_distance_m", p.reference_distance_m, s);
  detail::read_key(j, "shadow_penalty_db", p.shadow_penalty_db, s);
  detail::read_key(j, "reflection_enabled", p.reflection_enabled, s);
  detail::read_key(j, "reflection_loss_db", p.reflection_loss_db, s);
  if (j.contains("noise_floor_db") && !j.at("noise_floor_db").is_null()) detail::read_key(j, "noise_floor_db", p.noise_floor_db, s);
  detail::read_key(j, "floor_db", p.floor_db, s);
  detail::read_key(j, "carrier_ghz", p.carrier_ghz, s);
  detail::read_key(j, "n_antennas", p.n_antennas, s);
  detail::read_key(j, "spacing_ratio", p.spacing_ratio, s);
  p.validate();
  return p;
}

struct SceneGenConfig {
  int width = 64;
  int height = 64;
  double resolution_m = 2.0;
  int buildings_min = 5;
  int buildings_max = 9;
  int building_min_px = 4;
  int building_max_px = 14;
  int tx_margin_px = 10;
  int tx_min_separation_px = 12;

  void validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("scene: grid size must be positive");
    if (resolution_m <= 0) throw ConfigError("scene: resolution must be positive");
    if (buildings_min < 0 || buildings_max < buildings_min) throw ConfigError("scene: bad building count range");
    if (building_min_px < 1 || building_max_px < building_min_px) throw ConfigError("scene: bad building size range");
    if (tx_margin_px < 1 || 2 * tx_margin_px >= std::min(width, height)) throw ConfigError("scene: tx margin does not fit the grid");
    if (tx_min_separation_px < 0) throw ConfigError("scene: negative tx separation");
  }
};

inline json to_json(const SceneGenConfig& c) {
  return {{"width", c.width},
          {"height", c.height},
          {"resolution_m", c.resolution_m},
          {"buildings_min", c.buildings_min},
          {"buildings_max", c.buildings_max},
          {"building_min_px", c.building_min_px},
          {"building_max_px", c.building_max_px},
          {"tx_margin_px", c.tx_margin_px},
          {"tx_min_separation_px", c.tx_min_separation_px}};
}

inline SceneGenConfig scene_gen_from_json(const json& j) {
  const std::string s = "scene";
  detail::check_keys(j,
                     {"width", "height", "resolution_m", "buildings_min", "buildings_max", "building_min_px",
                      "building_max_px", "tx_margin_px", "tx_min_separation_px"},
                     s);
  SceneGenConfig c;
  detail::read_key(j, "width", c.width, s);
  detail::read_key(j, "height", c.height, s);
  detail::read_key(j, "resolution_m", c.resolution_m, s);
  detail::read_key(j, "buildings_min", c.buildings_min, s);
  detail::read_key(j, "buildings_max", c.buildings_max, s);
  detail::read_key(j, "building_min_px", c.building_min_px, s);
  detail::read_key(j, "building_max_px", c.building_max_px, s);
  detail::read_key(j, "tx_margin_px", c.tx_margin_px, s);
  detail::read_key(j, "tx_min_separation_px", c.tx_min_separation_px, s);
  c.validate();
  return c;
}

struct DatasetConfig {
  int scenes = 4;
  int tx_per_scene = 4;          // including held-out locations
  int heldout_tx_per_scene = 1;  // last tx of each scene
  int beams_per_tx = 20;         // including held-out beams
  int heldout_beams_per_tx = 2;  // last beams of each training tx
  std::uint64_t seed = 1234;
  double power_budget = 1.0;
  double beam_sigma = 0.1;
  bool export_png = false;
  SceneGenConfig scene;
  ChannelParams channel;

  std::size_t record_count() const {
    return static_cast<std::size_t>(scenes) * static_cast<std::size_t>(tx_per_scene) * static_cast<std::size_t>(beams_per_tx);
  }

  void validate() const {
    if (scenes < 1 || tx_per_scene < 1 || beams_per_tx < 1) throw ConfigError("dataset: counts must be positive");
    if (heldout_tx_per_scene < 0 || heldout_tx_per_scene > tx_per_scene) throw ConfigError("dataset: bad held-out tx count");
    if (heldout_beams_per_tx < 0 || heldout_beams_per_tx > beams_per_tx) throw ConfigError("dataset: bad held-out beam count");
    if (!(power_budget > 0)) throw ConfigError("dataset: power budget must be positive");
    if (beam_sigma < 0) throw ConfigError("dataset: negative beam perturbation");
    scene.validate();
    channel.validate();
  }
};

inline json to_json(const DatasetConfig& c) {
  return {{"scenes", c.scenes},
          {"tx_per_scene", c.tx_per_scene},
          {"heldout_tx_per_scene", c.heldout_tx_per_scene},
          {"beams_per_tx", c.beams_per_tx},
          {"heldout_beams_per_tx", c.heldout_beams_per_tx},
          {"seed", c.seed},
          {"power_budget", c.power_budget},
          {"beam_sigma", c.beam_sigma},
          {"export_png", c.export_png},
          {"scene", to_json(c.scene)},
          {"channel", to_json(c.channel)}};
}

inline DatasetConfig dataset_config_from_json(const json& j) {
  const std::string s = "dataset";
  detail::check_keys(j,
                     {"scenes", "tx_per_scene", "heldout_tx_per_scene", "beams_per_tx", "heldout_beams_per_tx", "seed",
                      "power_budget", "beam_sigma", "export_png", "scene", "channel"},
                     s);
  DatasetConfig c;
  detail::read_key(j, "scenes", c.scenes, s);
  detail::read_key(j, "tx_per_scene", c.tx_per_scene, s);
  detail::read_key(j, "heldout_tx_per_scene", c.heldout_tx_per_scene, s);
  detail::read_key(j, "beams_per_tx", c.beams_per_tx, s);
  detail::read_key(j, "heldout_beams_per_tx", c.heldout_beams_per_tx, s);
  detail::read_key(j, "seed", c.seed, s);
  detail::read_key(j, "power_budget", c.power_budget, s);
  detail::read_key(j, "beam_sigma", c.beam_sigma, s);
  detail::read_key(j, "export_png", c.export_png, s);
  if (j.contains("scene")) c.scene = scene_gen_from_json(j.at("scene"));
  if (j.contains("channel")) c.channel = channel_params_from_json(j.at("channel"));
  c.validate();
  return c;
}

/// Random axis-aligned rectangular buildings plus `n_tx` transmitter sites.
/// Sites keep `tx_margin_px` from the border, have a free 3x3
/// neighbourhood and are pairwise at least `tx_min_separation_px` apart.
inline std::vector<std::uint8_t> generate_buildings(const SceneGenConfig& cfg, Rng& rng) {
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(cfg.width * cfg.height), 0);
  const int count = cfg.buildings_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.buildings_max - cfg.buildings_min + 1)));
  const int span = cfg.building_max_px - cfg.building_min_px + 1;
  for (int b = 0; b < count; ++b) {
    const int bw = cfg.building_min_px + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
    const int bh = cfg.building_min_px + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
    const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, cfg.width - bw + 1))));
    const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, cfg.height - bh + 1))));
    for (int r = r0; r < std::min(cfg.height, r0 + bh); ++r)
      for (int c = c0; c < std::min(cfg.width, c0 + bw); ++c) grid[static_cast<std::size_t>(r * cfg.width + c)] = 1;
  }
  return grid;
}

inline std::vector<Pixel> place_transmitters(const SceneGenConfig& cfg, const std::vector<std::uint8_t>& grid, int n_tx,
                                             Rng& rng) {
  std::vector<Pixel> out;
  auto free_at = [&](int r, int c) { return grid[static_cast<std::size_t>(r * cfg.width + c)] == 0; };
  const int lo = cfg.tx_margin_px;
  const int rows = cfg.height - 2 * lo, cols = cfg.width - 2 * lo;
  for (int attempt = 0; attempt < 100000 && static_cast<int>(out.size()) < n_tx; ++attempt) {
    const Pixel p{lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(rows))),
                  lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(cols)))};
    bool ok = true;
    for (int dr = -1; dr <= 1 && ok; ++dr)
      for (int dc = -1; dc <= 1 && ok; ++dc) ok = free_at(p.row + dr, p.col + dc);
    for (const Pixel& q : out)
      ok = ok && std::hypot(p.row - q.row, p.col - q.col) >= cfg.tx_min_separation_px;
    if (ok) out.push_back(p);
  }
  if (static_cast<int>(out.size()) < n_tx) throw ConfigError("scene: could not place " + std::to_string(n_tx) + " transmitters");
  return out;
}

inline std::vector<float> one_hot(int width, int height, Pixel p) {
  std::vector<float> v(static_cast<std::size_t>(width * height), 0.0f);
  v[static_cast<std::size_t>(p.row * width + p.col)] = 1.0f;
  return v;
}

inline std::string split_of(const DatasetConfig& cfg, int tx, int beam) {
  if (tx >= cfg.tx_per_scene - cfg.heldout_tx_per_scene) return "unseen_locations";
  if (beam >= cfg.beams_per_tx - cfg.heldout_beams_per_tx) return "unseen_beams";
  return "train";
}

inline std::string record_id(int scene, int tx, int beam) {
  return detail::fmt_id("s", scene) + "_" + detail::fmt_id("t", tx) + "_" + detail::fmt_id("b", beam);
}

/// Writes the full dataset under `out_dir` and returns its manifest.
inline json generate_dataset(const DatasetConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  try {
    fs::create_directories(out_dir / "scenes");
    fs::create_directories(out_dir / "records");
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot create dataset directory: ") + e.what());
  }
  const int w = cfg.scene.width, h = cfg.scene.height;
  const Shape grid_shape{static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  json scenes = json::array(), records = json::array();
  json splits = {{"train", json::array()}, {"unseen_beams", json::array()}, {"unseen_locations", json::array()}};

  for (int s = 0; s < cfg.scenes; ++s) {
    const std::string sid = detail::fmt_id("scene_", s);
    Rng scene_rng = Rng::derive(cfg.seed, 1, static_cast<std::uint64_t>(s));
    const auto grid = generate_buildings(cfg.scene, scene_rng);
    const auto sites = place_transmitters(cfg.scene, grid, cfg.tx_per_scene, scene_rng);
    const std::string bfile = "scenes/" + sid + "_buildings.bckm";
    write_tensor_file(out_dir / bfile, grid_shape, std::vector<float>(grid.begin(), grid.end()));
    json txs = json::array();
    for (int t = 0; t < cfg.tx_per_scene; ++t) {
      const std::string tid = detail::fmt_id("tx_", t);
      const std::string tfile = "scenes/" + sid + "_" + tid + ".bckm";
      write_tensor_file(out_dir / tfile, grid_shape, one_hot(w, h, sites[static_cast<std::size_t>(t)]));
      const bool heldout = t >= cfg.tx_per_scene - cfg.heldout_tx_per_scene;
      txs.push_back({{"id", tid}, {"row", sites[static_cast<std::size_t>(t)].row}, {"col", sites[static_cast<std::size_t>(t)].col},
                     {"onehot", tfile}, {"heldout", heldout}});

      EnvScene scene;
      scene.width_px = w;
      scene.height_px = h;
      scene.resolution_m = cfg.scene.resolution_m;
      scene.buildings = grid;
      scene.tx_pos = sites[static_cast<std::size_t>(t)];
      const ChannelField field = channel_field(scene, cfg.channel);
      Rng beam_rng = Rng::derive(cfg.seed, 2, static_cast<std::uint64_t>(s * 1000 + t));
      for (int b = 0; b < cfg.beams_per_tx; ++b) {
        double theta = 0.0;
        const BeamVector beam =
            random_beam(beam_rng, cfg.channel.n_antennas, cfg.power_budget, cfg.beam_sigma, cfg.channel.spacing_ratio, &theta);
        const std::string rid = record_id(s, t, b);
        const ChannelMap map = apply_beam(field, cfg.channel, beam, sid);
        const std::string mfile = "records/" + rid + "_map.bckm", wfile = "records/" + rid + "_beam.bckm";
        write_tensor_file(out_dir / mfile, grid_shape, std::vector<float>(map.values_db.begin(), map.values_db.end()));
        const auto inter = beam.interleaved();
        write_tensor_file(out_dir / wfile, Shape{inter.size()}, std::vector<float>(inter.begin(), inter.end()));
        if (cfg.export_png) {
          std::vector<double> norm(map.values_db.size());
          for (std::size_t i = 0; i < norm.size(); ++i) norm[i] = normalize_db(map.values_db[i], cfg.channel.floor_db);
          write_png_gray(out_dir / ("records/" + rid + ".png"), w, h, norm);
        }
        const std::string split = split_of(cfg, t, b);
        records.push_back({{"id", rid}, {"scene", sid}, {"tx", tid}, {"beam_index", b}, {"theta", theta},
                           {"map", mfile}, {"beam", wfile}, {"split", split}});
        splits[split].push_back(rid);
      }
    }
    scenes.push_back({{"id", sid}, {"buildings", bfile}, {"tx", txs}});
  }

  json manifest = {{"format", "beamckm-dataset"},
                   {"version", 1},
                   {"config", to_json(cfg)},
                   {"width", w},
                   {"height", h},
                   {"resolution_m", cfg.scene.resolution_m},
                   {"n_antennas", cfg.channel.n_antennas},
                   {"normalization", {{"floor_db", cfg.channel.floor_db}, {"ceiling_db", 0.0}}},
                   {"scenes", scenes},
                   {"records", records},
                   {"splits", splits}};
  write_json(out_dir / "manifest.json", manifest);
  return manifest;
}

struct TxInfo {
  std::string id;
  Pixel pos;
  bool heldout = false;
};

struct SceneInfo {
  std::string id;
  std::vector<std::uint8_t> buildings;
  std::vector<TxInfo> tx;
};

struct RecordInfo {
  std::string id;
  std::size_t scene = 0;  // index into Dataset::scenes
  std::size_t tx = 0;     // index into SceneInfo::tx
  int beam_index = 0;
  double theta = 0.0;
  std::string split;
  std::string map_file;
  std::string beam_file;
};

/// Read-only view of a generated dataset.
struct Dataset {
  fs::path root;
  json manifest;
  DatasetConfig config;
  int width = 0;
  int height = 0;
  double floor_db = -150.0;
  double ceiling_db = 0.0;
  std::vector<SceneInfo> scenes;
  std::vector<RecordInfo> records;

  static Dataset load(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) throw MissingDependencyError("no dataset manifest in " + dir.string());
    Dataset d;
    d.root = dir;
    d.manifest = read_json(dir / "manifest.json");
    try {
      d.config = dataset_config_from_json(d.manifest.at("config"));
      d.width = d.manifest.at("width").get<int>();
      d.height = d.manifest.at("height").get<int>();
      d.floor_db = d.manifest.at("normalization").at("floor_db").get<double>();
      d.ceiling_db = d.manifest.at("normalization").at("ceiling_db").get<double>();
      std::map<std::string, std::size_t> scene_index;
      for (const auto& js : d.manifest.at("scenes")) {
        SceneInfo si;
        si.id = js.at("id").get<std::string>();
        const TensorBlob b = read_tensor_file(dir / js.at("buildings").get<std::string>());
        if (b.shape != Shape{static_cast<std::size_t>(d.height), static_cast<std::size_t>(d.width)})
          throw DimensionError("building grid shape " + shape_str(b.shape) + " does not match manifest");
        for (float v : b.data) si.buildings.push_back(v > 0.5f ? 1 : 0);
        for (const auto& jt : js.at("tx"))
          si.tx.push_back({jt.at("id").get<std::string>(), Pixel{jt.at("row").get<int>(), jt.at("col").get<int>()},
                           jt.at("heldout").get<bool>()});
        scene_index[si.id] = d.scenes.size();
        d.scenes.push_back(std::move(si));
      }
      for (const auto& jr : d.manifest.at("records")) {
        RecordInfo r;
        r.id = jr.at("id").get<std::string>();
        r.scene = scene_index.at(jr.at("scene").get<std::string>());
        const std::string tid = jr.at("tx").get<std::string>();
        const auto& txs = d.scenes[r.scene].tx;
        r.tx = static_cast<std::size_t>(std::find_if(txs.begin(), txs.end(), [&](const TxInfo& t) { return t.id == tid; }) - txs.begin());
        if (r.tx == txs.size()) throw IoError("record " + r.id + " names unknown tx " + tid);
        r.beam_index = jr.at("beam_index").get<int>();
        r.theta = jr.at("theta").get<double>();
        r.split = jr.at("split").get<std::string>();
        r.map_file = jr.at("map").get<std::string>();
        r.beam_file = jr.at("beam").get<std::string>();
        d.records.push_back(std::move(r));
      }
    } catch (const json::exception& e) {
      throw IoError("malformed dataset manifest: " + std::string(e.what()));
    } catch (const std::out_of_range& e) {
      throw IoError("malformed dataset manifest: " + std::string(e.what()));
    }
    return d;
  }

  /// Record indices of a named split; ConfigError if the manifest lacks it.
  std::vector<std::size_t> split(const std::string& name) const {
    if (!manifest.contains("splits") || !manifest.at("splits").contains(name))
      throw ConfigError("split '" + name + "' absent from manifest");
    std::set<std::string> ids;
    for (const auto& id : manifest.at("splits").at(name)) ids.insert(id.get<std::string>());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (ids.count(records[i].id)) out.push_back(i);
    return out;
  }

  EnvScene scene_for(std::size_t scene, std::size_t tx) const {
    EnvScene s;
    s.width_px = width;
    s.height_px = height;
    s.resolution_m = config.scene.resolution_m;
    s.buildings = scenes[scene].buildings;
    s.tx_pos = scenes[scene].tx[tx].pos;
    return s;
  }

  EnvScene scene_of(const RecordInfo& r) const { return scene_for(r.scene, r.tx); }

  BeamVector beam_of(const RecordInfo& r) const {
    const TensorBlob b = read_tensor_file(root / r.beam_file);
    return BeamVector::from_interleaved(std::vector<double>(b.data.begin(), b.data.end()), config.power_budget + 1e-6);
  }

  ChannelMap truth_of(const RecordInfo& r) const {
    const TensorBlob b = read_tensor_file(root / r.map_file);
    if (b.data.size() != static_cast<std::size_t>(width * height)) throw DimensionError("map " + r.id + " has wrong size");
    ChannelMap m;
    m.width_px = width;
    m.height_px = height;
    m.values_db.assign(b.data.begin(), b.data.end());
    for (auto v : scenes[r.scene].buildings) m.valid_mask.push_back(v ? 0 : 1);
    m.beam = beam_of(r);
    m.scene_id = scenes[r.scene].id;
    return m;
  }
};

}  // namespace beamckm
