// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "beamckm/dataset.hpp"
#include "beamckm/metrics.hpp"
#include "temp_dir.hpp"

using namespace beamckm;

namespace {

constexpr double kPi = std::numbers::pi;

EnvScene random_scene(Rng& rng, int w, int h, double density) {
  EnvScene s = EnvScene::empty(w, h, 2.0, {0, 0});
  for (auto& b : s.buildings) b = rng.uniform() < density ? 1 : 0;
  Pixel tx{static_cast<int>(rng.below(h)), static_cast<int>(rng.below(w))};
  s.buildings[s.index(tx)] = 0;
  s.tx_pos = tx;
  return s;
}

Pixel random_free(Rng& rng, const EnvScene& s) {
  for (;;) {
    Pixel p{static_cast<int>(rng.below(s.height_px)), static_cast<int>(rng.below(s.width_px))};
    if (!s.occupied(p)) return p;
  }
}

// Pixels hit when stepping the centre-to-centre segment in increments of
// at most 0.1 pixel.
bool dense_blocked(const EnvScene& s, Pixel a, Pixel b) {
  const double x0 = a.col + 0.5, y0 = a.row + 0.5, x1 = b.col + 0.5, y1 = b.row + 0.5;
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int n = std::max(1, static_cast<int>(std::ceil(len / 0.1)));
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const Pixel p{static_cast<int>(std::floor(y0 + t * (y1 - y0))), static_cast<int>(std::floor(x0 + t * (x1 - x0)))};
    if (p == a || p == b) continue;
    if (s.occupied(p)) return true;
  }
  return false;
}

// Length of the segment inside the unit cell of pixel p (Liang-Barsky).
double chord_in_cell(Pixel a, Pixel b, Pixel p) {
  const double x0 = a.col + 0.5, y0 = a.row + 0.5, dx = b.col - a.col, dy = b.row - a.row;
  double t0 = 0.0, t1 = 1.0;
  auto clip = [&](double pp, double q) {
    if (pp == 0.0) return q >= 0.0;
    const double r = q / pp;
    if (pp < 0) t0 = std::max(t0, r);
    else t1 = std::min(t1, r);
    return true;
  };
  if (!clip(-dx, x0 - p.col) || !clip(dx, p.col + 1 - x0) || !clip(-dy, y0 - p.row) || !clip(dy, p.row + 1 - y0)) return 0.0;
  return t1 > t0 ? (t1 - t0) * std::hypot(dx, dy) : 0.0;
}

double mag(const cplx& c) { return std::abs(c); }

}  // namespace

TEST(SteeringVector, BroadsideIsAllOnes) {
  for (std::size_t n : {1u, 4u, 16u}) {
    const auto a = steering_vector(0.0, n);
    for (const auto& v : a) {
      EXPECT_EQ(v.real(), 1.0);
      EXPECT_EQ(v.imag(), 0.0);
    }
  }
}

TEST(SteeringVector, UnitModulus) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto a = steering_vector(rng.uniform(-kPi, kPi), 12, rng.uniform(0.1, 2.0));
    for (const auto& v : a) EXPECT_NEAR(mag(v), 1.0, 1e-14);
  }
}

TEST(SteeringVector, EndfireHalfWavelengthAlternates) {
  const auto a = steering_vector(kPi / 2, 4, 0.5);
  const double expect[] = {1, -1, 1, -1};
  for (int m = 0; m < 4; ++m) {
    EXPECT_NEAR(a[m].real(), expect[m], 1e-12);
    EXPECT_NEAR(a[m].imag(), 0.0, 1e-12);
  }
}

TEST(LosBlocked, EmptySceneNeverBlocked) {
  Rng rng(5);
  EnvScene s = EnvScene::empty(24, 20, 1.0, {3, 3});
  for (int i = 0; i < 500; ++i) EXPECT_FALSE(los_blocked(s, random_free(rng, s), random_free(rng, s)));
}

TEST(LosBlocked, SolidWallBlocks) {
  EnvScene s = EnvScene::empty(20, 20, 1.0, {5, 5});
  for (int r = 0; r < 20; ++r) s.buildings[s.index({r, 10})] = 1;
  EXPECT_TRUE(los_blocked(s, {5, 5}, {5, 15}));
  EXPECT_TRUE(los_blocked(s, {0, 0}, {19, 19}));
  EXPECT_FALSE(los_blocked(s, {0, 0}, {19, 9}));
}

TEST(LosBlocked, EndpointsThemselvesDoNotBlock) {
  EnvScene s = EnvScene::empty(8, 8, 1.0, {0, 0});
  s.buildings[s.index({4, 4})] = 1;
  EXPECT_FALSE(los_blocked(s, {4, 4}, {4, 7}));
}

TEST(LosBlocked, CornerGrazeCountsAsBlocked) {
  EnvScene s = EnvScene::empty(6, 6, 1.0, {0, 0});
  s.buildings[s.index({0, 1})] = 1;
  EXPECT_TRUE(los_blocked(s, {0, 0}, {2, 2}));
}

TEST(LosBlocked, RejectsOffGridEndpoints) { EXPECT_THROW(los_blocked(EnvScene::empty(4, 4, 1.0, {0, 0}), {0, 0}, {4, 0}), DomainError); }

TEST(LosBlocked, AgreesWithDenseSampling) {
  // Dense sampling can only miss a building pixel whose chord with the
  // segment is shorter than the 0.1 px step; anything it sees must also be
  // seen by the supercover traversal.
  Rng rng(11);
  int agree = 0, total = 0;
  for (int sc = 0; sc < 200; ++sc) {
    const EnvScene s = random_scene(rng, 24, 24, 0.08);
    for (int k = 0; k < 25; ++k) {
      const Pixel a = random_free(rng, s), b = random_free(rng, s);
      const bool sup = los_blocked(s, a, b), dense = dense_blocked(s, a, b);
      ++total;
      if (sup == dense) {
        ++agree;
        continue;
      }
      ASSERT_TRUE(sup) << "dense sampling found a block the supercover missed";
      double longest = 0.0;
      supercover(a, b, [&](Pixel p) {
        if (p == a || p == b || !s.occupied(p)) return;
        longest = std::max(longest, chord_in_cell(a, b, p));
      });
      EXPECT_LE(longest, 0.1 + 1e-9);
    }
  }
  EXPECT_GT(agree, total * 95 / 100);
}

TEST(ChannelVector, ReferenceDistanceOnBroadside) {
  const EnvScene s = EnvScene::empty(16, 16, 1.0, {8, 8});
  ChannelParams p;
  const auto h = channel_vector(s, p, {7, 8});
  ASSERT_EQ(h.size(), p.n_antennas);
  for (const auto& v : h) {
    EXPECT_NEAR(v.real(), 1.0, 1e-12);
    EXPECT_NEAR(v.imag(), 0.0, 1e-12);
  }
}

TEST(ChannelVector, TenReferenceDistances) {
  const EnvScene s = EnvScene::empty(32, 32, 1.0, {20, 10});
  ChannelParams p;
  for (Pixel q : {Pixel{10, 10}, Pixel{20, 20}, Pixel{20, 0}})
    for (const auto& v : channel_vector(s, p, q)) EXPECT_NEAR(mag(v), std::pow(10.0, -1.5), 1e-14);
}

TEST(ChannelVector, ShadowPenaltyOnBlockedLink) {
  EnvScene s = EnvScene::empty(32, 32, 1.0, {20, 10});
  s.buildings[s.index({15, 10})] = 1;
  ChannelParams p;
  p.reflection_enabled = false;
  for (const auto& v : channel_vector(s, p, {10, 10})) EXPECT_NEAR(mag(v), std::pow(10.0, -1.5) * std::pow(10.0, -25.0 / 20.0), 1e-14);
}

TEST(ChannelVector, ReceiverOnBuildingIsDomainError) {
  EnvScene s = EnvScene::empty(8, 8, 1.0, {1, 1});
  s.buildings[s.index({5, 5})] = 1;
  EXPECT_THROW(channel_vector(s, ChannelParams{}, {5, 5}), DomainError);
}

TEST(ChannelVector, SingleWallImageSource) {
  // Solid strip over rows 0..2 gives one reflecting face at y = 3.
  EnvScene s = EnvScene::empty(30, 30, 1.0, {10, 10});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 30; ++c) s.buildings[s.index({r, c})] = 1;
  ChannelParams p;
  const Pixel q{10, 20};
  const auto h = channel_vector(s, p, q);

  const double g_los = std::pow(10.0, -1.5);
  const double img_y = 2 * 3.0 - 10.5;
  const double path = std::hypot(20.5 - 10.5, 10.5 - img_y);
  const double g_ref = std::pow(path, -1.5) * std::pow(10.0, -0.5);
  const double bounce_x = 10.5 + (3.0 - img_y) / (10.5 - img_y) * 10.0;
  const double th_los = kPi / 2, th_ref = std::atan2(bounce_x - 10.5, 10.5 - 3.0);
  for (std::size_t m = 0; m < p.n_antennas; ++m) {
    const cplx expect = g_los * std::polar(1.0, -kPi * m * std::sin(th_los)) + g_ref * std::polar(1.0, -kPi * m * std::sin(th_ref));
    EXPECT_NEAR(std::abs(h[m] - expect), 0.0, 1e-12);
  }
}

TEST(ChannelVector, ReflectionNeedsBothLegsClear) {
  EnvScene s = EnvScene::empty(30, 30, 1.0, {10, 10});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 30; ++c) s.buildings[s.index({r, c})] = 1;
  s.buildings[s.index({5, 13})] = 1;  // sits on the tx -> bounce leg
  ChannelParams p;
  const auto h = channel_vector(s, p, {10, 20});
  for (const auto& v : h) EXPECT_NEAR(mag(v), std::pow(10.0, -1.5), 1e-14);
}

TEST(BeamGain, SingleActiveElement) {
  CVec h{1.0, 0.0, 0.0};
  BeamVector w;
  w.power_budget = 2.0;
  w.weights = {std::sqrt(2.0), 0.0, 0.0};
  EXPECT_NEAR(beam_gain_db(h, w, -150.0), 10.0 * std::log10(2.0), 1e-12);
}

TEST(BeamGain, OrthogonalBeamHitsFloor) {
  CVec h{1.0, 0.0};
  BeamVector w;
  w.weights = {0.0, 1.0};
  EXPECT_EQ(beam_gain_db(h, w, -150.0), -150.0);
}

TEST(BeamGain, LengthMismatch) {
  BeamVector w;
  w.weights = {1.0};
  EXPECT_THROW(beam_gain_db(CVec{1.0, 1.0}, w, -150.0), DimensionError);
}

TEST(BeamGain, MatchedFilterIsOptimal) {
  Rng rng(21);
  const double P = 1.0;
  for (int probe = 0; probe < 5; ++probe) {
    CVec h(8);
    double hn = 0.0;
    for (auto& v : h) {
      v = cplx(rng.normal(), rng.normal());
      hn += std::norm(v);
    }
    BeamVector mf;
    mf.power_budget = P;
    for (const auto& v : h) mf.weights.push_back(std::sqrt(P / hn) * v);
    const double best = beam_gain_db(h, mf, -150.0);
    EXPECT_NEAR(best, 10.0 * std::log10(P * hn), 1e-12);
    for (int i = 0; i < 10000; ++i) {
      BeamVector w;
      w.power_budget = P;
      double wn = 0.0;
      for (int m = 0; m < 8; ++m) {
        w.weights.emplace_back(rng.normal(), rng.normal());
        wn += std::norm(w.weights.back());
      }
      for (auto& x : w.weights) x *= std::sqrt(P / wn);
      ASSERT_LE(beam_gain_db(h, w, -150.0), best + 1e-12);
    }
  }
}

TEST(GenerateCkm, MatchedFilterOnOracleChannel) {
  Rng rng(8);
  const EnvScene s = random_scene(rng, 24, 24, 0.1);
  ChannelParams p;
  const Pixel q = random_free(rng, s);
  const CVec h = channel_vector(s, p, q);
  double hn = 0.0;
  for (const auto& v : h) hn += std::norm(v);
  BeamVector mf;
  for (const auto& v : h) mf.weights.push_back(v / std::sqrt(hn));
  const double best = generate_ckm(s, p, mf).values_db[s.index(q)];
  for (int i = 0; i < 10000; ++i) {
    const BeamVector w = random_beam(rng, p.n_antennas, 1.0, 1.0);
    ASSERT_LE(beam_gain_db(h, w, p.floor_db), best + 1e-12);
  }
}

TEST(GenerateCkm, FloorAndMaskContract) {
  Rng rng(9);
  const EnvScene s = random_scene(rng, 32, 32, 0.2);
  ChannelParams p;
  const auto m = generate_ckm(s, p, random_beam(rng, p.n_antennas, 1.0, 0.1));
  for (std::size_t i = 0; i < m.values_db.size(); ++i) {
    EXPECT_EQ(m.valid_mask[i], s.buildings[i] ? 0 : 1);
    EXPECT_GE(m.values_db[i], p.floor_db);
    if (s.buildings[i]) EXPECT_EQ(m.values_db[i], p.floor_db);
  }
}

TEST(GenerateCkm, EqualsPerPixelCalls) {
  Rng rng(10);
  const EnvScene s = random_scene(rng, 24, 24, 0.15);
  ChannelParams p;
  const BeamVector w = random_beam(rng, p.n_antennas, 1.0, 0.1);
  const auto m = generate_ckm(s, p, w);
  for (int r = 0; r < s.height_px; ++r)
    for (int c = 0; c < s.width_px; ++c) {
      if (s.occupied({r, c})) continue;
      EXPECT_EQ(m.values_db[s.index({r, c})], beam_gain_db(channel_vector(s, p, {r, c}), w, p.floor_db));
    }
}

TEST(GenerateCkm, MainLobeFollowsSteeringAngle) {
  const EnvScene s = EnvScene::empty(64, 64, 2.0, {32, 32});
  ChannelParams p;
  const ChannelField field = channel_field(s, p);
  // Beyond about ±1.25 rad a half-wavelength array's beam flattens toward
  // endfire and a grating lobe appears at the opposite endfire.
  const int bins = 64;
  const double bin = 2 * kPi / bins;
  for (int i = 0; i < 17; ++i) {
    const double theta = -1.2 + 2.4 * i / 16.0;
    const auto m = apply_beam(field, p, steered_beam(theta, p.n_antennas));
    EXPECT_LE(std::abs(main_lobe_angle(m, s.tx_pos, 20, bins) - theta), bin) << "theta " << theta;
  }
}

TEST(GenerateCkm, PowerScalingShiftsByTwentyLogC) {
  Rng rng(12);
  const EnvScene s = random_scene(rng, 24, 24, 0.1);
  ChannelParams p;
  const BeamVector w = random_beam(rng, p.n_antennas, 1.0, 0.1);
  const auto base = generate_ckm(s, p, w);
  for (double c : {0.5, 0.1, 0.9}) {
    BeamVector ws = w;
    for (auto& x : ws.weights) x *= c;
    const auto m = generate_ckm(s, p, ws);
    for (std::size_t i = 0; i < m.values_db.size(); ++i) {
      if (!m.valid_mask[i] || base.values_db[i] + 20 * std::log10(c) <= p.floor_db) continue;
      EXPECT_NEAR(m.values_db[i] - base.values_db[i], 20.0 * std::log10(c), 1e-9);
    }
  }
}

TEST(GenerateCkm, MirrorSymmetry) {
  Rng rng(13);
  for (double density : {0.0, 0.1}) {
    EnvScene s = random_scene(rng, 28, 24, density);
    EnvScene mirrored = s;
    for (int r = 0; r < s.height_px; ++r)
      for (int c = 0; c < s.width_px; ++c) mirrored.buildings[s.index({r, s.width_px - 1 - c})] = s.buildings[s.index({r, c})];
    mirrored.tx_pos = {s.tx_pos.row, s.width_px - 1 - s.tx_pos.col};
    ChannelParams p;
    const double theta = 0.37;
    const auto a = generate_ckm(s, p, steered_beam(theta, p.n_antennas));
    const auto b = generate_ckm(mirrored, p, steered_beam(-theta, p.n_antennas));
    for (int r = 0; r < s.height_px; ++r)
      for (int c = 0; c < s.width_px; ++c)
        EXPECT_NEAR(a.values_db[s.index({r, c})], b.values_db[s.index({r, s.width_px - 1 - c})], 1e-9);
  }
}

TEST(GenerateCkm, MonotoneDecayAlongMainLobe) {
  const EnvScene s = EnvScene::empty(64, 64, 2.0, {60, 3});
  ChannelParams p;
  const auto up = generate_ckm(s, p, steered_beam(0.0, p.n_antennas));
  for (int k = 2; k < 60; ++k) EXPECT_LE(up.values_db[s.index({60 - k, 3})], up.values_db[s.index({61 - k, 3})]);
  const auto diag = generate_ckm(s, p, steered_beam(kPi / 4, p.n_antennas));
  for (int k = 2; k < 58; ++k) EXPECT_LE(diag.values_db[s.index({60 - k, 3 + k})], diag.values_db[s.index({61 - k, 2 + k})]);
}

TEST(RandomBeam, PowerAndPerturbation) {
  Rng rng(14);
  for (int i = 0; i < 100; ++i) {
    const BeamVector b = random_beam(rng, 8, 1.5, 0.1);
    EXPECT_NEAR(b.power(), 1.5, 1e-12);
    b.validate();
  }
  BeamVector over;
  over.weights = {2.0};
  EXPECT_THROW(over.validate(), ConfigError);
}

namespace {

DatasetConfig small_dataset(int scenes, int tx, int beams) {
  DatasetConfig cfg;
  cfg.scenes = scenes;
  cfg.tx_per_scene = tx;
  cfg.beams_per_tx = beams;
  cfg.heldout_tx_per_scene = 1;
  cfg.heldout_beams_per_tx = 1;
  cfg.scene.width = 32;
  cfg.scene.height = 32;
  cfg.scene.buildings_min = 2;
  cfg.scene.buildings_max = 4;
  cfg.scene.building_max_px = 8;
  cfg.scene.tx_margin_px = 6;
  cfg.scene.tx_min_separation_px = 6;
  cfg.seed = 77;
  return cfg;
}

}  // namespace

TEST(Dataset, RecordCountIsProduct) {
  TempDir dir;
  const json m = generate_dataset(small_dataset(2, 3, 4), dir.path());
  EXPECT_EQ(m.at("records").size(), 24u);
  std::size_t in_splits = 0;
  for (const auto& name : kSplitNames) in_splits += m.at("splits").at(name).size();
  EXPECT_EQ(in_splits, 24u);
  EXPECT_EQ(m.at("splits").at("unseen_locations").size(), 2u * 1 * 4);
  EXPECT_EQ(m.at("splits").at("unseen_beams").size(), 2u * 2 * 1);
}

TEST(Dataset, SameSeedByteIdentical) {
  TempDir a, b;
  auto cfg = small_dataset(2, 2, 3);
  cfg.export_png = true;
  generate_dataset(cfg, a.path());
  generate_dataset(cfg, b.path());
  EXPECT_EQ(read_bytes(a.path() / "manifest.json"), read_bytes(b.path() / "manifest.json"));
  for (const auto& e : fs::directory_iterator(a.path() / "records"))
    EXPECT_EQ(read_bytes(e.path()), read_bytes(b.path() / "records" / e.path().filename())) << e.path();
  cfg.seed = 78;
  TempDir c;
  generate_dataset(cfg, c.path());
  EXPECT_NE(read_bytes(a.path() / "manifest.json"), read_bytes(c.path() / "manifest.json"));
}

TEST(Dataset, UnseenBeamsAbsentFromTraining) {
  TempDir dir;
  generate_dataset(small_dataset(2, 3, 4), dir.path());
  const Dataset d = Dataset::load(dir.path());
  std::set<std::vector<float>> train;
  for (auto i : d.split("train")) train.insert(read_tensor_file(d.root / d.records[i].beam_file).data);
  const auto unseen = d.split("unseen_beams");
  ASSERT_FALSE(unseen.empty());
  for (auto i : unseen) {
    EXPECT_EQ(train.count(read_tensor_file(d.root / d.records[i].beam_file).data), 0u);
    EXPECT_FALSE(d.scenes[d.records[i].scene].tx[d.records[i].tx].heldout);
  }
  for (auto i : d.split("unseen_locations")) EXPECT_TRUE(d.scenes[d.records[i].scene].tx[d.records[i].tx].heldout);
}

TEST(Dataset, StoredMapsMatchOracle) {
  TempDir dir;
  generate_dataset(small_dataset(1, 2, 2), dir.path());
  const Dataset d = Dataset::load(dir.path());
  for (const auto& r : d.records) {
    const ChannelMap stored = d.truth_of(r);
    const ChannelMap fresh = generate_ckm(d.scene_of(r), d.config.channel, stored.beam);
    EXPECT_EQ(stored.valid_mask, fresh.valid_mask);
    for (std::size_t i = 0; i < fresh.values_db.size(); ++i) EXPECT_NEAR(stored.values_db[i], fresh.values_db[i], 1e-3);
    const auto onehot = read_tensor_file(d.root / d.manifest["scenes"][r.scene]["tx"][r.tx]["onehot"].get<std::string>());
    float total = 0;
    for (float v : onehot.data) total += v;
    EXPECT_EQ(total, 1.0f);
    EXPECT_EQ(onehot.data[static_cast<std::size_t>(d.scene_of(r).index(d.scene_of(r).tx_pos))], 1.0f);
  }
}

TEST(Dataset, UnwritableOutputIsIoError) { EXPECT_THROW(generate_dataset(small_dataset(1, 2, 2), "/proc/beamckm/nope"), IoError); }

TEST(Dataset, MissingSplitIsConfigError) {
  TempDir dir;
  generate_dataset(small_dataset(1, 2, 2), dir.path());
  Dataset d = Dataset::load(dir.path());
  EXPECT_THROW(d.split("unseen_weather"), ConfigError);
}

TEST(Dataset, ConfigRejectsUnknownKeys) {
  EXPECT_THROW(dataset_config_from_json(json{{"scenez", 3}}), ConfigError);
  EXPECT_THROW(dataset_config_from_json(json{{"scenes", "three"}}), ConfigError);
  const DatasetConfig c = small_dataset(2, 3, 4);
  EXPECT_EQ(to_json(dataset_config_from_json(to_json(c))), to_json(c));
}
