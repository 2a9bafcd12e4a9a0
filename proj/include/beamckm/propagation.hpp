// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "beamckm/errors.hpp"
#include "beamckm/rng.hpp"

namespace beamckm {

using cplx = std::complex<double>;
using CVec = std::vector<cplx>;

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Building occupancy grid with a transmitter.
struct EnvScene {
  int width_px = 0;
  int height_px = 0;
  double resolution_m = 2.0;
  std::vector<std::uint8_t> buildings;  // row-major, 1 = occupied
  Pixel tx_pos;
  double tx_height_m = 1.5;  // informational

  bool inside(Pixel p) const { return p.row >= 0 && p.col >= 0 && p.row < height_px && p.col < width_px; }
  bool occupied(Pixel p) const { return buildings[static_cast<std::size_t>(p.row * width_px + p.col)] != 0; }
  std::size_t index(Pixel p) const { return static_cast<std::size_t>(p.row * width_px + p.col); }

  /// Empty scene with the transmitter at `tx`.
  static EnvScene empty(int width, int height, double resolution, Pixel tx) {
    EnvScene s;
    s.width_px = width;
    s.height_px = height;
    s.resolution_m = resolution;
    s.buildings.assign(static_cast<std::size_t>(width * height), 0);
    s.tx_pos = tx;
    return s;
  }

  void validate() const {
    if (width_px <= 0 || height_px <= 0) throw ConfigError("scene: non-positive grid size");
    if (resolution_m <= 0) throw ConfigError("scene: resolution must be positive");
    if (buildings.size() != static_cast<std::size_t>(width_px * height_px)) throw DimensionError("scene: building grid size mismatch");
    for (auto b : buildings)
      if (b > 1) throw ConfigError("scene: building grid must be binary");
    if (!inside(tx_pos)) throw DomainError("scene: transmitter outside grid");
    if (occupied(tx_pos)) throw DomainError("scene: transmitter on a building pixel");
  }
};

struct BeamVector {
  CVec weights;
  double power_budget = 1.0;

  std::size_t n_antennas() const { return weights.size(); }

  double power() const {
    double p = 0.0;
    for (const auto& w : weights) p += std::norm(w);
    return p;
  }

  void validate() const {
    if (weights.empty()) throw DimensionError("beam: no antenna weights");
    if (power() > power_budget + 1e-9) throw ConfigError("beam: power exceeds budget");
  }

  /// Interleaved (re, im) reals.
  std::vector<double> interleaved() const {
    std::vector<double> out;
    out.reserve(2 * weights.size());
    for (const auto& w : weights) {
      out.push_back(w.real());
      out.push_back(w.imag());
    }
    return out;
  }

  static BeamVector from_interleaved(const std::vector<double>& v, double power_budget = 1.0) {
    if (v.size() % 2 != 0) throw DimensionError("beam: interleaved length must be even");
    BeamVector b;
    b.power_budget = power_budget;
    for (std::size_t i = 0; i < v.size(); i += 2) b.weights.emplace_back(v[i], v[i + 1]);
    return b;
  }
};

struct ChannelParams {
  double path_loss_exponent = 3.0;
  double reference_distance_m = 1.0;
  double shadow_penalty_db = 25.0;
  bool reflection_enabled = true;
  double reflection_loss_db = 10.0;
  double noise_floor_db = -std::numeric_limits<double>::infinity();  // disabled
  double floor_db = -150.0;
  double carrier_ghz = 2.4;  // informational
  std::size_t n_antennas = 8;
  double spacing_ratio = 0.5;  // element spacing / wavelength

  void validate() const {
    if (!(path_loss_exponent > 0)) throw ConfigError("channel: path loss exponent must be positive");
    if (!(reference_distance_m > 0)) throw ConfigError("channel: reference distance must be positive");
    if (!(floor_db < 0)) throw ConfigError("channel: floor_db must be negative");
    if (n_antennas == 0) throw ConfigError("channel: need at least one antenna");
    if (!(spacing_ratio > 0)) throw ConfigError("channel: spacing ratio must be positive");
  }
};

/// Per-pixel dB map with its free-space mask.
struct ChannelMap {
  int width_px = 0;
  int height_px = 0;
  std::vector<double> values_db;
  std::vector<std::uint8_t> valid_mask;
  BeamVector beam;
  std::string scene_id;
};

// ---------------------------------------------------------------------------
// Array response
// ---------------------------------------------------------------------------

/// ULA response: element m gets exp(-j 2π d m sin θ), θ from broadside.
inline CVec steering_vector(double theta, std::size_t n, double spacing_ratio = 0.5) {
  CVec a(n);
  const double s = std::sin(theta);
  for (std::size_t m = 0; m < n; ++m) a[m] = std::polar(1.0, -2.0 * std::numbers::pi * spacing_ratio * static_cast<double>(m) * s);
  return a;
}

/// Steering vector scaled to total power `power`.
inline BeamVector steered_beam(double theta, std::size_t n, double power = 1.0, double spacing_ratio = 0.5) {
  BeamVector b;
  b.power_budget = power;
  b.weights = steering_vector(theta, n, spacing_ratio);
  const double s = std::sqrt(power / static_cast<double>(n));
  for (auto& w : b.weights) w *= s;
  return b;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Angle of pixel q seen from pixel tx, measured from array broadside.
///
/// Broadside points toward decreasing row index ("up" in the image) and
/// positive angles turn toward increasing column index.
inline double broadside_angle(Pixel tx, Pixel q) {
  return std::atan2(static_cast<double>(q.col - tx.col), static_cast<double>(tx.row - q.row));
}

/// Visits every pixel of the supercover line between the centres of a and b.
///
/// Boundary crossings are compared in exact integer arithmetic; when the
/// segment passes through a lattice corner both side pixels are visited.
template <class F>
void supercover(Pixel a, Pixel b, F&& visit) {
  const int dx = b.col - a.col, dy = b.row - a.row;
  const int nx = std::abs(dx), ny = std::abs(dy);
  const int sx = dx > 0 ? 1 : -1, sy = dy > 0 ? 1 : -1;
  Pixel p = a;
  visit(p);
  int kx = 1, ky = 1;
  while (kx <= nx || ky <= ny) {
    // x boundary k is crossed at t = (2k-1) / (2 nx)
    long long cmp = 0;
    if (ky > ny) cmp = -1;
    else if (kx > nx) cmp = 1;
    else cmp = static_cast<long long>(2 * kx - 1) * ny - static_cast<long long>(2 * ky - 1) * nx;
    if (cmp < 0) {
      p.col += sx;
      ++kx;
    } else if (cmp > 0) {
      p.row += sy;
      ++ky;
    } else {
      visit(Pixel{p.row, p.col + sx});
      visit(Pixel{p.row + sy, p.col});
      p.col += sx;
      p.row += sy;
      ++kx;
      ++ky;
    }
    visit(p);
  }
}

/// True iff the supercover line between pixel centres crosses a building
/// pixel other than the endpoints.
inline bool los_blocked(const EnvScene& scene, Pixel a, Pixel b) {
  if (!scene.inside(a) || !scene.inside(b)) throw DomainError("los_blocked: endpoint outside grid");
  bool blocked = false;
  supercover(a, b, [&](Pixel p) {
    if (blocked || p == a || p == b) return;
    if (scene.inside(p) && scene.occupied(p)) blocked = true;
  });
  return blocked;
}

namespace detail {

/// Amanatides-Woo traversal of a segment between continuous points given
/// in pixel units (x = column, y = row). Returns true if any building
/// pixel is touched.
inline bool segment_blocked(const EnvScene& scene, double x0, double y0, double x1, double y1) {
  int cx = static_cast<int>(std::floor(x0)), cy = static_cast<int>(std::floor(y0));
  const int ex = static_cast<int>(std::floor(x1)), ey = static_cast<int>(std::floor(y1));
  const double dx = x1 - x0, dy = y1 - y0;
  const int sx = dx > 0 ? 1 : -1, sy = dy > 0 ? 1 : -1;
  const double inf = std::numeric_limits<double>::infinity();
  const double tdx = dx != 0 ? std::abs(1.0 / dx) : inf, tdy = dy != 0 ? std::abs(1.0 / dy) : inf;
  double tmx = dx != 0 ? ((sx > 0 ? (cx + 1 - x0) : (x0 - cx)) * tdx) : inf;
  double tmy = dy != 0 ? ((sy > 0 ? (cy + 1 - y0) : (y0 - cy)) * tdy) : inf;
  auto hit = [&](int c, int r) { return scene.inside({r, c}) && scene.occupied({r, c}); };
  if (hit(cx, cy)) return true;
  const int steps = std::abs(ex - cx) + std::abs(ey - cy);
  for (int i = 0; i < steps + 2 && (cx != ex || cy != ey); ++i) {
    if (std::abs(tmx - tmy) < 1e-12) {
      if (hit(cx + sx, cy) || hit(cx, cy + sy)) return true;
      cx += sx;
      cy += sy;
      tmx += tdx;
      tmy += tdy;
    } else if (tmx < tmy) {
      cx += sx;
      tmx += tdx;
    } else {
      cy += sy;
      tmy += tdy;
    }
    if (hit(cx, cy)) return true;
  }
  return false;
}

}  // namespace detail

/// Axis-aligned building face run, usable as a specular reflector.
struct Wall {
  bool vertical = true;  // line x = coord (else y = coord), pixel units
  double coord = 0.0;
  double lo = 0.0, hi = 0.0;  // extent along the wall
  int facing = 1;             // +1: free side at larger coordinate
};

/// Merges building faces that border free in-grid pixels into maximal walls.
inline std::vector<Wall> extract_walls(const EnvScene& scene) {
  std::vector<Wall> walls;
  const int w = scene.width_px, h = scene.height_px;
  auto occ = [&](int r, int c) { return scene.inside({r, c}) && scene.occupied({r, c}); };
  auto free_in = [&](int r, int c) { return scene.inside({r, c}) && !scene.occupied({r, c}); };
  for (int facing : {-1, 1}) {
    // vertical walls at x = X
    for (int x = 0; x <= w; ++x) {
      int start = -1;
      for (int r = 0; r <= h; ++r) {
        // facing -1: building at column x, free at x-1; facing +1: building at x-1, free at x
        const bool face = r < h && (facing < 0 ? (occ(r, x) && free_in(r, x - 1)) : (occ(r, x - 1) && free_in(r, x)));
        if (face && start < 0) start = r;
        if (!face && start >= 0) {
          walls.push_back({true, static_cast<double>(x), static_cast<double>(start), static_cast<double>(r), facing});
          start = -1;
        }
      }
    }
    for (int y = 0; y <= h; ++y) {
      int start = -1;
      for (int c = 0; c <= w; ++c) {
        const bool face = c < w && (facing < 0 ? (occ(y, c) && free_in(y - 1, c)) : (occ(y - 1, c) && free_in(y, c)));
        if (face && start < 0) start = c;
        if (!face && start >= 0) {
          walls.push_back({false, static_cast<double>(y), static_cast<double>(start), static_cast<double>(c), facing});
          start = -1;
        }
      }
    }
  }
  return walls;
}

/// h(q): line-of-sight ray plus first-order specular images off building
/// walls. Amplitude (max(d, d0)/d0)^(-η/2); blocked LoS is attenuated by the
/// shadow penalty; blocked reflection legs are dropped.
inline CVec channel_vector(const EnvScene& scene, const ChannelParams& params, Pixel q,
                           const std::vector<Wall>* walls = nullptr) {
  if (!scene.inside(q)) throw DomainError("channel_vector: receiver outside grid");
  if (scene.occupied(q)) throw DomainError("channel_vector: receiver on a building pixel");
  const std::size_t n = params.n_antennas;
  const double d0 = params.reference_distance_m;
  auto amplitude = [&](double dist_m) { return std::pow(std::max(dist_m, d0) / d0, -params.path_loss_exponent / 2.0); };

  const Pixel tx = scene.tx_pos;
  const double res = scene.resolution_m;
  const double d_los = std::hypot(static_cast<double>(q.col - tx.col), static_cast<double>(q.row - tx.row)) * res;
  double g_los = amplitude(d_los);
  if (los_blocked(scene, tx, q)) g_los *= std::pow(10.0, -params.shadow_penalty_db / 20.0);
  CVec h = steering_vector(broadside_angle(tx, q), n, params.spacing_ratio);
  for (auto& v : h) v *= g_los;

  if (!params.reflection_enabled) return h;
  std::vector<Wall> local;
  if (!walls) {
    local = extract_walls(scene);
    walls = &local;
  }
  const double refl = std::pow(10.0, -params.reflection_loss_db / 20.0);
  const double tx_x = tx.col + 0.5, tx_y = tx.row + 0.5, q_x = q.col + 0.5, q_y = q.row + 0.5;
  for (const Wall& wall : *walls) {
    const double t_perp = wall.vertical ? tx_x : tx_y, q_perp = wall.vertical ? q_x : q_y;
    if ((t_perp - wall.coord) * wall.facing <= 0 || (q_perp - wall.coord) * wall.facing <= 0) continue;
    const double t_par = wall.vertical ? tx_y : tx_x, q_par = wall.vertical ? q_y : q_x;
    const double img_perp = 2.0 * wall.coord - t_perp;
    const double u = (wall.coord - img_perp) / (q_perp - img_perp);
    const double hit_par = t_par + u * (q_par - t_par);
    if (hit_par < wall.lo || hit_par > wall.hi) continue;
    // nudge the bounce point off the wall into free space
    const double hit_perp = wall.coord + 1e-7 * wall.facing;
    const double hx = wall.vertical ? hit_perp : hit_par, hy = wall.vertical ? hit_par : hit_perp;
    if (detail::segment_blocked(scene, tx_x, tx_y, hx, hy) || detail::segment_blocked(scene, hx, hy, q_x, q_y)) continue;
    const double path_px = std::hypot(q_perp - img_perp, q_par - t_par);
    const double g = amplitude(path_px * res) * refl;
    const double bx = wall.vertical ? wall.coord : hit_par, by = wall.vertical ? hit_par : wall.coord;
    const double theta = std::atan2(bx - tx_x, tx_y - by);
    const CVec a = steering_vector(theta, n, params.spacing_ratio);
    for (std::size_t m = 0; m < n; ++m) h[m] += g * a[m];
  }
  return h;
}

/// max(10 log10(|hᴴw|² + noise), floor_db).
inline double beam_gain_db(const CVec& h, const BeamVector& w, double floor_db, double noise_power = 0.0) {
  if (h.size() != w.weights.size())
    throw DimensionError("beam_gain_db: channel length " + std::to_string(h.size()) + " vs beam length " +
                         std::to_string(w.weights.size()));
  cplx acc{0.0, 0.0};
  for (std::size_t i = 0; i < h.size(); ++i) acc += std::conj(h[i]) * w.weights[i];
  const double p = std::norm(acc) + noise_power;
  if (!(p > 0.0)) return floor_db;
  return std::max(10.0 * std::log10(p), floor_db);
}

/// Per-pixel channel vectors (empty entries on buildings).
struct ChannelField {
  int width_px = 0;
  int height_px = 0;
  std::vector<CVec> h;
  std::vector<std::uint8_t> valid_mask;
};

inline ChannelField channel_field(const EnvScene& scene, const ChannelParams& params) {
  scene.validate();
  params.validate();
  const auto walls = extract_walls(scene);
  ChannelField f;
  f.width_px = scene.width_px;
  f.height_px = scene.height_px;
  f.h.resize(scene.buildings.size());
  f.valid_mask.assign(scene.buildings.size(), 0);
  for (int r = 0; r < scene.height_px; ++r)
    for (int c = 0; c < scene.width_px; ++c) {
      const Pixel q{r, c};
      if (scene.occupied(q)) continue;
      f.h[scene.index(q)] = channel_vector(scene, params, q, &walls);
      f.valid_mask[scene.index(q)] = 1;
    }
  return f;
}

inline double noise_power_of(const ChannelParams& params) {
  return std::isfinite(params.noise_floor_db) ? std::pow(10.0, params.noise_floor_db / 10.0) : 0.0;
}

inline ChannelMap apply_beam(const ChannelField& field, const ChannelParams& params, const BeamVector& w,
                             std::string scene_id = {}) {
  w.validate();
  if (w.n_antennas() != params.n_antennas) throw DimensionError("beam has " + std::to_string(w.n_antennas()) + " weights, array has " + std::to_string(params.n_antennas));
  ChannelMap m;
  m.width_px = field.width_px;
  m.height_px = field.height_px;
  m.values_db.assign(field.h.size(), params.floor_db);
  m.valid_mask = field.valid_mask;
  m.beam = w;
  m.scene_id = std::move(scene_id);
  const double noise = noise_power_of(params);
  for (std::size_t i = 0; i < field.h.size(); ++i)
    if (field.valid_mask[i]) m.values_db[i] = beam_gain_db(field.h[i], w, params.floor_db, noise);
  return m;
}

/// Beam-aware CKM over all free-space pixels; buildings carry floor_db.
inline ChannelMap generate_ckm(const EnvScene& scene, const ChannelParams& params, const BeamVector& w,
                               std::string scene_id = {}) {
  return apply_beam(channel_field(scene, params), params, w, std::move(scene_id));
}

/// Random beam: steering vector at θ ~ U(-π/2, π/2) plus CN(0, σ²) per
/// element, rescaled to the full power budget.
inline BeamVector random_beam(Rng& rng, std::size_t n, double power, double sigma, double spacing_ratio = 0.5,
                              double* theta_out = nullptr) {
  const double theta = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
  if (theta_out) *theta_out = theta;
  BeamVector b;
  b.power_budget = power;
  b.weights = steering_vector(theta, n, spacing_ratio);
  const double comp = sigma / std::sqrt(2.0);
  for (auto& w : b.weights) {
    const double re = rng.normal(), im = rng.normal();
    w += cplx(comp * re, comp * im);
  }
  const double s = std::sqrt(power / b.power());
  for (auto& w : b.weights) w *= s;
  return b;
}

/// Normalized map value in [0, 1]: (db - floor) / (ceiling - floor), clipped.
inline double normalize_db(double db, double floor_db, double ceiling_db = 0.0) {
  return std::clamp((db - floor_db) / (ceiling_db - floor_db), 0.0, 1.0);
}

inline double denormalize_db(double v, double floor_db, double ceiling_db = 0.0) {
  return floor_db + v * (ceiling_db - floor_db);
}

}  // namespace beamckm
