// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "beamckm/propagation.hpp"

namespace beamckm {

/// Returned by nmse_db when prediction and truth agree exactly.
inline constexpr double kPerfectNmseDb = -300.0;

/// Pooled squared-error and energy sums over masked pixels.
struct NmseAccumulator {
  double num = 0.0;
  double den = 0.0;

  void add(const ChannelMap& pred, const ChannelMap& truth) {
    if (pred.width_px != truth.width_px || pred.height_px != truth.height_px || pred.values_db.size() != truth.values_db.size())
      throw DimensionError("nmse: map dimensions differ");
    if (pred.valid_mask != truth.valid_mask) throw DimensionError("nmse: masks differ");
    for (std::size_t i = 0; i < truth.values_db.size(); ++i) {
      if (!truth.valid_mask[i]) continue;
      const double e = pred.values_db[i] - truth.values_db[i];
      num += e * e;
      den += truth.values_db[i] * truth.values_db[i];
    }
  }

  double value_db() const {
    if (!(den > 0.0)) throw EvaluationError("nmse: reference energy is zero");
    if (num == 0.0) return kPerfectNmseDb;
    return 10.0 * std::log10(num / den);
  }
};

/// 10 log10(Σ|Ψ̂ − Ψ|² / Σ|Ψ|²) over the valid mask, in the dB domain.
inline double nmse_db(const ChannelMap& pred, const ChannelMap& truth) {
  NmseAccumulator acc;
  acc.add(pred, truth);
  return acc.value_db();
}

/// Folds an angle into the array's unambiguous field of view [-π/2, π/2].
/// A ULA responds to sin θ only, so θ and π - θ are indistinguishable.
inline double fold_to_front(double a) {
  constexpr double pi = std::numbers::pi;
  if (a > pi / 2) return pi - a;
  if (a < -pi / 2) return -pi - a;
  return a;
}

/// Direction of the strongest ring sector around `tx`.
///
/// Bin k is centred at -π + 2πk/bins in the broadside convention of
/// broadside_angle. The mean map value of valid ring pixels (|r - radius|
/// < 0.5) is taken per bin, the first maximal bin wins, and its centre is
/// returned folded into [-π/2, π/2].
inline double main_lobe_angle(const ChannelMap& map, Pixel tx, int radius_px, int bins) {
  if (bins < 1) throw ConfigError("main_lobe_angle: bins must be positive");
  if (radius_px < 1) throw ConfigError("main_lobe_angle: radius must be positive");
  if (tx.row - radius_px < 0 || tx.col - radius_px < 0 || tx.row + radius_px >= map.height_px || tx.col + radius_px >= map.width_px)
    throw DomainError("main_lobe_angle: ring leaves the grid");
  const double step = 2.0 * std::numbers::pi / bins;
  std::vector<double> sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<int> count(static_cast<std::size_t>(bins), 0);
  for (int dr = -radius_px; dr <= radius_px; ++dr)
    for (int dc = -radius_px; dc <= radius_px; ++dc) {
      if (std::abs(std::hypot(dr, dc) - radius_px) >= 0.5) continue;
      const std::size_t i = static_cast<std::size_t>((tx.row + dr) * map.width_px + tx.col + dc);
      if (!map.valid_mask[i]) continue;
      const double phi = std::atan2(static_cast<double>(dc), static_cast<double>(-dr));
      const long k = std::lround((phi + std::numbers::pi) / step) % bins;
      sum[static_cast<std::size_t>(k)] += map.values_db[i];
      ++count[static_cast<std::size_t>(k)];
    }
  int best = -1;
  double best_val = 0.0;
  for (int k = 0; k < bins; ++k) {
    if (count[static_cast<std::size_t>(k)] == 0) continue;
    const double m = sum[static_cast<std::size_t>(k)] / count[static_cast<std::size_t>(k)];
    if (best < 0 || m > best_val) {
      best = k;
      best_val = m;
    }
  }
  if (best < 0) throw EvaluationError("main_lobe_angle: no valid ring pixels");
  return fold_to_front(-std::numbers::pi + step * best);
}

}  // namespace beamckm
