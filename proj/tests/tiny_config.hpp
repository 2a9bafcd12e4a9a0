// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "beamckm/serialize.hpp"

/// 32x32 scenes, 2 scenes x 3 tx x 3 beams, a handful of steps per stage.
inline beamckm::json tiny_run_json() {
  return beamckm::json::parse(R"({
    "dataset": {"scenes": 2, "tx_per_scene": 3, "heldout_tx_per_scene": 1, "beams_per_tx": 3, "heldout_beams_per_tx": 1,
                "scene": {"width": 32, "height": 32, "buildings_min": 2, "buildings_max": 4, "building_min_px": 3,
                          "building_max_px": 8, "tx_margin_px": 6, "tx_min_separation_px": 6}},
    "vae": {"height": 32, "width": 32, "enc_channels": [8, 8, 8], "dec_channels": [8, 8, 8]},
    "cond": {"head_channels": 8, "channels": [8, 8, 8], "out_channels": 8},
    "dit": {"depth": 1, "heads": 2, "hidden": 16},
    "diffusion": {"T": 20},
    "vae_train": {"steps": 6, "batch": 2, "log_every": 1, "checkpoint_every": 3},
    "dit_train": {"steps": 6, "batch": 2, "log_every": 1, "checkpoint_every": 3}
  })");
}
