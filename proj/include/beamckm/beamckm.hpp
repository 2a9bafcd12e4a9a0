// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "beamckm/adam.hpp"
#include "beamckm/condition_encoder.hpp"
#include "beamckm/config.hpp"
#include "beamckm/dataset.hpp"
#include "beamckm/diffusion.hpp"
#include "beamckm/dit.hpp"
#include "beamckm/errors.hpp"
#include "beamckm/metrics.hpp"
#include "beamckm/nn.hpp"
#include "beamckm/ops.hpp"
#include "beamckm/pipeline.hpp"
#include "beamckm/png.hpp"
#include "beamckm/propagation.hpp"
#include "beamckm/rng.hpp"
#include "beamckm/serialize.hpp"
#include "beamckm/tensor.hpp"
#include "beamckm/vae.hpp"
