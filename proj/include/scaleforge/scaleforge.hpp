// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "scaleforge/blocks.hpp"
#include "scaleforge/checkpoint.hpp"
#include "scaleforge/clip.hpp"
#include "scaleforge/config.hpp"
#include "scaleforge/data.hpp"
#include "scaleforge/error.hpp"
#include "scaleforge/gradcheck.hpp"
#include "scaleforge/layers.hpp"
#include "scaleforge/metrics.hpp"
#include "scaleforge/moe.hpp"
#include "scaleforge/ops.hpp"
#include "scaleforge/optim.hpp"
#include "scaleforge/rng.hpp"
#include "scaleforge/sweep.hpp"
#include "scaleforge/tensor.hpp"
#include "scaleforge/trainer.hpp"
