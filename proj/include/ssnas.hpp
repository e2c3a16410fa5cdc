// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "ssnas/errors.hpp"
#include "ssnas/json_keys.hpp"
#include "ssnas/rng.hpp"
#include "ssnas/tensor.hpp"
#include "ssnas/autodiff.hpp"
#include "ssnas/ops.hpp"
#include "ssnas/losses.hpp"
#include "ssnas/parallel.hpp"
#include "ssnas/data.hpp"
#include "ssnas/modules.hpp"
#include "ssnas/supernet.hpp"
#include "ssnas/network.hpp"
#include "ssnas/checkpoint.hpp"
#include "ssnas/optim.hpp"
#include "ssnas/search.hpp"
#include "ssnas/finetune.hpp"
#include "ssnas/experiment.hpp"
