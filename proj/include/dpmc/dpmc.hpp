// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dpmc/accountant.hpp"
#include "dpmc/dataset.hpp"
#include "dpmc/distill.hpp"
#include "dpmc/dp_sgd.hpp"
#include "dpmc/error.hpp"
#include "dpmc/harness.hpp"
#include "dpmc/model.hpp"
#include "dpmc/parallel.hpp"
#include "dpmc/pipeline.hpp"
#include "dpmc/pruning.hpp"
#include "dpmc/rng.hpp"
#include "dpmc/tensor.hpp"
