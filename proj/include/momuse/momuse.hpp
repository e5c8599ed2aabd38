// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "momuse/data_sim.hpp"
#include "momuse/error.hpp"
#include "momuse/io.hpp"
#include "momuse/metrics.hpp"
#include "momuse/model.hpp"
#include "momuse/momentum.hpp"
#include "momuse/numerics.hpp"
#include "momuse/random.hpp"
#include "momuse/run_config.hpp"
#include "momuse/streaming.hpp"
#include "momuse/training.hpp"
