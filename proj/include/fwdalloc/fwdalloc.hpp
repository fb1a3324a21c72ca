#pragma once

// Umbrella header for the whole library.

#include "fwdalloc/allocator.hpp"
#include "fwdalloc/config.hpp"
#include "fwdalloc/data.hpp"
#include "fwdalloc/estimators.hpp"
#include "fwdalloc/experiment.hpp"
#include "fwdalloc/linalg.hpp"
#include "fwdalloc/metrics.hpp"
#include "fwdalloc/model.hpp"
#include "fwdalloc/optim.hpp"
#include "fwdalloc/rng.hpp"
#include "fwdalloc/selftest.hpp"
#include "fwdalloc/stats.hpp"
#include "fwdalloc/trainer.hpp"
