#pragma once

#include "bench.hpp"
#include "core.hpp"
#include "experiment.hpp"
#include "gp.hpp"
#include "kernels.hpp"
#include "metrics.hpp"
#include "neural.hpp"
#include "optim.hpp"
#include "seek.hpp"
