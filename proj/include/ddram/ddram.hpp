#pragma once

#include "ddram/core.hpp"
#include "ddram/metrics.hpp"
#include "ddram/noise_kernels.hpp"
#include "ddram/ou_process.hpp"
#include "ddram/process.hpp"
#include "ddram/quadrature.hpp"
#include "ddram/rng.hpp"
#include "ddram/samplers.hpp"
#include "ddram/schedules.hpp"
#include "ddram/config.hpp"
#include "ddram/experiment.hpp"
