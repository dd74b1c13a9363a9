#pragma once

// Umbrella header.

#include "plora/autodiff.hpp"
#include "plora/checkpoint.hpp"
#include "plora/config.hpp"
#include "plora/data.hpp"
#include "plora/errors.hpp"
#include "plora/experiment.hpp"
#include "plora/logging.hpp"
#include "plora/model.hpp"
#include "plora/params.hpp"
#include "plora/plora_layer.hpp"
#include "plora/rng.hpp"
#include "plora/sampler.hpp"
#include "plora/schedule.hpp"
#include "plora/tensor.hpp"
#include "plora/trainer.hpp"
#include "plora/vision.hpp"
