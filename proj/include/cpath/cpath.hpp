#pragma once

// Umbrella header: the whole library.

#include "cpath/errors.hpp"
#include "cpath/rng.hpp"
#include "cpath/hash.hpp"
#include "cpath/tensor.hpp"
#include "cpath/core_math.hpp"
#include "cpath/sampling.hpp"
#include "cpath/loss.hpp"
#include "cpath/autodiff.hpp"
#include "cpath/nn.hpp"
#include "cpath/encoder.hpp"
#include "cpath/checkpoint.hpp"
#include "cpath/momentum.hpp"
#include "cpath/image.hpp"
#include "cpath/augment.hpp"
#include "cpath/synthetic.hpp"
#include "cpath/pipeline.hpp"
#include "cpath/config.hpp"
#include "cpath/trainer.hpp"
#include "cpath/features.hpp"
#include "cpath/metrics.hpp"
#include "cpath/mil.hpp"
#include "cpath/report.hpp"
#include "cpath/runner.hpp"
