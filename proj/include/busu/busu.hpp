#pragma once

#include "busu/architectures.hpp"
#include "busu/autodiff.hpp"
#include "busu/data.hpp"
#include "busu/gradcheck.hpp"
#include "busu/gradcheck_suites.hpp"
#include "busu/image_io.hpp"
#include "busu/layers.hpp"
#include "busu/metrics.hpp"
#include "busu/ops.hpp"
#include "busu/rng.hpp"
#include "busu/tensor.hpp"
#include "busu/training.hpp"
