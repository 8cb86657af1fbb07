#pragma once

#include "msfodf/errors.hpp"
#include "msfodf/qspace.hpp"
#include "msfodf/harmonics.hpp"
#include "msfodf/shore.hpp"
#include "msfodf/phantom.hpp"
#include "msfodf/deconv.hpp"
#include "msfodf/autodiff.hpp"
#include "msfodf/learner.hpp"
#include "msfodf/bench.hpp"
