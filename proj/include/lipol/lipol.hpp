#pragma once

#include "lipol/errors.hpp"
#include "lipol/physics_core.hpp"
#include "lipol/quadrature.hpp"
#include "lipol/signal_model.hpp"
#include "lipol/random.hpp"
#include "lipol/synthetic_experiment.hpp"
#include "lipol/least_squares.hpp"
#include "lipol/fringe_fit.hpp"
#include "lipol/analysis.hpp"
#include "lipol/io.hpp"
#include "lipol/pipeline.hpp"
