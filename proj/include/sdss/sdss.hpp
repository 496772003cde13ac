#pragma once

#include "sdss/consistency_lab.hpp"
#include "sdss/dataset.hpp"
#include "sdss/decision.hpp"
#include "sdss/error.hpp"
#include "sdss/evaluation.hpp"
#include "sdss/objective.hpp"
#include "sdss/optimizer.hpp"
#include "sdss/policy.hpp"
#include "sdss/qlearning.hpp"
#include "sdss/quadrature.hpp"
#include "sdss/rng.hpp"
#include "sdss/surrogates.hpp"
