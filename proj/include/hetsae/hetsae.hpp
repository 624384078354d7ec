#pragma once

// Umbrella header for the estimation library (the CLI lives in cli.hpp).

#include "hetsae/errors.hpp"
#include "hetsae/random.hpp"
#include "hetsae/mlg.hpp"
#include "hetsae/spatial.hpp"
#include "hetsae/gibbs.hpp"
#include "hetsae/models.hpp"
#include "hetsae/survey.hpp"
#include "hetsae/eval.hpp"
