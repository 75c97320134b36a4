#pragma once

#include "lacim/adam.hpp"
#include "lacim/autodiff.hpp"
#include "lacim/dataset.hpp"
#include "lacim/evaluation.hpp"
#include "lacim/experiment.hpp"
#include "lacim/inference.hpp"
#include "lacim/matrix.hpp"
#include "lacim/mlp.hpp"
#include "lacim/model.hpp"
#include "lacim/rng.hpp"
#include "lacim/scm.hpp"
#include "lacim/theory.hpp"
