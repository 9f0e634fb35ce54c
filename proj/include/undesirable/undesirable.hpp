#pragma once

#include "undesirable/adam.hpp"
#include "undesirable/dataset.hpp"
#include "undesirable/explainer.hpp"
#include "undesirable/gradcheck.hpp"
#include "undesirable/metrics.hpp"
#include "undesirable/models.hpp"
#include "undesirable/netpbm.hpp"
#include "undesirable/objectives.hpp"
#include "undesirable/ops.hpp"
#include "undesirable/perturbation.hpp"
#include "undesirable/rng.hpp"
#include "undesirable/tensor.hpp"
#include "undesirable/training.hpp"
#include "undesirable/weights.hpp"

namespace undesirable {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace undesirable
