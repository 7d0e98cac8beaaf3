#pragma once

// Umbrella header for the vig library: a self-contained dynamic-graph
// pyramid classifier for multispectral image tiles, with reverse-mode
// differentiation, training loop, metrics and bit-exact persistence.

#include "vig/autograd.hpp"
#include "vig/checkpoint.hpp"
#include "vig/core.hpp"
#include "vig/gradcheck.hpp"
#include "vig/graph.hpp"
#include "vig/grapher.hpp"
#include "vig/io.hpp"
#include "vig/metrics.hpp"
#include "vig/model.hpp"
#include "vig/ops.hpp"
#include "vig/runconfig.hpp"
#include "vig/train.hpp"
