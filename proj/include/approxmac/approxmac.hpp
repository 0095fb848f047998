// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "approxmac/error.hpp"
#include "approxmac/qformat.hpp"
#include "approxmac/rng.hpp"
#include "approxmac/multiplier_spec.hpp"
#include "approxmac/multipliers.hpp"
#include "approxmac/tensor.hpp"
#include "approxmac/parallel.hpp"
#include "approxmac/layers.hpp"
#include "approxmac/graph.hpp"
#include "approxmac/modelio.hpp"
#include "approxmac/errstat.hpp"
