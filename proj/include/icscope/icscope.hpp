#pragma once

#include "icscope/attribution.hpp"
#include "icscope/bars.hpp"
#include "icscope/cav.hpp"
#include "icscope/config.hpp"
#include "icscope/errors.hpp"
#include "icscope/harness.hpp"
#include "icscope/image.hpp"
#include "icscope/network.hpp"
#include "icscope/network_io.hpp"
#include "icscope/parallel.hpp"
#include "icscope/rng.hpp"
#include "icscope/scores.hpp"
#include "icscope/stats.hpp"
#include "icscope/train.hpp"
