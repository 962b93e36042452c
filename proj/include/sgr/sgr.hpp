// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sgr/analysis.hpp"
#include "sgr/config.hpp"
#include "sgr/dataio.hpp"
#include "sgr/etf.hpp"
#include "sgr/gradcheck.hpp"
#include "sgr/linalg.hpp"
#include "sgr/localnet.hpp"
#include "sgr/pipeline.hpp"
#include "sgr/tape.hpp"
#include "sgr/tensor.hpp"
#include "sgr/theory.hpp"
#include "sgr/train.hpp"
