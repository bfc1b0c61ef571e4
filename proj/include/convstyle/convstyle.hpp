// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "convstyle/adam.hpp"
#include "convstyle/autodiff.hpp"
#include "convstyle/checkpoint.hpp"
#include "convstyle/config.hpp"
#include "convstyle/corpus.hpp"
#include "convstyle/errors.hpp"
#include "convstyle/features.hpp"
#include "convstyle/gradcheck.hpp"
#include "convstyle/gradcheck_suite.hpp"
#include "convstyle/graph.hpp"
#include "convstyle/model.hpp"
#include "convstyle/param_store.hpp"
#include "convstyle/random.hpp"
#include "convstyle/tensor.hpp"
#include "convstyle/training.hpp"
