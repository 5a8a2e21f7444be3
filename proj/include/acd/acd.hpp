#pragma once

#include "acd/checkpoint.hpp"
#include "acd/config.hpp"
#include "acd/dataset.hpp"
#include "acd/episode.hpp"
#include "acd/errors.hpp"
#include "acd/evaluation.hpp"
#include "acd/metrics.hpp"
#include "acd/model.hpp"
#include "acd/tensor.hpp"
#include "acd/threshold.hpp"
#include "acd/training.hpp"
