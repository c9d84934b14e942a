#pragma once

#include "plab/rng.hpp"
#include "plab/tensor.hpp"
#include "plab/gemm.hpp"
#include "plab/ops.hpp"
#include "plab/model.hpp"
#include "plab/checkpoint.hpp"
#include "plab/data.hpp"
#include "plab/deficit.hpp"
#include "plab/synthdata.hpp"
#include "plab/optim.hpp"
#include "plab/train.hpp"
#include "plab/fisher.hpp"
#include "plab/fit.hpp"
#include "plab/filters.hpp"
#include "plab/config.hpp"
#include "plab/experiments.hpp"
