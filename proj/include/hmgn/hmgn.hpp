#pragma once

#include "hmgn/tensor.hpp"
#include "hmgn/grad_check.hpp"
#include "hmgn/graph_store.hpp"
#include "hmgn/model.hpp"
#include "hmgn/layers.hpp"
#include "hmgn/kg.hpp"
#include "hmgn/sampler.hpp"
#include "hmgn/eval.hpp"
#include "hmgn/training.hpp"
#include "hmgn/checkpoint.hpp"
#include "hmgn/synth.hpp"
#include "hmgn/config.hpp"

namespace hmgn {

inline constexpr const char* version = "0.1.0";

}  // namespace hmgn
