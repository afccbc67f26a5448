// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "dsc/tensor.hpp"

namespace dsc {

struct AdamHyper {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Moment buffers are indexed like the parameter list passed to adam_update.
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

/// Elementwise bias-corrected Adam on one contiguous range. `step` is the
/// already-incremented step count (>= 1).
void adam_step_range(std::span<float> param, std::span<const float> grad, std::span<float> m,
                     std::span<float> v, std::uint64_t step, const AdamHyper& hyper);

/// Throws NumericError naming `name` if any gradient entry is NaN or infinite.
void check_finite(std::span<const float> grad, std::string_view name);

/// One Adam step over every tensor using its accumulated gradient. Buffers are
/// created on the first call and must keep matching shapes afterwards.
void adam_update(std::span<Tensor> params, AdamState& state);

}  // namespace dsc
