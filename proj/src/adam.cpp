// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/adam.hpp"

#include <cmath>
#include <string>

#include "dsc/error.hpp"

namespace dsc {

void adam_step_range(std::span<float> param, std::span<const float> grad, std::span<float> m,
                     std::span<float> v, std::uint64_t step, const AdamHyper& hyper) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam: buffer sizes do not match parameter");
  }
  if (step == 0) throw ContractError("adam: step must be incremented before the update");
  const auto t = static_cast<double>(step);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta2), t));
  const float b1 = hyper.beta1, b2 = hyper.beta2;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    m[i] = b1 * m[i] + (1.0f - b1) * g;
    v[i] = b2 * v[i] + (1.0f - b2) * g * g;
    const float mhat = m[i] / bc1;
    const float vhat = v[i] / bc2;
    param[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
  }
}

void check_finite(std::span<const float> grad, std::string_view name) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("non-finite gradient in " + std::string(name) + " at element " +
                         std::to_string(i));
    }
  }
}

void adam_update(std::span<Tensor> params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0f);
      state.v.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) {
      throw DimensionError("adam: moment buffer does not match " + params[i].name());
    }
  }
  std::vector<std::vector<float>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    grads.push_back(p.grad());
    check_finite(grads.back(), p.name().empty() ? "<unnamed>" : p.name());
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_step_range(params[i].data(), grads[i], state.m[i], state.v[i], state.step, state.hyper);
  }
}

}  // namespace dsc
