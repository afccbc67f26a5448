// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dsc/error.hpp"

namespace dsc {

std::vector<double> finite_difference_gradient(const ScalarFn& f, std::vector<double> x,
                                               double h) {
  if (!(h > 0.0)) throw ContractError("finite difference step must be positive");
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - b[i]));
    scale = std::max(scale, std::fabs(b[i]));
  }
  return diff / scale;
}

}  // namespace dsc
