// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

namespace dsc {

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, evaluated in double.
std::vector<double> finite_difference_gradient(const ScalarFn& f, std::vector<double> x,
                                               double h);

/// max_i |a_i - b_i| / max(max_i |b_i|, floor): normwise relative error of a
/// against reference b.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

}  // namespace dsc
