// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "dsc/tensor.hpp"

// Differentiable operations. Shapes must agree exactly; the only broadcast is
// adding a 1-D bias over the last dimension.
namespace dsc {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// log(sigmoid(x)) evaluated without overflow.
Tensor log_sigmoid(const Tensor& a);
/// tanh approximation.
Tensor gelu(const Tensor& a);
Tensor clamp(const Tensor& a, float lo, float hi);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

/// a[..., m, k] x b[..., k, n] with identical leading dims, or b[k, n] shared
/// across all leading dims of a.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a, int d0 = -2, int d1 = -1);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

/// Rows of table[V, d] for every id; result shape is ids_shape + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape);

/// Scaled scores q.k^T over the last dim with key j visible to query i only
/// when j <= i + offset; hidden entries are -inf.
Tensor causal_scores(const Tensor& q, const Tensor& k, float scale, std::size_t offset = 0);

/// sum_i w_i * CE(logits_i, target_i) / normalizer over rows of logits[N, V].
/// A non-positive normalizer means sum(w).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const float> weights = {}, double normalizer = 0.0);

/// log_softmax(logits)[..., id] for logits[..., V]; result drops the last dim.
Tensor gather_log_softmax(const Tensor& logits, std::span<const int> ids);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor slice(const Tensor& a, int dim, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int dim);

}  // namespace dsc
