// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dsc/error.hpp"

namespace dsc {

namespace {

using detail::Node;

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::size_t norm_dim(const Tensor& a, int d) {
  const int r = static_cast<int>(a.rank());
  const int k = d < 0 ? r + d : d;
  if (k < 0 || k >= r) throw DimensionError("dimension " + std::to_string(d) + " out of range for " +
                                            shape_str(a.shape()));
  return static_cast<std::size_t>(k);
}

// Parent i's gradient buffer, or nullptr when it does not require grad.
float* parent_grad(Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

const std::vector<float>& parent_data(const Node& self, std::size_t i) {
  return self.parents[i]->data;
}

// y = f(x) elementwise with dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  auto x = a.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), {a}, [df](Node& self) {
    float* ga = parent_grad(self, 0);
    if (!ga) return;
    const auto& x = parent_data(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * df(x[i], self.data[i]);
  });
}

// Permutes axes; perm[i] is the input axis that becomes output axis i.
std::vector<float> permute_data(std::span<const float> in, const Shape& shape,
                                const std::vector<std::size_t>& perm, Shape& out_shape) {
  const std::size_t r = shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * shape[i];
  out_shape.resize(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = shape[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  std::vector<float> out(in.size());
  if (in.empty()) return out;
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = in[src];
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += step[d];
        break;
      }
      src -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = b.rank() == 1 && a.rank() > 1 && b.dim(0) == a.dim(-1);
  if (!bias) require_same_shape(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[bias ? i % n : i];
  return make_result(a.shape(), std::move(out), {a, b}, [bias, n](Node& self) {
    if (float* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    }
    if (float* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[bias ? i % n : i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (float* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    }
    if (float* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = parent_data(self, 0);
    const auto& y = parent_data(self, 1);
    if (float* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * y[i];
    }
    if (float* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < x.size(); ++i) gb[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  return unary(a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary(a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary(
      a, [](float x) { return std::min(x, 0.0f) - std::log1p(std::exp(-std::fabs(x))); },
      [](float x, float) { return 1.0f / (1.0f + std::exp(x)); });
}

Tensor gelu(const Tensor& a) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float k = 0.044715f;
  return unary(
      a,
      [](float x) { return 0.5f * x * (1.0f + std::tanh(c * (x + k * x * x * x))); },
      [](float x, float) {
        const float u = c * (x + k * x * x * x);
        const float t = std::tanh(u);
        const float du = c * (1.0f + 3.0f * k * x * x);
        return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
      });
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(
      a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

namespace {

template <class Pick>
Tensor select_binary(const Tensor& a, const Tensor& b, const char* op, Pick pick_a) {
  require_same_shape(a, b, op);
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = pick_a(x[i], y[i]) ? x[i] : y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [pick_a](Node& self) {
    const auto& x = parent_data(self, 0);
    const auto& y = parent_data(self, 1);
    float* ga = parent_grad(self, 0);
    float* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (pick_a(x[i], y[i])) {
        if (ga) ga[i] += self.grad[i];
      } else if (gb) {
        gb[i] += self.grad[i];
      }
    }
  });
}

}  // namespace

Tensor minimum(const Tensor& a, const Tensor& b) {
  return select_binary(a, b, "minimum", [](float x, float y) { return x <= y; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return select_binary(a, b, "maximum", [](float x, float y) { return x >= y; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError("matmul inner dims disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const bool shared = b.rank() == 2;
  if (!shared) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw DimensionError("matmul batch dims disagree: " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
    }
  }
  const std::size_t batch = m * k == 0 ? 0 : a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<float> out(batch * m * n, 0.0f);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t t = 0; t < batch; ++t) {
    const float* pa = A.data() + t * m * k;
    const float* pb = B.data() + (shared ? 0 : t * k * n);
    float* pc = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      float* row = pc + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const float av = pa[i * k + p];
        const float* brow = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
      }
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [batch, m, k, n, shared](Node& self) {
    const auto& A = parent_data(self, 0);
    const auto& B = parent_data(self, 1);
    float* ga = parent_grad(self, 0);
    float* gb = parent_grad(self, 1);
    for (std::size_t t = 0; t < batch; ++t) {
      const float* pa = A.data() + t * m * k;
      const float* pb = B.data() + (shared ? 0 : t * k * n);
      const float* gc = self.grad.data() + t * m * n;
      if (ga) {
        float* pga = ga + t * m * k;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const float* brow = pb + p * n;
            float acc = 0.0f;
            for (std::size_t j = 0; j < n; ++j) acc += gc[i * n + j] * brow[j];
            pga[i * k + p] += acc;
          }
        }
      }
      if (gb) {
        float* pgb = gb + (shared ? 0 : t * k * n);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const float av = pa[i * k + p];
            float* grow = pgb + p * n;
            for (std::size_t j = 0; j < n; ++j) grow[j] += av * gc[i * n + j];
          }
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a, int d0, int d1) {
  const std::size_t x = norm_dim(a, d0), y = norm_dim(a, d1);
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x], perm[y]);
  Shape out_shape;
  auto out = permute_data(a.data(), a.shape(), perm, out_shape);
  return make_result(out_shape, std::move(out), {a}, [perm, out_shape](Node& self) {
    float* ga = parent_grad(self, 0);
    if (!ga) return;
    Shape back_shape;
    auto g = permute_data(self.grad, out_shape, perm, back_shape);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto src = a.data();
  return make_result(std::move(shape), std::vector<float>(src.begin(), src.end()), {a},
                     [](Node& self) {
    float* ga = parent_grad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor softmax(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("softmax of a scalar");
  const std::size_t v = a.dim(-1);
  const std::size_t rows = v == 0 ? 0 : a.numel() / v;
  auto x = a.data();
  std::vector<float> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data() + r * v;
    float* out = y.data() + r * v;
    float mx = kNegInf;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      out[j] = std::exp(in[j] - mx);
      total += out[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t j = 0; j < v; ++j) out[j] *= inv;
  }
  return make_result(a.shape(), std::move(y), {a}, [rows, v](Node& self) {
    float* ga = parent_grad(self, 0);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * v;
      const float* gy = self.grad.data() + r * v;
      double dot = 0.0;
      for (std::size_t j = 0; j < v; ++j) dot += static_cast<double>(gy[j]) * y[j];
      const float d = static_cast<float>(dot);
      for (std::size_t j = 0; j < v; ++j) ga[r * v + j] += y[j] * (gy[j] - d);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm of a scalar");
  const std::size_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm affine params must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  auto in = x.data();
  auto g = gamma.data();
  auto b = beta.data();
  std::vector<float> y(in.size());
  std::vector<float> xhat(in.size());
  std::vector<float> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>((row[j] - mu) * is);
      xhat[r * d + j] = h;
      y[r * d + j] = h * g[j] + b[j];
    }
  }
  return make_result(x.shape(), std::move(y), {x, gamma, beta},
                     [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const auto& g = parent_data(self, 1);
    float* gx = parent_grad(self, 0);
    float* gg = parent_grad(self, 1);
    float* gb = parent_grad(self, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      const float* gy = self.grad.data() + r * d;
      const float* h = xhat.data() + r * d;
      if (gg || gb) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) gg[j] += gy[j] * h[j];
          if (gb) gb[j] += gy[j];
        }
      }
      if (gx) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = static_cast<double>(gy[j]) * g[j];
          m1 += dh;
          m2 += dh * h[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = static_cast<double>(gy[j]) * g[j];
          gx[r * d + j] += static_cast<float>(inv_std[r] * (dh - m1 - h[j] * m2));
        }
      }
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (numel(ids_shape) != ids.size()) throw DimensionError("embedding ids do not match ids shape");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto t = table.data();
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape shape = ids_shape;
  shape.push_back(d);
  std::vector<int> idcopy(ids.begin(), ids.end());
  return make_result(std::move(shape), std::move(out), {table},
                     [d, idcopy = std::move(idcopy)](Node& self) {
    float* gt = parent_grad(self, 0);
    if (!gt) return;
    for (std::size_t i = 0; i < idcopy.size(); ++i) {
      float* row = gt + static_cast<std::size_t>(idcopy[i]) * d;
      const float* g = self.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
    }
  });
}

Tensor causal_scores(const Tensor& q, const Tensor& k, float scale, std::size_t offset) {
  if (q.rank() < 2 || q.rank() != k.rank() || q.dim(-1) != k.dim(-1) ||
      !std::equal(q.shape().begin(), q.shape().end() - 2, k.shape().begin())) {
    throw DimensionError("causal_scores shape mismatch " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
  }
  const std::size_t tq = q.dim(-2), tk = k.dim(-2), dh = q.dim(-1);
  const std::size_t batch = tq * dh == 0 ? 0 : q.numel() / (tq * dh);
  Shape out_shape = q.shape();
  out_shape.back() = tk;
  std::vector<float> out(batch * tq * tk);
  auto Q = q.data();
  auto K = k.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < tq; ++i) {
      const float* qi = Q.data() + (b * tq + i) * dh;
      float* row = out.data() + (b * tq + i) * tk;
      for (std::size_t j = 0; j < tk; ++j) {
        if (j > i + offset) {
          row[j] = kNegInf;
          continue;
        }
        const float* kj = K.data() + (b * tk + j) * dh;
        float acc = 0.0f;
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        row[j] = acc * scale;
      }
    }
  }
  return make_result(std::move(out_shape), std::move(out), {q, k},
                     [batch, tq, tk, dh, scale, offset](Node& self) {
    const auto& Q = parent_data(self, 0);
    const auto& K = parent_data(self, 1);
    float* gq = parent_grad(self, 0);
    float* gk = parent_grad(self, 1);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < tq; ++i) {
        const float* gs = self.grad.data() + (b * tq + i) * tk;
        for (std::size_t j = 0; j < tk && j <= i + offset; ++j) {
          const float s = gs[j] * scale;
          if (s == 0.0f) continue;
          const std::size_t qo = (b * tq + i) * dh, ko = (b * tk + j) * dh;
          if (gq) {
            for (std::size_t c = 0; c < dh; ++c) gq[qo + c] += s * K[ko + c];
          }
          if (gk) {
            for (std::size_t c = 0; c < dh; ++c) gk[ko + c] += s * Q[qo + c];
          }
        }
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const float> weights, double normalizer) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects logits [N, V]");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n || (!weights.empty() && weights.size() != n)) {
    throw DimensionError("cross_entropy: targets/weights length must equal N=" + std::to_string(n));
  }
  std::vector<float> w(n, 1.0f);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  double norm = normalizer;
  if (norm <= 0.0) norm = std::accumulate(w.begin(), w.end(), 0.0);
  if (norm <= 0.0) throw ContractError("cross_entropy over zero total weight");
  auto x = logits.data();
  std::vector<float> probs(x.size(), 0.0f);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (w[r] == 0.0f) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw ContractError("cross_entropy target " + std::to_string(targets[r]) + " out of range");
    }
    const float* row = x.data() + r * v;
    float mx = kNegInf;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(total);
    loss += w[r] * (lse - row[targets[r]]);
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
    }
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result({}, {static_cast<float>(loss / norm)}, {logits},
                     [n, v, norm, w = std::move(w), tg = std::move(tg),
                      probs = std::move(probs)](Node& self) {
    float* gl = parent_grad(self, 0);
    if (!gl) return;
    const double g = self.grad[0];
    for (std::size_t r = 0; r < n; ++r) {
      if (w[r] == 0.0f) continue;
      const float c = static_cast<float>(g * w[r] / norm);
      for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += c * probs[r * v + j];
      gl[r * v + static_cast<std::size_t>(tg[r])] -= c;
    }
  });
}

Tensor gather_log_softmax(const Tensor& logits, std::span<const int> ids) {
  if (logits.rank() == 0) throw DimensionError("gather_log_softmax of a scalar");
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = v == 0 ? 0 : logits.numel() / v;
  if (ids.size() != rows) throw DimensionError("gather_log_softmax: one id per row required");
  auto x = logits.data();
  std::vector<float> out(rows);
  std::vector<float> probs(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw ContractError("gather_log_softmax id " + std::to_string(ids[r]) + " out of range");
    }
    const float* row = x.data() + r * v;
    float mx = kNegInf;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(total);
    out[r] = static_cast<float>(row[ids[r]] - lse);
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
    }
  }
  Shape shape(logits.shape().begin(), logits.shape().end() - 1);
  std::vector<int> idcopy(ids.begin(), ids.end());
  return make_result(std::move(shape), std::move(out), {logits},
                     [rows, v, idcopy = std::move(idcopy), probs = std::move(probs)](Node& self) {
    float* gl = parent_grad(self, 0);
    if (!gl) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const float g = self.grad[r];
      if (g == 0.0f) continue;
      for (std::size_t j = 0; j < v; ++j) gl[r * v + j] -= g * probs[r * v + j];
      gl[r * v + static_cast<std::size_t>(idcopy[r])] += g;
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (float v : a.data()) total += v;
  return make_result({}, {static_cast<float>(total)}, {a}, [](Node& self) {
    float* ga = parent_grad(self, 0);
    if (!ga) return;
    const float g = self.grad[0];
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  const float inv = 1.0f / static_cast<float>(a.numel());
  double total = 0.0;
  for (float v : a.data()) total += v;
  return make_result({}, {static_cast<float>(total / static_cast<double>(a.numel()))}, {a},
                     [inv](Node& self) {
    float* ga = parent_grad(self, 0);
    if (!ga) return;
    const float g = self.grad[0] * inv;
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Tensor slice(const Tensor& a, int dim, std::size_t begin, std::size_t end) {
  const std::size_t d = norm_dim(a, dim);
  const auto& s = a.shape();
  if (begin > end || end > s[d]) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < d; ++i) outer *= s[i];
  for (std::size_t i = d + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = end - begin, full = s[d];
  Shape out_shape = s;
  out_shape[d] = len;
  auto x = a.data();
  std::vector<float> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data() + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
  }
  return make_result(std::move(out_shape), std::move(out), {a},
                     [outer, inner, len, full, begin](Node& self) {
    float* ga = parent_grad(self, 0);
    if (!ga) return;
    for (std::size_t o = 0; o < outer; ++o) {
      const float* g = self.grad.data() + o * len * inner;
      float* dst = ga + (o * full + begin) * inner;
      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const std::size_t d = norm_dim(parts[0], dim);
  const auto& s0 = parts[0].shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < d; ++i) outer *= s0[i];
  for (std::size_t i = d + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != d && s[i] != s0[i]) {
        throw DimensionError("concat shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
      }
    }
    lens.push_back(s[d]);
    total += s[d];
  }
  Shape out_shape = s0;
  out_shape[d] = total;
  std::vector<float> out(outer * total * inner);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto x = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data() + o * lens[p] * inner, lens[p] * inner,
                  out.data() + (o * total + off) * inner);
    }
    off += lens[p];
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [outer, inner, total, lens](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      if (float* gp = parent_grad(self, p)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const float* g = self.grad.data() + (o * total + off) * inner;
          float* dst = gp + o * lens[p] * inner;
          for (std::size_t i = 0; i < lens[p] * inner; ++i) dst[i] += g[i];
        }
      }
      off += lens[p];
    }
  });
}

}  // namespace dsc
