// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dsc/error.hpp"

namespace dsc {

namespace {

using Vec = std::vector<float>;

Vec to_vec(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

// Columns [begin, begin+width) of a row-major [rows, cols] matrix.
Vec column_slice(std::span<const float> m, std::size_t rows, std::size_t cols, std::size_t begin,
                 std::size_t width) {
  Vec out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(m.data() + r * cols + begin, width, out.data() + r * width);
  }
  return out;
}

// Rows [begin, begin+count) of a row-major [rows, cols] matrix.
Vec row_slice(std::span<const float> m, std::size_t cols, std::size_t begin, std::size_t count) {
  return Vec(m.begin() + static_cast<std::ptrdiff_t>(begin * cols),
             m.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
}

std::size_t vec_bytes(const Vec& v) { return v.size() * sizeof(float); }

// Same arithmetic as the graph layer_norm.
void layer_norm_rows(const Vec& x, std::size_t n, std::size_t d, const Vec& g, const Vec& b,
                     Vec& y) {
  y.resize(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    const float* row = x.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + 1e-5f);
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>((row[j] - mu) * is);
      y[r * d + j] = h * g[j] + b[j];
    }
  }
}

// out[n, cols] = in[n, k] * w[k, cols] (+ bias when given).
void matmul_rows(const Vec& in, std::size_t n, std::size_t k, const Vec& w, std::size_t cols,
                 const Vec* bias, Vec& out) {
  out.assign(n * cols, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    float* row = out.data() + i * cols;
    for (std::size_t p = 0; p < k; ++p) {
      const float a = in[i * k + p];
      const float* wr = w.data() + p * cols;
      for (std::size_t j = 0; j < cols; ++j) row[j] += a * wr[j];
    }
    if (bias) {
      for (std::size_t j = 0; j < cols; ++j) row[j] += (*bias)[j];
    }
  }
}

float gelu_scalar(float x) {
  constexpr float c = 0.7978845608028654f;
  constexpr float k = 0.044715f;
  return 0.5f * x * (1.0f + std::tanh(c * (x + k * x * x * x)));
}

}  // namespace

std::size_t TpShard::bytes() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    n += vec_bytes(l.wq) + vec_bytes(l.bq) + vec_bytes(l.wk) + vec_bytes(l.bk) + vec_bytes(l.wv) +
         vec_bytes(l.bv) + vec_bytes(l.wo) + vec_bytes(l.wfc) + vec_bytes(l.bfc) +
         vec_bytes(l.wproj);
  }
  return n;
}

std::size_t InferenceLayout::replicated_bytes() const {
  std::size_t n = vec_bytes(wte) + vec_bytes(wpe) + vec_bytes(lnf_g) + vec_bytes(lnf_b) +
                  vec_bytes(head_w) + vec_bytes(head_b);
  for (const auto& l : layers) {
    n += vec_bytes(l.ln1_g) + vec_bytes(l.ln1_b) + vec_bytes(l.ln2_g) + vec_bytes(l.ln2_b) +
         vec_bytes(l.bo) + vec_bytes(l.bproj);
  }
  return n;
}

std::size_t InferenceLayout::worker_bytes(int w) const {
  return workers.at(static_cast<std::size_t>(w)).bytes() + replicated_bytes();
}

InferenceLayout build_inference_layout(const TransformerModel& model, int tp) {
  const auto& c = model.config();
  if (tp < 1 || c.n_heads % tp != 0 || c.d_ff % tp != 0) {
    throw ConfigError("tensor-parallel degree " + std::to_string(tp) +
                      " must divide n_heads=" + std::to_string(c.n_heads) +
                      " and d_ff=" + std::to_string(c.d_ff));
  }
  InferenceLayout out;
  out.config = c;
  out.tp = tp;
  out.wte = to_vec(model.wte());
  out.wpe = to_vec(model.wpe());
  out.lnf_g = to_vec(model.lnf_g());
  out.lnf_b = to_vec(model.lnf_b());
  out.head_w = to_vec(model.head_w());
  if (c.head == HeadKind::Scalar) out.head_b = to_vec(model.head_b());

  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const int heads_per = c.n_heads / tp;
  const auto ff_per = static_cast<std::size_t>(c.d_ff / tp);
  for (int i = 0; i < c.n_layers; ++i) {
    const auto& L = model.layer(i);
    out.layers.push_back({to_vec(L.ln1_g), to_vec(L.ln1_b), to_vec(L.ln2_g), to_vec(L.ln2_b),
                          to_vec(L.bo), to_vec(L.bproj)});
  }
  for (int w = 0; w < tp; ++w) {
    TpShard shard;
    shard.head_begin = w * heads_per;
    shard.n_heads = heads_per;
    shard.ff_begin = static_cast<int>(static_cast<std::size_t>(w) * ff_per);
    shard.ff_width = static_cast<int>(ff_per);
    const std::size_t col0 = static_cast<std::size_t>(shard.head_begin) * dh;
    const std::size_t width = static_cast<std::size_t>(heads_per) * dh;
    const std::size_t f0 = static_cast<std::size_t>(shard.ff_begin);
    for (int i = 0; i < c.n_layers; ++i) {
      const auto& L = model.layer(i);
      TpShard::Layer sl;
      sl.wq = column_slice(L.wq.data(), d, d, col0, width);
      sl.bq = column_slice(L.bq.data(), 1, d, col0, width);
      sl.wk = column_slice(L.wk.data(), d, d, col0, width);
      sl.bk = column_slice(L.bk.data(), 1, d, col0, width);
      sl.wv = column_slice(L.wv.data(), d, d, col0, width);
      sl.bv = column_slice(L.bv.data(), 1, d, col0, width);
      sl.wo = row_slice(L.wo.data(), d, col0, width);
      sl.wfc = column_slice(L.wfc.data(), d, ff, f0, ff_per);
      sl.bfc = column_slice(L.bfc.data(), 1, ff, f0, ff_per);
      sl.wproj = row_slice(L.wproj.data(), d, f0, ff_per);
      shard.layers.push_back(std::move(sl));
    }
    out.workers.push_back(std::move(shard));
  }
  return out;
}

KVCache::KVCache(const ModelConfig& config, std::size_t batch, std::size_t capacity)
    : layers_(static_cast<std::size_t>(config.n_layers)),
      batch_(batch),
      heads_(static_cast<std::size_t>(config.n_heads)),
      capacity_(capacity),
      d_head_(static_cast<std::size_t>(config.d_head())) {
  if (capacity > static_cast<std::size_t>(config.max_seq_len)) {
    throw CapacityError("KV-cache capacity " + std::to_string(capacity) + " exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
  }
  const std::size_t per_layer = batch_ * heads_ * capacity_ * d_head_;
  keys_.assign(layers_, Vec(per_layer, 0.0f));
  values_.assign(layers_, Vec(per_layer, 0.0f));
  fill_.assign(batch_, 0);
}

void KVCache::reset() { std::fill(fill_.begin(), fill_.end(), 0); }

std::size_t KVCache::bytes() const {
  return 2 * layers_ * batch_ * heads_ * capacity_ * d_head_ * sizeof(float);
}

std::size_t KVCache::offset(std::size_t seq, std::size_t head, std::size_t pos) const {
  return ((seq * heads_ + head) * capacity_ + pos) * d_head_;
}

float* KVCache::key(std::size_t layer, std::size_t seq, std::size_t head, std::size_t pos) {
  return keys_.at(layer).data() + offset(seq, head, pos);
}

float* KVCache::value(std::size_t layer, std::size_t seq, std::size_t head, std::size_t pos) {
  return values_.at(layer).data() + offset(seq, head, pos);
}

std::vector<float> extend(const InferenceLayout& layout, KVCache& cache, std::size_t seq,
                          std::span<const int> tokens) {
  const auto& c = layout.config;
  if (seq >= cache.batch_) throw ContractError("sequence index outside the KV-cache batch");
  const std::size_t n = tokens.size();
  const std::size_t start = cache.fill_[seq];
  if (start + n > cache.capacity_) {
    throw CapacityError("KV-cache overflow: fill " + std::to_string(start) + " + " +
                        std::to_string(n) + " > capacity " + std::to_string(cache.capacity_));
  }
  if (n == 0) return {};
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Vec x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab) {
      throw ContractError("token id " + std::to_string(tokens[i]) + " outside vocabulary");
    }
    const float* te = layout.wte.data() + static_cast<std::size_t>(tokens[i]) * d;
    const float* pe = layout.wpe.data() + (start + i) * d;
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = te[j] + pe[j];
  }

  Vec a, q, k, v, o, partial, acc, hidden, scores;
  for (std::size_t l = 0; l < static_cast<std::size_t>(c.n_layers); ++l) {
    const auto& R = layout.layers[l];
    layer_norm_rows(x, n, d, R.ln1_g, R.ln1_b, a);
    acc.assign(n * d, 0.0f);
    for (const auto& shard : layout.workers) {
      const auto& S = shard.layers[l];
      const std::size_t hw = static_cast<std::size_t>(shard.n_heads) * dh;
      matmul_rows(a, n, d, S.wq, hw, &S.bq, q);
      matmul_rows(a, n, d, S.wk, hw, &S.bk, k);
      matmul_rows(a, n, d, S.wv, hw, &S.bv, v);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < static_cast<std::size_t>(shard.n_heads); ++h) {
          const std::size_t head = static_cast<std::size_t>(shard.head_begin) + h;
          std::copy_n(k.data() + i * hw + h * dh, dh, cache.key(l, seq, head, start + i));
          std::copy_n(v.data() + i * hw + h * dh, dh, cache.value(l, seq, head, start + i));
        }
      }
      o.assign(n * hw, 0.0f);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t visible = start + i + 1;
        scores.resize(visible);
        for (std::size_t h = 0; h < static_cast<std::size_t>(shard.n_heads); ++h) {
          const std::size_t head = static_cast<std::size_t>(shard.head_begin) + h;
          const float* qi = q.data() + i * hw + h * dh;
          float mx = -std::numeric_limits<float>::infinity();
          for (std::size_t j = 0; j < visible; ++j) {
            const float* kj = cache.key(l, seq, head, j);
            float s = 0.0f;
            for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
            scores[j] = s * att_scale;
            mx = std::max(mx, scores[j]);
          }
          double total = 0.0;
          for (std::size_t j = 0; j < visible; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            total += scores[j];
          }
          const auto inv = static_cast<float>(1.0 / total);
          float* oi = o.data() + i * hw + h * dh;
          for (std::size_t j = 0; j < visible; ++j) {
            const float p = scores[j] * inv;
            const float* vj = cache.value(l, seq, head, j);
            for (std::size_t e = 0; e < dh; ++e) oi[e] += p * vj[e];
          }
        }
      }
      matmul_rows(o, n, hw, S.wo, d, nullptr, partial);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += partial[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i * d + j] += acc[i * d + j] + R.bo[j];
    }

    layer_norm_rows(x, n, d, R.ln2_g, R.ln2_b, a);
    acc.assign(n * d, 0.0f);
    for (const auto& shard : layout.workers) {
      const auto& S = shard.layers[l];
      const auto fw = static_cast<std::size_t>(shard.ff_width);
      matmul_rows(a, n, d, S.wfc, fw, &S.bfc, hidden);
      for (auto& h : hidden) h = gelu_scalar(h);
      matmul_rows(hidden, n, fw, S.wproj, d, nullptr, partial);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += partial[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i * d + j] += acc[i * d + j] + R.bproj[j];
    }
  }
  cache.fill_[seq] = start + n;

  layer_norm_rows(x, n, d, layout.lnf_g, layout.lnf_b, a);
  Vec out;
  if (c.head == HeadKind::LM) {
    matmul_rows(a, n, d, layout.head_w, vocab, nullptr, out);
  } else {
    matmul_rows(a, n, d, layout.head_w, 1, &layout.head_b, out);
  }
  return out;
}

std::vector<float> prefill(const InferenceLayout& layout, KVCache& cache, std::size_t seq,
                           std::span<const int> prompt) {
  if (prompt.empty() || prompt[0] != kBos) {
    throw ContractError("prompt must be nonempty and start with BOS");
  }
  if (cache.fill(seq) != 0) throw ContractError("prefill into a non-empty cache slot");
  auto all = extend(layout, cache, seq, prompt);
  const std::size_t width = all.size() / prompt.size();
  return {all.end() - static_cast<std::ptrdiff_t>(width), all.end()};
}

std::vector<float> forward_incremental(const InferenceLayout& layout, KVCache& cache,
                                       std::span<const int> next_tokens) {
  if (next_tokens.size() != cache.batch()) {
    throw DimensionError("forward_incremental needs one token per cached sequence");
  }
  for (std::size_t b = 0; b < cache.batch(); ++b) {
    if (cache.fill(b) >= cache.capacity()) {
      throw CapacityError("KV-cache full for sequence " + std::to_string(b));
    }
  }
  std::vector<float> out;
  for (std::size_t b = 0; b < cache.batch(); ++b) {
    auto row = extend(layout, cache, b, next_tokens.subspan(b, 1));
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

std::vector<float> forward_incremental(const TransformerModel& model, KVCache& cache,
                                       std::span<const int> next_tokens) {
  return forward_incremental(build_inference_layout(model, 1), cache, next_tokens);
}

std::vector<float> layout_forward(const InferenceLayout& layout, std::span<const int> tokens,
                                  std::size_t batch, std::size_t len) {
  if (tokens.size() != batch * len) throw DimensionError("tokens must hold batch*len ids");
  if (len > static_cast<std::size_t>(layout.config.max_seq_len)) {
    throw LengthError("sequence length exceeds max_seq_len");
  }
  KVCache cache(layout.config, batch, len);
  std::vector<float> out;
  for (std::size_t b = 0; b < batch; ++b) {
    auto rows = extend(layout, cache, b, tokens.subspan(b * len, len));
    out.insert(out.end(), rows.begin(), rows.end());
  }
  return out;
}

double token_logprob(std::span<const float> logits, int token) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (float l : logits) total += std::exp(static_cast<double>(l) - mx);
  return static_cast<double>(logits[static_cast<std::size_t>(token)]) - mx - std::log(total);
}

int pick_token(std::span<const float> logits, const GenerationStrategy& strategy,
               std::mt19937_64& rng) {
  if (logits.empty()) throw ContractError("pick_token on empty logits");
  const bool greedy = strategy.kind == GenerationStrategy::Kind::Greedy ||
                      strategy.temperature <= 0.0f || strategy.top_k <= 1;
  if (greedy) {
    // max_element returns the first maximum, i.e. the lowest id on ties.
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(strategy.top_k), logits.size());
  std::vector<int> ids(logits.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](int a, int b) {
                      const float la = logits[static_cast<std::size_t>(a)];
                      const float lb = logits[static_cast<std::size_t>(b)];
                      return la > lb || (la == lb && a < b);
                    });
  const double top = logits[static_cast<std::size_t>(ids[0])];
  std::vector<double> weights(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    weights[i] = std::exp((logits[static_cast<std::size_t>(ids[i])] - top) / strategy.temperature);
    total += weights[i];
  }
  // 53 random bits mapped to [0, 1); avoids implementation-defined distributions.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
  double run = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    run += weights[i];
    if (u < run) return ids[i];
  }
  return ids[k - 1];
}

std::vector<Generation> generate_batch(const InferenceLayout& layout,
                                       const std::vector<std::vector<int>>& prompts, int max_new,
                                       const GenerationStrategy& strategy) {
  if (max_new < 1) throw ContractError("max_new must be >= 1");
  if (layout.config.head != HeadKind::LM) throw HeadKindError("generation needs an LM head");
  std::size_t capacity = 0;
  for (const auto& p : prompts) {
    if (p.empty() || p[0] != kBos) throw ContractError("prompt must be nonempty and start with BOS");
    const std::size_t need = p.size() + static_cast<std::size_t>(max_new);
    if (need > static_cast<std::size_t>(layout.config.max_seq_len)) {
      throw CapacityError("prompt length " + std::to_string(p.size()) + " + max_new " +
                          std::to_string(max_new) + " exceeds cache capacity " +
                          std::to_string(layout.config.max_seq_len));
    }
    capacity = std::max(capacity, need);
  }
  KVCache cache(layout.config, prompts.size(), capacity);
  std::vector<Generation> out(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    std::mt19937_64 rng(strategy.seed * 0x9E3779B97F4A7C15ULL + i + 1);
    auto logits = prefill(layout, cache, i, prompts[i]);
    auto& g = out[i];
    while (true) {
      const int tok = pick_token(logits, strategy, rng);
      g.tokens.push_back(tok);
      g.logprobs.push_back(static_cast<float>(token_logprob(logits, tok)));
      if (tok == kEos) {
        g.hit_eos = true;
        break;
      }
      if (static_cast<int>(g.tokens.size()) >= max_new) break;
      logits = extend(layout, cache, i, std::span<const int>(&g.tokens.back(), 1));
    }
  }
  return out;
}

Generation generate(const InferenceLayout& layout, std::span<const int> prompt, int max_new,
                    const GenerationStrategy& strategy) {
  return generate_batch(layout, {std::vector<int>(prompt.begin(), prompt.end())}, max_new,
                        strategy)
      .front();
}

Generation generate(const TransformerModel& model, std::span<const int> prompt, int max_new,
                    const GenerationStrategy& strategy) {
  return generate(build_inference_layout(model, 1), prompt, max_new, strategy);
}

}  // namespace dsc
