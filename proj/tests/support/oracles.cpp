// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "dsc/gradcheck.hpp"
#include "dsc/inference.hpp"
#include "dsc/ops.hpp"
#include "reference.hpp"

namespace dsc::oracle {

namespace {

using EngineFn = std::function<Tensor(const std::vector<Tensor>&)>;
using RefFn = std::function<ref::RT(const std::vector<ref::RT>&)>;

struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  EngineFn engine;
  RefFn reference;
  double lo = -1.0, hi = 1.0;  // sampling range of the inputs
};

CheckResult run_case(const OpCase& c, int points, std::mt19937_64& rng, double tol) {
  CheckResult res{c.name, 0.0, points, true};
  std::uniform_real_distribution<float> u(static_cast<float>(c.lo), static_cast<float>(c.hi));
  std::uniform_real_distribution<float> ur(-1.0f, 1.0f);
  for (int p = 0; p < points; ++p) {
    std::vector<double> x;
    std::vector<Tensor> ins;
    for (const auto& s : c.inputs) {
      std::vector<float> vals(numel(s));
      for (auto& v : vals) {
        v = u(rng);
        x.push_back(v);
      }
      ins.push_back(Tensor::from(s, vals, true));
    }
    Tensor out = c.engine(ins);
    std::vector<float> r(out.numel());
    for (auto& v : r) v = ur(rng);
    backward(sum(mul(out, Tensor::from(out.shape(), r))));
    std::vector<double> got;
    for (auto& t : ins) {
      for (float g : t.grad()) got.push_back(g);
    }

    auto f = [&](std::span<const double> xs) {
      std::vector<ref::RT> rins;
      std::size_t at = 0;
      for (const auto& s : c.inputs) {
        const std::size_t n = numel(s);
        rins.push_back({s, std::vector<double>(xs.begin() + at, xs.begin() + at + n)});
        at += n;
      }
      const ref::RT y = c.reference(rins);
      double acc = 0.0;
      for (std::size_t i = 0; i < y.v.size(); ++i) acc += r[i] * y.v[i];
      return acc;
    };
    const auto want = finite_difference_gradient(f, x, 1e-6);
    const double err = relative_error(got, want);
    res.worst = std::max(res.worst, err);
    if (!(err < tol)) res.pass = false;
  }
  return res;
}

ref::RT as_rt(double v) { return {{}, {v}}; }

}  // namespace

std::vector<CheckResult> op_gradient_checks(int points, std::uint64_t seed, double tol) {
  using V = std::vector<Tensor>;
  using R = std::vector<ref::RT>;
  const std::vector<int> emb_ids{3, 0, 3, 1, 4, 2};
  const std::vector<int> ce_targets{2, 0, 4, 4};
  const std::vector<float> ce_weights{1.0f, 0.0f, 0.5f, 2.0f};
  const std::vector<int> gather_ids{1, 3, 0, 2, 2, 4};
  std::vector<OpCase> cases = {
      {"add", {{3, 4}, {3, 4}}, [](const V& a) { return add(a[0], a[1]); },
       [](const R& a) { return ref::add(a[0], a[1]); }},
      {"add_bias", {{2, 3, 4}, {4}}, [](const V& a) { return add(a[0], a[1]); },
       [](const R& a) { return ref::add(a[0], a[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](const V& a) { return sub(a[0], a[1]); },
       [](const R& a) { return ref::sub(a[0], a[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](const V& a) { return mul(a[0], a[1]); },
       [](const R& a) { return ref::mul(a[0], a[1]); }},
      {"scale", {{5}}, [](const V& a) { return scale(a[0], -1.7f); },
       [](const R& a) { return ref::scale(a[0], -1.7f); }},
      {"add_scalar", {{5}}, [](const V& a) { return add_scalar(a[0], 0.3f); },
       [](const R& a) { return ref::add_scalar(a[0], 0.3f); }},
      {"exp", {{2, 5}}, [](const V& a) { return exp(a[0]); },
       [](const R& a) { return ref::exp(a[0]); }},
      {"log", {{2, 5}}, [](const V& a) { return log(a[0]); },
       [](const R& a) { return ref::log(a[0]); }, 0.5, 2.0},
      {"sigmoid", {{2, 5}}, [](const V& a) { return sigmoid(a[0]); },
       [](const R& a) { return ref::sigmoid(a[0]); }, -4.0, 4.0},
      {"log_sigmoid", {{2, 5}}, [](const V& a) { return log_sigmoid(a[0]); },
       [](const R& a) { return ref::log_sigmoid(a[0]); }, -6.0, 6.0},
      {"gelu", {{2, 5}}, [](const V& a) { return gelu(a[0]); },
       [](const R& a) { return ref::gelu(a[0]); }, -3.0, 3.0},
      {"clamp", {{4, 5}}, [](const V& a) { return clamp(a[0], -0.5f, 0.5f); },
       [](const R& a) { return ref::clamp(a[0], -0.5f, 0.5f); }},
      {"minimum", {{4, 5}, {4, 5}}, [](const V& a) { return minimum(a[0], a[1]); },
       [](const R& a) { return ref::minimum(a[0], a[1]); }},
      {"maximum", {{4, 5}, {4, 5}}, [](const V& a) { return maximum(a[0], a[1]); },
       [](const R& a) { return ref::maximum(a[0], a[1]); }},
      {"matmul", {{3, 4}, {4, 5}}, [](const V& a) { return matmul(a[0], a[1]); },
       [](const R& a) { return ref::matmul(a[0], a[1]); }},
      {"matmul_batched", {{2, 3, 4}, {2, 4, 5}}, [](const V& a) { return matmul(a[0], a[1]); },
       [](const R& a) { return ref::matmul(a[0], a[1]); }},
      {"matmul_shared", {{2, 3, 4}, {4, 5}}, [](const V& a) { return matmul(a[0], a[1]); },
       [](const R& a) { return ref::matmul(a[0], a[1]); }},
      {"transpose", {{2, 3, 4}}, [](const V& a) { return transpose(a[0], 0, 2); },
       [](const R& a) { return ref::transpose(a[0], 0, 2); }},
      {"reshape", {{2, 6}}, [](const V& a) { return reshape(a[0], {3, 4}); },
       [](const R& a) { return ref::reshape(a[0], {3, 4}); }},
      {"softmax", {{3, 6}}, [](const V& a) { return softmax(a[0]); },
       [](const R& a) { return ref::softmax(a[0]); }, -3.0, 3.0},
      {"layer_norm", {{3, 8}, {8}, {8}}, [](const V& a) { return layer_norm(a[0], a[1], a[2]); },
       [](const R& a) { return ref::layer_norm(a[0], a[1], a[2]); }, -2.0, 2.0},
      {"embedding", {{5, 3}},
       [&](const V& a) { return embedding(a[0], emb_ids, {2, 3}); },
       [&](const R& a) { return ref::embedding(a[0], emb_ids, {2, 3}); }},
      // -inf entries cannot be weighted directly, so the mask is exercised
      // through the softmax that always follows it.
      {"causal_scores", {{2, 4, 3}, {2, 4, 3}},
       [](const V& a) { return softmax(causal_scores(a[0], a[1], 0.7f)); },
       [](const R& a) { return ref::softmax(ref::causal_scores(a[0], a[1], 0.7f)); }},
      {"causal_scores_offset", {{2, 3}, {5, 3}},
       [](const V& a) { return softmax(causal_scores(a[0], a[1], 0.5f, 2)); },
       [](const R& a) { return ref::softmax(ref::causal_scores(a[0], a[1], 0.5f, 2)); }},
      {"cross_entropy", {{4, 5}},
       [&](const V& a) { return cross_entropy(a[0], ce_targets); },
       [&](const R& a) { return as_rt(ref::cross_entropy(a[0], ce_targets)); }, -2.0, 2.0},
      {"cross_entropy_weighted", {{4, 5}},
       [&](const V& a) { return cross_entropy(a[0], ce_targets, ce_weights, 3.0); },
       [&](const R& a) { return as_rt(ref::cross_entropy(a[0], ce_targets, ce_weights, 3.0)); },
       -2.0, 2.0},
      {"gather_log_softmax", {{2, 3, 5}},
       [&](const V& a) { return gather_log_softmax(a[0], gather_ids); },
       [&](const R& a) { return ref::gather_log_softmax(a[0], gather_ids); }, -2.0, 2.0},
      {"sum", {{3, 4}}, [](const V& a) { return sum(a[0]); },
       [](const R& a) { return as_rt(ref::sum(a[0])); }},
      {"mean", {{3, 4}}, [](const V& a) { return mean(a[0]); },
       [](const R& a) { return as_rt(ref::mean(a[0])); }},
      {"slice", {{3, 5, 2}}, [](const V& a) { return slice(a[0], 1, 1, 4); },
       [](const R& a) { return ref::slice(a[0], 1, 1, 4); }},
      {"concat", {{2, 3}, {2, 1}, {2, 2}}, [](const V& a) { return concat(a, 1); },
       [](const R& a) { return ref::concat(a, 1); }},
  };
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  for (const auto& c : cases) out.push_back(run_case(c, points, rng, tol));
  return out;
}

CheckResult transformer_gradient_check(int points, std::uint64_t seed, double tol) {
  CheckResult res{"transformer_2layer", 0.0, points, true};
  ModelConfig cfg{2, 2, 8, 16, 11, 8, HeadKind::LM};
  std::mt19937_64 rng(seed);
  for (int p = 0; p < points; ++p) {
    TransformerModel model(cfg, rng());
    // Larger weights than the default init so every block contributes.
    std::normal_distribution<float> nd(0.0f, 0.3f);
    auto vals = model.values();
    for (auto& t : vals)
      for (auto& v : t) v += nd(rng);
    model.assign(vals);
    std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
    std::vector<int> tokens(6);
    for (auto& t : tokens) t = tok(rng);

    model.set_requires_grad(true);
    model.zero_grad();
    Tensor logits = forward_full(model, tokens, 1, tokens.size());
    Tensor head = reshape(slice(logits, 1, 0, tokens.size() - 1), {tokens.size() - 1, 11});
    backward(cross_entropy(head, std::span<const int>(tokens).subspan(1)));
    std::vector<double> got;
    for (const auto& t : model.params())
      for (float g : t.grad()) got.push_back(g);

    const auto flat = ref::flatten(model);
    auto f = [&](std::span<const double> xs) { return ref::transformer_lm_loss(cfg, xs, tokens); };
    const auto want = finite_difference_gradient(f, flat, 1e-6);
    const double err = relative_error(got, want);
    res.worst = std::max(res.worst, err);
    if (!(err < tol)) res.pass = false;
  }
  return res;
}

KvResult kv_cache_equivalence(int cases, std::uint64_t seed, double tol) {
  KvResult res;
  res.cases = cases;
  std::mt19937_64 rng(seed);
  const int head_opts[] = {1, 2, 4};
  const int dh_opts[] = {4, 8};
  for (int c = 0; c < cases; ++c) {
    ModelConfig cfg;
    cfg.n_layers = 1 + static_cast<int>(rng() % 2);
    cfg.n_heads = head_opts[rng() % 3];
    cfg.d_model = cfg.n_heads * dh_opts[rng() % 2];
    cfg.d_ff = 2 * cfg.d_model;
    cfg.vocab_size = 8 + static_cast<int>(rng() % 30);
    cfg.max_seq_len = 32;
    TransformerModel model(cfg, rng());
    // Spread the weights so greedy choices are not near-ties.
    std::normal_distribution<float> nd(0.0f, 0.2f);
    auto vals = model.values();
    for (auto& t : vals)
      for (auto& v : t) v += nd(rng);
    model.assign(vals);

    std::vector<int> seq{kBos};
    const int plen = 1 + static_cast<int>(rng() % 8);
    for (int i = 1; i < plen; ++i) seq.push_back(3 + static_cast<int>(rng() % (cfg.vocab_size - 3)));
    const int max_new = 12;

    const auto layout = build_inference_layout(model, 1);
    KVCache cache(cfg, 1, seq.size() + max_new);
    std::vector<float> logits = prefill(layout, cache, 0, seq);
    const auto gen = generate(model, seq, max_new, GenerationStrategy::greedy());

    std::vector<int> oracle_tokens;
    for (int step = 0; step < max_new; ++step) {
      Tensor full;
      {
        NoGradGuard ng;
        full = forward_full(model, seq, 1, seq.size());
      }
      const auto V = static_cast<std::size_t>(cfg.vocab_size);
      auto last = full.data().subspan((seq.size() - 1) * V, V);
      for (std::size_t j = 0; j < V; ++j) {
        res.max_logit_diff =
            std::max(res.max_logit_diff, static_cast<double>(std::fabs(last[j] - logits[j])));
      }
      const int next =
          static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
      oracle_tokens.push_back(next);
      if (next == kEos) break;
      seq.push_back(next);
      if (step + 1 < max_new) logits = forward_incremental(model, cache, std::vector<int>{next});
    }
    if (oracle_tokens != gen.tokens) ++res.token_mismatches;
  }
  res.pass = res.token_mismatches == 0 && res.max_logit_diff < tol;
  return res;
}

}  // namespace dsc::oracle
