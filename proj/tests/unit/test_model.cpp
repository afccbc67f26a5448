// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "dsc/checkpoint.hpp"
#include "dsc/error.hpp"
#include "dsc/inference.hpp"
#include "dsc/ops.hpp"
#include "oracles.hpp"
#include "reference.hpp"

using namespace dsc;

namespace {

ModelConfig tiny(HeadKind head = HeadKind::LM) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = 20;
  c.max_seq_len = 24;
  c.head = head;
  return c;
}

std::vector<int> random_tokens(std::size_t n, int vocab, std::mt19937_64& rng) {
  std::vector<int> t(n);
  t[0] = kBos;
  for (std::size_t i = 1; i < n; ++i) t[i] = 3 + static_cast<int>(rng() % (vocab - 3));
  return t;
}

std::vector<float> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("config validation and presets") {
  ModelConfig bad = tiny();
  bad.d_model = 18;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny();
  bad.vocab_size = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto p = model_preset("opt-350m-toy");
  CHECK(p.n_layers == 4);
  CHECK(p.d_model == 128);
  CHECK(model_preset("facebook/opt-1.3b") == model_preset("opt-1.3b-toy"));
  CHECK(model_preset("opt-1.3b-toy").d_model == 192);
  CHECK_THROWS_AS(model_preset("gpt-17"), ConfigError);
  auto c = tiny(HeadKind::Scalar);
  CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("forward_full shapes and length limit") {
  TransformerModel m(tiny(), 1);
  std::vector<int> one{kBos};
  CHECK(forward_full(m, one, 1, 1).shape() == Shape{1, 1, 20});
  std::vector<int> longer(25, 5);
  CHECK_THROWS_AS(forward_full(m, longer, 1, 25), LengthError);
  TransformerModel s(tiny(HeadKind::Scalar), 1);
  CHECK(forward_full(s, one, 1, 1).shape() == Shape{1, 1});
}

TEST_CASE("batch permutation and causality") {
  std::mt19937_64 rng(5);
  TransformerModel m(tiny(), 2);
  auto a = random_tokens(7, 20, rng), b = random_tokens(7, 20, rng);
  std::vector<int> ab(a), ba(b);
  ab.insert(ab.end(), b.begin(), b.end());
  ba.insert(ba.end(), a.begin(), a.end());
  auto x = vals(forward_full(m, ab, 2, 7));
  auto y = vals(forward_full(m, ba, 2, 7));
  const std::size_t row = 7 * 20;
  CHECK(std::equal(x.begin(), x.begin() + row, y.begin() + row));
  CHECK(std::equal(x.begin() + row, x.end(), y.begin()));

  auto edited = a;
  edited[5] = edited[5] == 7 ? 8 : 7;
  auto p = vals(forward_full(m, a, 1, 7));
  auto q = vals(forward_full(m, edited, 1, 7));
  CHECK(std::equal(p.begin(), p.begin() + 5 * 20, q.begin()));
  CHECK_FALSE(std::equal(p.begin() + 5 * 20, p.end(), q.begin() + 5 * 20));
}

TEST_CASE("engine forward agrees with the float64 reference transformer") {
  std::mt19937_64 rng(9);
  for (auto head : {HeadKind::LM, HeadKind::Scalar}) {
    TransformerModel m(tiny(head), 3);
    auto toks = random_tokens(10, 20, rng);
    auto got = vals(forward_full(m, toks, 1, toks.size()));
    auto want = ref::transformer_forward(m.config(), ref::unflatten(m.config(), ref::flatten(m)), toks);
    REQUIRE(got.size() == want.v.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want.v[i]) < 1e-5);
  }
}

TEST_CASE("2-layer transformer gradient matches finite differences") {
  auto r = oracle::transformer_gradient_check(3, 21);
  INFO("worst relative error " << r.worst);
  CHECK(r.pass);
}

TEST_CASE("KV cache incremental decoding matches recomputation") {
  std::mt19937_64 rng(13);
  TransformerModel m(tiny(), 4);
  auto toks = random_tokens(20, 20, rng);
  auto layout = build_inference_layout(m, 1);

  KVCache cache(m.config(), 1, 24);
  auto last = prefill(layout, cache, 0, std::span<const int>(toks).first(8));
  std::vector<int> prefix(toks.begin(), toks.begin() + 8);
  auto full = vals(forward_full(m, prefix, 1, 8));
  for (int j = 0; j < 20; ++j) CHECK(std::fabs(last[j] - full[7 * 20 + j]) < 1e-5);

  KVCache c2(m.config(), 1, 24);
  prefill(layout, c2, 0, std::span<const int>(toks).first(1));
  auto inc = extend(layout, c2, 0, std::span<const int>(toks).subspan(1, 19));
  auto ref_all = vals(forward_full(m, toks, 1, 20));
  double worst = 0;
  for (std::size_t i = 0; i < inc.size(); ++i) worst = std::max(worst, double(std::fabs(inc[i] - ref_all[20 + i])));
  CHECK(worst < 1e-5);

  auto res = oracle::kv_cache_equivalence(20, 3);
  INFO("max logit diff " << res.max_logit_diff);
  CHECK(res.pass);
}

TEST_CASE("cache capacity and prompt preconditions") {
  TransformerModel m(tiny(), 4);
  auto layout = build_inference_layout(m, 1);
  KVCache cache(m.config(), 1, 4);
  std::vector<int> p{kBos, 5, 6, 7};
  prefill(layout, cache, 0, p);
  CHECK_THROWS_AS(forward_incremental(layout, cache, std::vector<int>{5}), CapacityError);
  KVCache c2(m.config(), 1, 4);
  CHECK_THROWS_AS(prefill(layout, c2, 0, std::vector<int>{}), ContractError);
  CHECK_THROWS_AS(prefill(layout, c2, 0, std::vector<int>{5, 6}), ContractError);
  CHECK_THROWS_AS(KVCache(m.config(), 1, 25), CapacityError);
  CHECK(KVCache(m.config(), 3, 10).bytes() == 2u * 2 * 4 * 4 * 10 * 3 * 4);
}

TEST_CASE("generation") {
  std::mt19937_64 rng(17);
  TransformerModel m(tiny(), 6);
  auto prompt = random_tokens(5, 20, rng);
  auto g1 = generate(m, prompt, 10, GenerationStrategy::greedy());
  auto g2 = generate(m, prompt, 10, GenerationStrategy::greedy());
  CHECK(g1.tokens == g2.tokens);
  CHECK(g1.tokens.size() <= 10);
  for (float lp : g1.logprobs) {
    CHECK(lp <= 0.0f);
    CHECK(std::isfinite(lp));
  }
  auto s1 = generate(m, prompt, 10, GenerationStrategy::sample_top_k(5, 99));
  auto s2 = generate(m, prompt, 10, GenerationStrategy::sample_top_k(5, 99));
  CHECK(s1.tokens == s2.tokens);
  CHECK(s1.logprobs == s2.logprobs);
  CHECK_THROWS_AS(generate(m, prompt, 0, GenerationStrategy::greedy()), ContractError);
  CHECK_THROWS_AS(generate(m, prompt, 20, GenerationStrategy::greedy()), CapacityError);

  // Greedy equals the argmax chain of full recomputation.
  std::vector<int> seq = prompt;
  std::vector<int> chain;
  for (int i = 0; i < 10; ++i) {
    auto l = vals(forward_full(m, seq, 1, seq.size()));
    auto row = std::vector<float>(l.end() - 20, l.end());
    int best = int(std::max_element(row.begin(), row.end()) - row.begin());
    chain.push_back(best);
    if (best == kEos) break;
    seq.push_back(best);
  }
  CHECK(chain == g1.tokens);
}

TEST_CASE("top-k picks among the k largest") {
  std::vector<float> logits{0.0f, 5.0f, 4.9f, -1.0f, 4.8f, 0.1f};
  std::mt19937_64 rng(1);
  auto s = GenerationStrategy::sample_top_k(3, 1);
  for (int i = 0; i < 200; ++i) {
    int t = pick_token(logits, s, rng);
    CHECK((t == 1 || t == 2 || t == 4));
  }
  std::vector<float> tie{1.0f, 3.0f, 3.0f};
  CHECK(pick_token(tie, GenerationStrategy::greedy(), rng) == 1);
  CHECK(token_logprob(std::vector<float>{0, 0, 0, 0}, 2) == doctest::Approx(-std::log(4.0)));
}

TEST_CASE("scalar score reads the last non-pad position") {
  TransformerModel s(tiny(HeadKind::Scalar), 8);
  std::vector<int> toks{kBos, 5, 6, 7, 8};
  auto full = vals(forward_full(s, toks, 1, 5));
  CHECK(scalar_score(s, toks) == full[4]);
  std::vector<int> padded{kBos, 5, 6, 7, 8, kPad, kPad, kPad};
  CHECK(scalar_score(s, padded) == full[4]);
  std::vector<int> short_seq{kBos, 5, 6, kPad, kPad};
  CHECK(scalar_score(s, short_seq) == doctest::Approx(full[2]).epsilon(1e-6));
  TransformerModel lm(tiny(), 8);
  CHECK_THROWS_AS(scalar_score(lm, toks), HeadKindError);
}

TEST_CASE("tensor-parallel layouts") {
  TransformerModel m(tiny(), 10);
  auto l1 = build_inference_layout(m, 1);
  auto l2 = build_inference_layout(m, 2);
  CHECK(l2.workers.size() == 2);
  CHECK(l2.workers[0].n_heads == 2);
  CHECK(l2.workers[1].head_begin == 2);
  CHECK_THROWS_AS(build_inference_layout(m, 3), ConfigError);
  std::mt19937_64 rng(2);
  auto toks = random_tokens(12, 20, rng);
  auto a = layout_forward(l1, toks, 1, 12);
  auto ref_full = vals(forward_full(m, toks, 1, 12));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - ref_full[i]) < 1e-5);
  for (int tp : {2, 4}) {
    auto lt = build_inference_layout(m, tp);
    auto b = layout_forward(lt, toks, 1, 12);
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::fabs(a[i] - b[i])));
    CHECK(worst < 1e-5);
    auto g1 = generate(l1, toks, 8, GenerationStrategy::greedy());
    auto gt = generate(lt, toks, 8, GenerationStrategy::greedy());
    CHECK(g1.tokens == gt.tokens);
    CHECK(layout_forward(lt, toks, 1, 12) == b);
  }
}

TEST_CASE("checkpoint round trip and errors") {
  TransformerModel m(tiny(HeadKind::Scalar), 12);
  auto bytes = serialize_checkpoint(m);
  CHECK(bytes.substr(0, 4) == "DSC1");
  auto back = deserialize_checkpoint(bytes);
  CHECK(back.config() == m.config());
  CHECK(back.values() == m.values());
  CHECK(serialize_checkpoint(back) == bytes);

  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), TruncatedError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, 6)), TruncatedError);
  auto x = bytes;
  x[3] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(x), UnsupportedVersionError);
  x = bytes;
  x[0] = 'Q';
  CHECK_THROWS_AS(deserialize_checkpoint(x), BadMagicError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes, tiny()), ConfigMismatchError);

  auto path = std::filesystem::temp_directory_path() / "dsc_test_ckpt.bin";
  save_checkpoint(m, path);
  CHECK(load_checkpoint(path).values() == m.values());
  std::filesystem::resize_file(path, 100);
  CHECK_THROWS_AS(load_checkpoint(path), TruncatedError);
  std::filesystem::remove(path);
}
