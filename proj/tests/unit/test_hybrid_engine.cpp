// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>

#include "dsc/error.hpp"
#include "dsc/hybrid_engine.hpp"
#include "dsc/ops.hpp"

using namespace dsc;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = 20;
  c.max_seq_len = 24;
  return c;
}

std::vector<std::vector<int>> corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> s{kBos};
    for (int t = 0; t < 9; ++t) s.push_back(3 + static_cast<int>(rng() % 17));
    out.push_back(s);
  }
  return out;
}

SampleLoss lm_loss(const std::vector<std::vector<int>>& data) {
  return [&data](const TransformerModel& m, std::size_t s) {
    const auto& seq = data[s];
    Tensor logits = forward_full(m, seq, 1, seq.size());
    Tensor head = reshape(slice(logits, 1, 0, seq.size() - 1),
                          {seq.size() - 1, static_cast<std::size_t>(m.config().vocab_size)});
    return scale(cross_entropy(head, std::span<const int>(seq).subspan(1)),
                 1.0f / static_cast<float>(data.size()));
  };
}

}  // namespace

TEST_CASE("shard table split rule") {
  auto t = make_shard_table({"x"}, {10}, 3);
  CHECK(t.ranges[0][0].size() == 4);
  CHECK(t.ranges[0][1].size() == 3);
  CHECK(t.ranges[0][2].size() == 3);
  CHECK(t.ranges[0][1].begin == 4);
  auto one = make_shard_table({"x", "y"}, {7, 2}, 1);
  CHECK(one.ranges[0][0].size() == 7);
  CHECK_THROWS_AS(make_shard_table({"x"}, {3}, 0), ContractError);
  auto small = make_shard_table({"b"}, {2}, 4);
  CHECK(small.ranges[0][3].size() == 0);
}

TEST_CASE("partition and gather round trip") {
  TransformerModel m(tiny(), 3);
  for (int W : {1, 2, 3, 4, 7}) {
    auto z = partition_zero(m, W);
    CHECK(gather_full(z) == m.values());
    const double per = static_cast<double>(z.table.total_elements()) / W;
    for (int w = 0; w < W; ++w) {
      CHECK(std::fabs(z.table.worker_elements(w) - per) <= z.table.lengths.size());
    }
  }
  auto z = partition_zero(m, 3);
  auto broken = z;
  broken.data[1][4].pop_back();
  CHECK_THROWS_AS(gather_full(broken), IntegrityError);
  broken = z;
  broken.data.pop_back();
  CHECK_THROWS_AS(gather_full(broken), IntegrityError);
}

TEST_CASE("sharded train step is byte-identical for W in {1,2,4}") {
  auto data = corpus(5, 8);
  std::vector<std::vector<std::vector<float>>> results;
  std::vector<std::vector<std::vector<float>>> moments;
  for (int W : {1, 2, 4}) {
    TransformerModel m(tiny(), 42);
    ZeroOptimizer opt(m, W, AdamHyper{1e-2f});
    for (int step = 0; step < 3; ++step) opt.step(data.size(), lm_loss(data));
    results.push_back(m.values());
    moments.push_back(gather_full(opt.exp_avg()));
    CHECK(gather_full(opt.params()) == m.values());
  }
  CHECK(results[0] == results[1]);
  CHECK(results[0] == results[2]);
  CHECK(moments[0] == moments[1]);
  CHECK(moments[0] == moments[2]);

  TransformerModel fresh(tiny(), 42);
  CHECK(fresh.values() != results[0]);
}

TEST_CASE("optimizer bytes halve from W=1 to W=2") {
  TransformerModel m(tiny(), 1);
  HybridEngine e1(m, {1, 1});
  TransformerModel m2(tiny(), 1);
  HybridEngine e2(m2, {2, 1});
  const auto params = m.params().size();
  const auto o1 = e1.ledger().bytes(0, MemCategory::Optimizer);
  for (int w = 0; w < 2; ++w) {
    const auto o2 = e2.ledger().bytes(w, MemCategory::Optimizer);
    CHECK(std::fabs(static_cast<double>(o2) - o1 / 2.0) <= 8.0 * params);
  }
}

TEST_CASE("mode switching") {
  auto data = corpus(4, 2);
  TransformerModel m(tiny(), 5);
  EngineOptions opt;
  opt.world = 4;
  opt.tp = 2;
  opt.kv_batch = 3;
  opt.kv_capacity = 20;
  opt.hyper.lr = 1e-2f;
  HybridEngine e(m, opt);
  e.train_step(data.size(), lm_loss(data));

  auto r = e.memory_report();
  CHECK(r.get(MemCategory::KvCache) == 0);
  CHECK(r.get(MemCategory::Grads) > 0);
  const auto params_before = r.get(MemCategory::Params);
  const auto weights = m.values();
  const auto m_state = gather_full(e.optimizer().exp_avg());
  const auto v_state = gather_full(e.optimizer().exp_avg_sq());

  std::vector<int> prompt{kBos, 5, 6};
  CHECK_THROWS_AS(e.generate({prompt}, 4, GenerationStrategy::greedy()), ModeError);
  CHECK_THROWS_AS(e.tp_forward(prompt, 1, 3), ModeError);

  e.switch_mode(EngineMode::Infer);
  r = e.memory_report();
  CHECK(r.get(MemCategory::Grads) == 0);
  CHECK(r.get(MemCategory::Optimizer) == 0);
  CHECK(r.get(MemCategory::Params) == params_before);
  CHECK(r.get(MemCategory::KvCache) == 2u * 2 * 4 * 4 * 20 * 3 * 4);
  CHECK(r.get(MemCategory::KvCache) == e.kv_bytes());
  const auto events = e.ledger().events().size();
  e.switch_mode(EngineMode::Infer);
  CHECK(e.ledger().events().size() == events);
  CHECK_THROWS_AS(e.train_step(data.size(), lm_loss(data)), ModeError);
  auto gen = e.generate({prompt}, 4, GenerationStrategy::greedy());
  CHECK(gen[0].tokens == generate(m, prompt, 4, GenerationStrategy::greedy()).tokens);

  e.switch_mode(EngineMode::Train);
  r = e.memory_report();
  CHECK(r.get(MemCategory::KvCache) == 0);
  CHECK(r.get(MemCategory::Activations) == 0);
  CHECK(m.values() == weights);
  CHECK(gather_full(e.optimizer().exp_avg()) == m_state);
  CHECK(gather_full(e.optimizer().exp_avg_sq()) == v_state);
  CHECK(e.ledger().conserved());
  for (const auto& ev : e.ledger().events()) CHECK(ev.worker < 4);
}

TEST_CASE("budget errors name the category and leave the engine unchanged") {
  TransformerModel m(tiny(), 5);
  EngineOptions probe;
  HybridEngine p(m, probe);
  const auto train_bytes = p.ledger().worker_total(0);

  TransformerModel m2(tiny(), 5);
  EngineOptions opt;
  opt.memory_budget = train_bytes + 64;
  opt.kv_batch = 64;
  opt.kv_capacity = 24;
  HybridEngine e(m2, opt);
  try {
    e.switch_mode(EngineMode::Infer);
    FAIL("expected BudgetError");
  } catch (const BudgetError& err) {
    const std::string msg = err.what();
    CHECK((msg.find("kv_cache") != std::string::npos || msg.find("activations") != std::string::npos));
  }
  CHECK(e.mode() == EngineMode::Train);
  CHECK(e.ledger().worker_total(0) == train_bytes);
  CHECK(e.ledger().conserved());

  EngineOptions bad;
  bad.world = 3;
  bad.tp = 2;
  CHECK_THROWS_AS(HybridEngine(m, bad), ConfigError);
}

TEST_CASE("tp forward matches the unsharded model") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig c = tiny();
    c.n_heads = 8;
    c.d_model = 32;
    TransformerModel m(c, rng());
    std::vector<int> toks{kBos};
    for (int i = 0; i < 10; ++i) toks.push_back(3 + static_cast<int>(rng() % 17));
    NoGradGuard ng;
    auto full = forward_full(m, toks, 1, toks.size());
    for (int tp : {1, 2, 4, 8}) {
      EngineOptions o;
      o.world = 8;
      o.tp = tp;
      HybridEngine e(m, o);
      e.switch_mode(EngineMode::Infer);
      auto out = e.tp_forward(toks, 1, toks.size());
      double worst = 0;
      for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, double(std::fabs(out[i] - full.data()[i])));
      CHECK(worst < 1e-5);
      CHECK(e.tp_forward(toks, 1, toks.size()) == out);
    }
  }
}
