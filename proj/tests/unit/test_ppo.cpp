// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "dsc/checkpoint.hpp"
#include "dsc/error.hpp"
#include "dsc/ops.hpp"
#include "dsc/ppo.hpp"
#include "dsc/sft.hpp"

using namespace dsc;

namespace {

ModelConfig small(HeadKind head) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = kTokenizerVocab;
  c.max_seq_len = 32;
  c.head = head;
  return c;
}

PPOConfig small_ppo() {
  PPOConfig c;
  c.prompt_len = 8;
  c.gen_len = 4;
  c.batch = 2;
  c.top_k = 20;
  c.actor_lr = 1e-3f;
  c.critic_lr = 1e-3f;
  return c;
}

std::vector<UnifiedRecord> prompts(std::size_t n) {
  std::vector<UnifiedRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    UnifiedRecord r;
    r.prompt = "prompt number " + std::to_string(i);
    r.source = "unit";
    out.push_back(r);
  }
  return out;
}

Tensor vec(std::vector<float> v) {
  const auto n = v.size();
  return Tensor::from({n}, std::move(v));
}

}  // namespace

TEST_CASE("reward shaping examples") {
  PPOConfig cfg;
  const std::vector<float> same{-1.0f, -2.0f, -0.5f, -3.0f};
  auto r = compute_rewards(same, same, 0.7f, cfg, 4);
  CHECK(r == std::vector<float>{0.0f, 0.0f, 0.0f, 0.7f});

  std::vector<float> a = same;
  a[1] += 0.5f;
  r = compute_rewards(a, same, 0.0f, cfg, 4);
  CHECK(r[1] == doctest::Approx(-0.05f).epsilon(1e-6));
  CHECK(r[0] == 0.0f);

  r = compute_rewards(same, same, 9.0f, cfg, 4);
  CHECK(r[3] == 5.0f);
  r = compute_rewards(same, same, -9.0f, cfg, 2);
  CHECK(r == std::vector<float>{0.0f, -5.0f, 0.0f, 0.0f});
}

TEST_CASE("KL penalty sign") {
  PPOConfig cfg;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-4.0f, 0.0f);
  for (int k = 0; k < 100; ++k) {
    const std::vector<float> ref{u(rng), u(rng), u(rng)};
    std::vector<float> act = ref;
    act[0] += 0.1f + 0.5f * -u(rng);
    CHECK(compute_rewards(act, ref, 0.0f, cfg, 3)[0] < 0.0f);
  }
}

TEST_CASE("gae examples") {
  auto [a, ret] = gae(std::vector<double>{0, 0, 1}, std::vector<double>{0.5, 0.5, 0.5}, 1.0, 1.0);
  for (int t = 0; t < 3; ++t) {
    CHECK(a[t] == doctest::Approx(0.5));
    CHECK(ret[t] == doctest::Approx(1.0));
  }
  auto [z, zr] = gae(std::vector<double>(5, 0.0), std::vector<double>(5, 0.0), 1.0, 0.95);
  for (double x : z) CHECK(x == 0.0);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  std::vector<double> rw(7), v(7);
  for (int t = 0; t < 7; ++t) {
    rw[t] = n(rng);
    v[t] = n(rng);
  }
  auto [td, tdr] = gae(rw, v, 0.9, 0.0);
  for (int t = 0; t < 7; ++t) {
    const double next = t + 1 < 7 ? v[t + 1] : 0.0;
    CHECK(td[t] == rw[t] + 0.9 * next - v[t]);
  }
  // explicit discounted sum of residuals
  auto [ga, gr] = gae(rw, v, 0.97, 0.8);
  for (int t = 0; t < 7; ++t) {
    double want = 0.0, f = 1.0;
    for (int l = t; l < 7; ++l) {
      const double next = l + 1 < 7 ? v[l + 1] : 0.0;
      want += f * (rw[l] + 0.97 * next - v[l]);
      f *= 0.97 * 0.8;
    }
    CHECK(ga[t] == doctest::Approx(want).epsilon(1e-12));
    CHECK(gr[t] == doctest::Approx(want + v[t]).epsilon(1e-12));
  }
}

TEST_CASE("whitening") {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(3.0f, 5.0f);
  std::vector<float> x(24), mask(24, 1.0f);
  for (auto& e : x) e = n(rng);
  for (int k = 18; k < 24; ++k) {
    mask[k] = 0.0f;
    x[k] = 0.0f;
  }
  whiten(x, mask);
  double s = 0, s2 = 0;
  for (int k = 0; k < 18; ++k) {
    s += x[k];
    s2 += double(x[k]) * x[k];
  }
  CHECK(std::abs(s / 18) < 1e-6);
  CHECK(std::sqrt(s2 / 18) == doctest::Approx(1.0).epsilon(1e-4));
  for (int k = 18; k < 24; ++k) CHECK(x[k] == 0.0f);

  std::vector<float> single{2.5f}, m1{1.0f};
  whiten(single, m1);
  CHECK(single[0] == 2.5f);
}

TEST_CASE("clipped surrogate examples") {
  CHECK(ppo_actor_loss(vec({-1.0f}), vec({-1.0f}), vec({1.0f}), 0.2f).item() == doctest::Approx(-1.0));
  const float l2 = std::log(2.0f);
  CHECK(ppo_actor_loss(vec({l2 - 1.0f}), vec({-1.0f}), vec({1.0f}), 0.2f).item() ==
        doctest::Approx(-1.2).epsilon(1e-6));
  CHECK(ppo_actor_loss(vec({-l2 - 1.0f}), vec({-1.0f}), vec({-1.0f}), 0.2f).item() ==
        doctest::Approx(0.8).epsilon(1e-6));
  CHECK(ppo_actor_loss(vec({-1.0f, -2.0f}), vec({-1.3f, -1.0f}), vec({0.0f, 0.0f}), 0.2f).item() == 0.0f);
}

TEST_CASE("clipped value loss") {
  CHECK(critic_loss(vec({0.3f}), vec({0.1f}), vec({0.3f}), 0.2f).item() == 0.0f);
  CHECK(critic_loss(vec({1.0f}), vec({0.0f}), vec({0.0f}), 0.2f).item() == doctest::Approx(0.5));
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  for (int k = 0; k < 100; ++k) {
    const float v = n(rng), vo = n(rng), R = n(rng);
    CHECK(critic_loss(vec({v}), vec({vo}), vec({R}), 0.2f).item() >= 0.5f * (v - R) * (v - R) - 1e-6f);
  }
}

TEST_CASE("mixture loss") {
  TransformerModel actor(small(HeadKind::LM), 4);
  auto w = actor.params().back().data();
  std::fill(w.begin(), w.end(), 0.0f);
  std::vector<UnifiedRecord> docs = prompts(3);
  const auto batch = make_batch(docs, 24, BatchPurpose::Pretrain).primary;
  Tensor base = Tensor::scalar(0.37f);
  CHECK(ptx_mixture_loss(base, &batch, 0.0f, actor).item() == 0.37f);
  CHECK(ptx_mixture_loss(base, nullptr, 0.0f, actor).item() == 0.37f);
  CHECK(ptx_mixture_loss(base, &batch, 1.0f, actor).item() ==
        doctest::Approx(0.37 + std::log(260.0)).epsilon(1e-5));
  CHECK_THROWS_AS(ptx_mixture_loss(base, nullptr, 0.5f, actor), ConfigError);
}

TEST_CASE("mixture gradient carries both terms") {
  TransformerModel actor(small(HeadKind::LM), 5);
  actor.set_requires_grad(true);
  const auto batch = make_batch(prompts(2), 20, BatchPurpose::Pretrain).primary;
  const std::vector<int> seq{kBos, 10, 11, 12, 13};
  auto surrogate = [&](const TransformerModel& m) {
    Tensor logits = forward_full(m, seq, 1, seq.size());
    Tensor head = reshape(slice(logits, 1, 1, 4), {3, 260});
    Tensor lp = gather_log_softmax(head, std::span<const int>(seq).subspan(2, 3));
    return ppo_actor_loss(lp, vec({-5.5f, -5.4f, -5.6f}), vec({1.0f, -0.5f, 0.25f}), 0.2f);
  };
  auto grad_of = [&](const Tensor& loss) {
    actor.zero_grad();
    backward(loss);
    auto g = actor.params().back().grad();
    return std::vector<float>(g.begin(), g.end());
  };
  const auto g_ppo = grad_of(surrogate(actor));
  const auto g_ce = grad_of(scale(sft_loss(actor, batch), 0.5f));
  const auto g_all = grad_of(ptx_mixture_loss(surrogate(actor), &batch, 0.5f, actor));
  double worst = 0.0, scale_ref = 0.0, ce_mag = 0.0;
  for (std::size_t i = 0; i < g_all.size(); ++i) {
    worst = std::max(worst, std::abs(double(g_all[i]) - g_ppo[i] - g_ce[i]));
    scale_ref = std::max(scale_ref, std::abs(double(g_all[i])));
    ce_mag = std::max(ce_mag, std::abs(double(g_ce[i])));
  }
  CHECK(ce_mag > 0.0);
  CHECK(worst <= 1e-5 * scale_ref);

  // central difference on a few head weights
  auto head = actor.params().back().data();
  for (std::size_t idx : {std::size_t{3}, std::size_t{777}, std::size_t{2049}}) {
    const float keep = head[idx];
    const float h = 1e-2f;
    double f[2];
    for (int s = 0; s < 2; ++s) {
      head[idx] = keep + (s ? -h : h);
      NoGradGuard ng;
      f[s] = ptx_mixture_loss(surrogate(actor), &batch, 0.5f, actor).item();
    }
    head[idx] = keep;
    const double fd = (f[0] - f[1]) / (2 * h);
    CHECK(std::abs(fd - g_all[idx]) <= 2e-2 * std::max(1e-3, std::abs(double(g_all[idx]))) + 1e-4);
  }
}

TEST_CASE("ema update") {
  TransformerModel ema(small(HeadKind::LM), 1), actor(small(HeadKind::LM), 2);
  for (auto& p : ema.params()) std::fill(p.data().begin(), p.data().end(), 1.0f);
  for (auto& p : actor.params()) std::fill(p.data().begin(), p.data().end(), 0.0f);
  ema_update(ema, actor, 0.9f);
  CHECK(ema.params()[0].data()[0] == doctest::Approx(0.9f));

  TransformerModel e2(small(HeadKind::LM), 3), a2(small(HeadKind::LM), 4);
  const auto e0 = e2.values();
  const auto av = a2.values();
  const float d = 0.8f;
  for (int k = 0; k < 10; ++k) ema_update(e2, a2, d);
  const auto after = e2.values();
  const double dk = std::pow(0.8, 10);
  for (std::size_t p = 0; p < after.size(); ++p) {
    for (std::size_t i = 0; i < after[p].size(); i += 7) {
      CHECK(after[p][i] == doctest::Approx(dk * e0[p][i] + (1 - dk) * av[p][i]).epsilon(1e-4));
    }
  }
  const auto frozen = e2.values();
  CHECK(ema_update(e2, a2, 1.0f) == 0.0);
  CHECK(e2.values() == frozen);
}

TEST_CASE("config validation") {
  PPOConfig c;
  c.lambda = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PPOConfig{};
  c.clip_eps = 1.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PPOConfig{};
  c.ema_decay = 1.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PPOConfig{};
  c.gamma = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  c = small_ppo();
  c.ptx_coef = 1.0f;
  CHECK_THROWS_AS(PpoTrainer(actor, rm, c), ConfigError);
  c = small_ppo();
  c.gen_len = 30;
  CHECK_THROWS_AS(PpoTrainer(actor, rm, c), ConfigError);
  CHECK_THROWS_AS(PpoTrainer(rm, rm, small_ppo()), HeadKindError);
}

TEST_CASE("experience shape, signs, masks") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  PpoTrainer t(actor, rm, small_ppo());
  const auto p = t.encode_prompts(prompts(2));
  CHECK(p[0].size() == 8);
  CHECK(p[0].front() == kBos);
  const auto tail = tokenize("umber 0");  // oldest prompt bytes dropped
  CHECK(std::vector<int>(p[0].begin() + 1, p[0].end()) == tail);
  const auto e = t.generate_experience(p);
  CHECK(t.engine().mode() == EngineMode::Infer);
  CHECK(e.batch == 2);
  CHECK(e.gen_len == 4);
  for (auto* v : {&e.actor_logprobs, &e.ref_logprobs, &e.values, &e.rewards, &e.advantages,
                  &e.returns, &e.mask}) {
    CHECK(v->size() == 8);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    const auto n = e.length(i);
    CHECK(n >= 1);
    for (std::size_t k = 0; k < 4; ++k) {
      const auto at = i * 4 + k;
      CHECK(e.actor_logprobs[at] <= 0.0f);
      CHECK(e.ref_logprobs[at] <= 0.0f);
      if (k < n) {
        CHECK(e.mask[at] == 1.0f);
        if (k + 1 < n) CHECK(e.generated[at] != kEos);
      } else {
        CHECK(e.mask[at] == 0.0f);
        CHECK(e.rewards[at] == 0.0f);
        CHECK(e.generated[at] == kPad);
      }
    }
    // reference == actor at the start: only the terminal score remains
    for (std::size_t k = 0; k + 1 < n; ++k) CHECK(e.rewards[i * 4 + k] == 0.0f);
    CHECK(e.rewards[i * 4 + n - 1] == std::clamp(e.rm_scores[i], -5.0f, 5.0f));
  }
}

TEST_CASE("graph log-probs agree with the cached inference path") {
  TransformerModel actor(small(HeadKind::LM), 6), rm(small(HeadKind::Scalar), 7);
  auto cfg = small_ppo();
  cfg.top_k = 1;
  PpoTrainer t(actor, rm, cfg);
  const auto p = t.encode_prompts(prompts(2));
  const auto e = t.generate_experience(p);
  const auto gens = t.engine().generate(p, cfg.gen_len, GenerationStrategy::greedy());
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(gens[i].tokens.size() == e.length(i));
    for (std::size_t k = 0; k < e.length(i); ++k) {
      CHECK(gens[i].tokens[k] == e.generated[i * 4 + k]);
      CHECK(gens[i].logprobs[k] == doctest::Approx(e.actor_logprobs[i * 4 + k]).epsilon(1e-4));
    }
  }
}

TEST_CASE("mode gate") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  PpoTrainer t(actor, rm, small_ppo());
  const auto p = t.encode_prompts(prompts(2));
  t.engine().switch_mode(EngineMode::Train);
  CHECK_THROWS_AS(generate_experience(p, t.engine(), t.models(), small_ppo(), 0), ModeError);
  const auto e = t.generate_experience(p);
  ZeroOptimizer critic_opt(t.models().critic, 1, AdamHyper{1e-3f});
  CHECK_THROWS_AS(train_rlhf(e, t.engine(), critic_opt, t.models(), small_ppo()), ModeError);
}

TEST_CASE("fixed seed reproduces experience and losses") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  PpoTrainer a(actor, rm, small_ppo()), b(actor, rm, small_ppo());
  for (int it = 0; it < 2; ++it) {
    const auto ma = a.step(prompts(2));
    const auto mb = b.step(prompts(2));
    CHECK(ma.actor_loss == mb.actor_loss);
    CHECK(ma.critic_loss == mb.critic_loss);
    CHECK(ma.mean_rm_score == mb.mean_rm_score);
    CHECK(ma.ema_delta == mb.ema_delta);
  }
  CHECK(a.models().actor.values() == b.models().actor.values());
  CHECK(metrics_csv(a.history()) == metrics_csv(b.history()));
  CHECK(metrics_csv({}) == "iter,mean_rm_score,mean_kl,actor_loss,critic_loss,ema_delta\n");
}

TEST_CASE("zero learning rate leaves every role unchanged") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  auto cfg = small_ppo();
  cfg.actor_lr = 0.0f;
  cfg.critic_lr = 0.0f;
  cfg.enable_ema = false;
  PpoTrainer t(actor, rm, cfg);
  const auto before = std::vector{serialize_checkpoint(t.models().actor),
                                  serialize_checkpoint(t.models().reference),
                                  serialize_checkpoint(t.models().critic),
                                  serialize_checkpoint(t.models().reward)};
  (void)t.step(prompts(2));
  CHECK(serialize_checkpoint(t.models().actor) == before[0]);
  CHECK(serialize_checkpoint(t.models().reference) == before[1]);
  CHECK(serialize_checkpoint(t.models().critic) == before[2]);
  CHECK(serialize_checkpoint(t.models().reward) == before[3]);
}

TEST_CASE("a learning step moves actor, critic and EMA but not the frozen roles") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  PpoTrainer t(actor, rm, small_ppo());
  const auto ref = t.models().reference.values();
  const auto rwd = t.models().reward.values();
  const auto m = t.step(prompts(2));
  CHECK(t.models().actor.values() != actor.values());
  CHECK(t.models().critic.values() != rm.values());
  CHECK(m.ema_delta > 0.0);
  CHECK(t.models().reference.values() == ref);
  CHECK(t.models().reward.values() == rwd);
  CHECK(t.engine().mode() == EngineMode::Train);
}

TEST_CASE("zero advantages give zero actor loss") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  auto cfg = small_ppo();
  PpoTrainer t(actor, rm, cfg);
  auto e = t.generate_experience(t.encode_prompts(prompts(2)));
  std::fill(e.advantages.begin(), e.advantages.end(), 0.0f);
  const auto before = t.models().actor.values();
  const auto l = t.train_rlhf(e);
  CHECK(l.actor_loss == 0.0);
  CHECK(t.models().actor.values() == before);
}

TEST_CASE("mixture term changes the actor step") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  auto cfg = small_ppo();
  cfg.ptx_coef = 0.5f;
  PpoTrainer with(actor, rm, cfg, prompts(5));
  cfg.ptx_coef = 0.0f;
  PpoTrainer without(actor, rm, cfg);
  const auto a = with.step(prompts(2));
  const auto b = without.step(prompts(2));
  CHECK(a.actor_loss > b.actor_loss);
}

TEST_CASE("data-parallel world size does not change PPO") {
  TransformerModel actor(small(HeadKind::LM), 1), rm(small(HeadKind::Scalar), 2);
  auto cfg = small_ppo();
  PpoTrainer one(actor, rm, cfg);
  cfg.world = 2;
  cfg.tp = 2;
  PpoTrainer two(actor, rm, cfg);
  const auto a = one.step(prompts(2));
  const auto b = two.step(prompts(2));
  CHECK(a.actor_loss == doctest::Approx(b.actor_loss).epsilon(1e-5));
}
