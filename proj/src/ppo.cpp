// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dsc/error.hpp"
#include "dsc/io.hpp"
#include "dsc/ops.hpp"
#include "dsc/sft.hpp"

namespace dsc {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t iteration) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (iteration + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Tensor row_tensor(std::span<const float> v) { return Tensor::from({v.size()}, {v.begin(), v.end()}); }

// Log-probs of the generated tokens of one row under `model`: [n].
Tensor response_logprobs(const TransformerModel& model, const std::vector<int>& seq,
                         std::size_t p, std::size_t n) {
  Tensor logits = forward_full(model, seq, 1, seq.size());
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  Tensor head = reshape(slice(logits, 1, p - 1, p - 1 + n), {n, V});
  return gather_log_softmax(head, std::span<const int>(seq).subspan(p, n));
}

// Critic values for the states that emitted each generated token: [n].
Tensor response_values(const TransformerModel& critic, const std::vector<int>& seq, std::size_t p,
                       std::size_t n) {
  Tensor v = forward_full(critic, seq, 1, seq.size());
  return reshape(slice(v, 1, p - 1, p - 1 + n), {n});
}

template <class T>
std::span<const T> row_of(const std::vector<T>& v, std::size_t i, std::size_t width,
                          std::size_t n) {
  return std::span<const T>(v).subspan(i * width, n);
}

}  // namespace

void PPOConfig::validate() const {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("lambda must be in (0,1]");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0,1]");
  if (!(clip_eps > 0.0f && clip_eps < 1.0f)) throw ConfigError("clip epsilon must be in (0,1)");
  if (!(ema_decay > 0.0f && ema_decay < 1.0f)) throw ConfigError("ema decay must be in (0,1)");
  if (ppo_epochs < 1) throw ConfigError("ppo epochs must be >= 1");
  if (gen_len < 1) throw ConfigError("gen_len must be >= 1");
  if (prompt_len < 1) throw ConfigError("prompt_len must be >= 1");
  if (batch < 1) throw ConfigError("global batch must be >= 1");
  if (ptx_coef < 0.0f) throw ConfigError("mixture coefficient must be >= 0");
}

std::size_t Experience::length(std::size_t i) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < gen_len; ++t) n += mask[i * gen_len + t] > 0.0f ? 1 : 0;
  return n;
}

std::vector<int> Experience::sequence(std::size_t i) const {
  std::vector<int> s(prompts.begin() + static_cast<std::ptrdiff_t>(i * prompt_width),
                     prompts.begin() + static_cast<std::ptrdiff_t>(i * prompt_width + prompt_lengths[i]));
  const std::size_t n = length(i);
  s.insert(s.end(), generated.begin() + static_cast<std::ptrdiff_t>(i * gen_len),
           generated.begin() + static_cast<std::ptrdiff_t>(i * gen_len + n));
  return s;
}

std::vector<float> compute_rewards(std::span<const float> actor_lp, std::span<const float> ref_lp,
                                   float rm_score, const PPOConfig& config, std::size_t length) {
  if (actor_lp.size() != ref_lp.size()) throw DimensionError("compute_rewards shape mismatch");
  if (length > actor_lp.size()) throw ContractError("compute_rewards length exceeds row");
  std::vector<float> r(actor_lp.size(), 0.0f);
  for (std::size_t t = 0; t < length; ++t) r[t] = -config.beta * (actor_lp[t] - ref_lp[t]);
  if (length > 0) {
    r[length - 1] += std::clamp(rm_score, -config.reward_clip, config.reward_clip);
  }
  return r;
}

std::pair<std::vector<double>, std::vector<double>> gae(std::span<const double> rewards,
                                                        std::span<const double> values,
                                                        double gamma, double lambda) {
  if (rewards.size() != values.size()) throw DimensionError("gae shape mismatch");
  const std::size_t n = rewards.size();
  std::vector<double> adv(n), ret(n);
  double next_value = 0.0, running = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + gamma * lambda * running;
    adv[t] = running;
    ret[t] = running + values[t];
    next_value = values[t];
  }
  return {adv, ret};
}

void whiten(std::span<float> values, std::span<const float> mask) {
  if (values.size() != mask.size()) throw DimensionError("whiten shape mismatch");
  double n = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask[i] > 0.0f) {
      n += 1.0;
      sum += values[i];
    }
  }
  if (n < 2.0) return;
  const double mu = sum / n;
  double var = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask[i] > 0.0f) var += (values[i] - mu) * (values[i] - mu);
  }
  const double inv = 1.0 / std::sqrt(var / n + 1e-12);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask[i] > 0.0f) values[i] = static_cast<float>((values[i] - mu) * inv);
  }
}

Tensor ppo_actor_loss(const Tensor& new_lp, const Tensor& old_lp, const Tensor& advantages,
                      float eps) {
  Tensor ratio = exp(sub(new_lp, old_lp));
  Tensor unclipped = mul(ratio, advantages);
  Tensor clipped = mul(clamp(ratio, 1.0f - eps, 1.0f + eps), advantages);
  return scale(mean(minimum(unclipped, clipped)), -1.0f);
}

Tensor critic_loss(const Tensor& values, const Tensor& old_values, const Tensor& returns,
                   float value_clip) {
  Tensor v_clip = add(old_values, clamp(sub(values, old_values), -value_clip, value_clip));
  Tensor e1 = sub(values, returns);
  Tensor e2 = sub(v_clip, returns);
  return scale(mean(maximum(mul(e1, e1), mul(e2, e2))), 0.5f);
}

Tensor ptx_mixture_loss(const Tensor& ppo_loss, const Batch* pretrain, float coef,
                        const TransformerModel& actor) {
  if (coef == 0.0f) return ppo_loss;
  if (pretrain == nullptr || pretrain->rows == 0) {
    throw ConfigError("mixture coefficient > 0 but no pretraining corpus is configured");
  }
  return add(ppo_loss, scale(sft_loss(actor, *pretrain), coef));
}

double ema_update(TransformerModel& ema, const TransformerModel& actor, float decay) {
  if (!(ema.config() == actor.config())) throw ConfigError("EMA and actor configs differ");
  double sq = 0.0;
  auto& ep = ema.params();
  const auto& ap = actor.params();
  for (std::size_t p = 0; p < ep.size(); ++p) {
    auto e = ep[p].data();
    auto a = ap[p].data();
    for (std::size_t i = 0; i < e.size(); ++i) {
      const float next = decay * e[i] + (1.0f - decay) * a[i];
      sq += static_cast<double>(next - e[i]) * (next - e[i]);
      e[i] = next;
    }
  }
  return std::sqrt(sq);
}

RlhfModels RlhfModels::from(const TransformerModel& sft_actor, const TransformerModel& reward,
                            bool with_ema) {
  if (sft_actor.config().head != HeadKind::LM) throw HeadKindError("actor needs an LM head");
  if (reward.config().head != HeadKind::Scalar) throw HeadKindError("reward model needs a scalar head");
  if (sft_actor.config().vocab_size != reward.config().vocab_size) {
    throw ConfigError("actor and reward model vocabularies differ");
  }
  RlhfModels m{sft_actor.clone(), sft_actor.clone(), reward.clone(), reward.clone(), std::nullopt};
  if (with_ema) m.ema = sft_actor.clone();
  m.reference.set_requires_grad(false);
  m.reward.set_requires_grad(false);
  return m;
}

Experience generate_experience(const std::vector<std::vector<int>>& prompts, HybridEngine& engine,
                               const RlhfModels& models, const PPOConfig& config,
                               std::uint64_t iteration) {
  if (engine.mode() != EngineMode::Infer) {
    throw ModeError("generate_experience requires INFER mode but the engine is in TRAIN mode");
  }
  if (prompts.empty()) throw ContractError("generate_experience on an empty prompt batch");
  const auto strategy =
      GenerationStrategy::sample_top_k(config.top_k, mix_seed(config.seed, iteration), config.temperature);
  const auto gens = engine.generate(prompts, config.gen_len, strategy);

  Experience e;
  e.batch = prompts.size();
  e.gen_len = static_cast<std::size_t>(config.gen_len);
  for (const auto& p : prompts) e.prompt_width = std::max(e.prompt_width, p.size());
  const std::size_t B = e.batch, G = e.gen_len;
  e.prompts.assign(B * e.prompt_width, kPad);
  e.generated.assign(B * G, kPad);
  for (auto* v : {&e.mask, &e.actor_logprobs, &e.ref_logprobs, &e.values, &e.rewards,
                  &e.advantages, &e.returns}) {
    v->assign(B * G, 0.0f);
  }
  e.rm_scores.assign(B, 0.0f);

  NoGradGuard guard;
  for (std::size_t i = 0; i < B; ++i) {
    const auto& p = prompts[i];
    std::copy(p.begin(), p.end(), e.prompts.begin() + static_cast<std::ptrdiff_t>(i * e.prompt_width));
    e.prompt_lengths.push_back(p.size());
    const auto& toks = gens[i].tokens;
    const std::size_t n = toks.size();
    for (std::size_t t = 0; t < n; ++t) {
      e.generated[i * G + t] = toks[t];
      e.mask[i * G + t] = 1.0f;
    }
    std::vector<int> seq(p);
    seq.insert(seq.end(), toks.begin(), toks.end());

    Tensor alp = response_logprobs(models.actor, seq, p.size(), n);
    Tensor rlp = response_logprobs(models.reference, seq, p.size(), n);
    Tensor val = response_values(models.critic, seq, p.size(), n);
    Tensor rm_all = forward_full(models.reward, seq, 1, seq.size());
    e.rm_scores[i] = rm_all.data()[seq.size() - 1];
    std::copy(alp.data().begin(), alp.data().end(), e.actor_logprobs.begin() + static_cast<std::ptrdiff_t>(i * G));
    std::copy(rlp.data().begin(), rlp.data().end(), e.ref_logprobs.begin() + static_cast<std::ptrdiff_t>(i * G));
    std::copy(val.data().begin(), val.data().end(), e.values.begin() + static_cast<std::ptrdiff_t>(i * G));

    const auto r = compute_rewards(row_of(e.actor_logprobs, i, G, G), row_of(e.ref_logprobs, i, G, G),
                                   e.rm_scores[i], config, n);
    std::copy(r.begin(), r.end(), e.rewards.begin() + static_cast<std::ptrdiff_t>(i * G));
    std::vector<double> rd(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<double> vd(val.data().begin(), val.data().end());
    const auto [adv, ret] = gae(rd, vd, config.gamma, config.lambda);
    for (std::size_t t = 0; t < n; ++t) {
      e.advantages[i * G + t] = static_cast<float>(adv[t]);
      e.returns[i * G + t] = static_cast<float>(ret[t]);
    }
  }
  return e;
}

TrainLosses train_rlhf(const Experience& exp, HybridEngine& engine, ZeroOptimizer& critic_opt,
                       RlhfModels& models, const PPOConfig& config, const Batch* pretrain) {
  if (engine.mode() != EngineMode::Train) {
    throw ModeError("train_rlhf requires TRAIN mode but the engine is in INFER mode");
  }
  if (&engine.model() != &models.actor) throw ContractError("engine does not own the actor");
  if (&critic_opt.model() != &models.critic) throw ContractError("critic optimizer mismatch");
  if (config.ptx_coef > 0.0f && (pretrain == nullptr || pretrain->rows == 0)) {
    throw ConfigError("mixture coefficient > 0 but no pretraining corpus is configured");
  }
  const std::size_t B = exp.batch, G = exp.gen_len;
  std::vector<float> adv = exp.advantages;
  whiten(adv, exp.mask);
  double total = 0.0;
  for (float m : exp.mask) total += m;
  if (total <= 0.0) throw ContractError("experience holds no generated tokens");

  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> lens;
  for (std::size_t i = 0; i < B; ++i) {
    seqs.push_back(exp.sequence(i));
    lens.push_back(exp.length(i));
  }
  const std::size_t ptx_rows = config.ptx_coef > 0.0f ? pretrain->rows : 0;
  const double ptx_norm = ptx_rows ? batch_target_count(*pretrain) : 0.0;

  TrainLosses out;
  for (int epoch = 0; epoch < config.ppo_epochs; ++epoch) {
    StepStats actor_stats;
    try {
      actor_stats = engine.train_step(B + ptx_rows, [&](const TransformerModel& m, std::size_t s) {
        if (s >= B) {
          return scale(sft_row_loss(m, *pretrain, s - B, ptx_norm), config.ptx_coef);
        }
        const std::size_t n = lens[s], p = exp.prompt_lengths[s];
        Tensor new_lp = response_logprobs(m, seqs[s], p, n);
        Tensor loss = ppo_actor_loss(new_lp, row_tensor(row_of(exp.actor_logprobs, s, G, n)),
                                     row_tensor(std::span<const float>(adv).subspan(s * G, n)),
                                     config.clip_eps);
        return scale(loss, static_cast<float>(n / total));
      });
      const auto critic_stats = critic_opt.step(B, [&](const TransformerModel& m, std::size_t s) {
        const std::size_t n = lens[s], p = exp.prompt_lengths[s];
        Tensor v = response_values(m, seqs[s], p, n);
        Tensor loss = critic_loss(v, row_tensor(row_of(exp.values, s, G, n)),
                                  row_tensor(row_of(exp.returns, s, G, n)), config.value_clip);
        return scale(loss, static_cast<float>(n / total));
      });
      out.critic_loss = critic_stats.loss;
    } catch (const NumericError& e) {
      throw NumericError("PPO diverged: " + std::string(e.what()));
    }
    out.actor_loss = actor_stats.loss;
  }
  if (models.ema) out.ema_delta = ema_update(*models.ema, models.actor, config.ema_decay);
  return out;
}

std::string metrics_csv(const std::vector<PPOMetrics>& rows) {
  std::ostringstream out;
  out << "iter,mean_rm_score,mean_kl,actor_loss,critic_loss,ema_delta\n";
  for (const auto& r : rows) {
    out << r.iter << ',' << fmt_num(r.mean_rm_score) << ',' << fmt_num(r.mean_kl) << ','
        << fmt_num(r.actor_loss) << ',' << fmt_num(r.critic_loss) << ',' << fmt_num(r.ema_delta)
        << '\n';
  }
  return out.str();
}

namespace {

EngineOptions engine_options(const PPOConfig& c) {
  EngineOptions o;
  o.world = c.world;
  o.tp = c.tp;
  o.hyper = AdamHyper{c.actor_lr};
  o.clip_norm = c.clip_norm;
  o.kv_batch = c.batch;
  o.kv_capacity = c.prompt_len + static_cast<std::size_t>(c.gen_len);
  return o;
}

}  // namespace

PpoTrainer::PpoTrainer(const TransformerModel& sft_actor, const TransformerModel& reward,
                       PPOConfig config, std::vector<UnifiedRecord> pretrain)
    : config_((config.validate(), config)),
      models_(RlhfModels::from(sft_actor, reward, config.enable_ema)),
      engine_(models_.actor, engine_options(config)),
      critic_opt_(models_.critic, config.world, AdamHyper{config.critic_lr}, config.clip_norm),
      pretrain_(std::move(pretrain)) {
  if (config_.ptx_coef > 0.0f && pretrain_.empty()) {
    throw ConfigError("mixture coefficient > 0 but no pretraining corpus is configured");
  }
  const auto need = config_.prompt_len + static_cast<std::size_t>(config_.gen_len);
  if (need > static_cast<std::size_t>(sft_actor.config().max_seq_len) ||
      need > static_cast<std::size_t>(reward.config().max_seq_len)) {
    throw ConfigError("prompt_len + gen_len = " + std::to_string(need) +
                      " exceeds a model's max_seq_len");
  }
}

std::vector<std::vector<int>> PpoTrainer::encode_prompts(
    const std::vector<UnifiedRecord>& records) const {
  const auto b = make_batch(records, config_.prompt_len, BatchPurpose::Prompt).primary;
  std::vector<std::vector<int>> out;
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto row = b.row(r).first(b.length(r));
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

Experience PpoTrainer::generate_experience(const std::vector<std::vector<int>>& prompts) {
  engine_.switch_mode(EngineMode::Infer);
  return dsc::generate_experience(prompts, engine_, models_, config_, iteration_);
}

TrainLosses PpoTrainer::train_rlhf(const Experience& exp) {
  engine_.switch_mode(EngineMode::Train);
  std::optional<Batch> ptx;
  if (config_.ptx_coef > 0.0f) {
    std::vector<UnifiedRecord> docs;
    for (std::size_t k = 0; k < config_.batch; ++k) {
      docs.push_back(pretrain_[(iteration_ * config_.batch + k) % pretrain_.size()]);
    }
    ptx = make_batch(docs, config_.prompt_len + static_cast<std::size_t>(config_.gen_len),
                     BatchPurpose::Pretrain).primary;
  }
  auto losses = dsc::train_rlhf(exp, engine_, critic_opt_, models_, config_, ptx ? &*ptx : nullptr);
  ++iteration_;
  return losses;
}

PPOMetrics PpoTrainer::step(const std::vector<UnifiedRecord>& prompt_records) {
  return step_tokens(encode_prompts(prompt_records));
}

PPOMetrics PpoTrainer::step_tokens(const std::vector<std::vector<int>>& prompts) {
  const auto exp = generate_experience(prompts);
  PPOMetrics m;
  m.iter = iteration_;
  double rm = 0.0, kl = 0.0, tokens = 0.0;
  for (float s : exp.rm_scores) rm += s;
  for (std::size_t k = 0; k < exp.mask.size(); ++k) {
    if (exp.mask[k] > 0.0f) {
      kl += exp.actor_logprobs[k] - exp.ref_logprobs[k];
      tokens += 1.0;
    }
  }
  m.mean_rm_score = rm / static_cast<double>(exp.batch);
  m.mean_kl = tokens > 0.0 ? kl / tokens : 0.0;
  const auto losses = train_rlhf(exp);
  m.actor_loss = losses.actor_loss;
  m.critic_loss = losses.critic_loss;
  m.ema_delta = losses.ema_delta;
  history_.push_back(m);
  return m;
}

std::vector<PPOMetrics> run_ppo(PpoTrainer& trainer, const std::vector<UnifiedRecord>& prompts,
                                std::size_t iterations, std::uint64_t seed) {
  if (prompts.empty()) throw EmptyDatasetError("stage-3 split is empty");
  const auto order = seeded_permutation(prompts.size(), seed ^ 0x3A9Du);
  std::vector<PPOMetrics> out;
  std::size_t at = 0;
  const std::size_t batch = trainer.config().batch;
  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<UnifiedRecord> chunk;
    for (std::size_t k = 0; k < batch; ++k, ++at) chunk.push_back(prompts[order[at % order.size()]]);
    out.push_back(trainer.step(chunk));
  }
  return out;
}

}  // namespace dsc
