// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dsc/data.hpp"
#include "dsc/hybrid_engine.hpp"
#include "dsc/model.hpp"

// Step 3: PPO over actor, frozen reference, critic and frozen reward model.
namespace dsc {

struct PPOConfig {
  float beta = 0.1f;        // KL penalty coefficient
  double gamma = 1.0;
  double lambda = 0.95;
  float clip_eps = 0.2f;
  float value_clip = 0.2f;
  int ppo_epochs = 1;
  float ptx_coef = 0.0f;    // pretraining mixture weight, 0 = off
  bool enable_ema = true;
  float ema_decay = 0.995f;
  float reward_clip = 5.0f;
  std::size_t prompt_len = 32;  // P; longer prompts keep their most recent tokens
  int gen_len = 16;             // G
  std::size_t batch = 8;        // query-answer pairs per iteration
  std::uint64_t seed = 1234;
  float actor_lr = 1e-4f;
  float critic_lr = 1e-4f;
  float clip_norm = 1.0f;
  int top_k = 50;
  float temperature = 1.0f;
  int world = 1;
  int tp = 1;

  void validate() const;
};

/// One batch of rollouts. Per-token arrays are [batch][gen_len] row-major and
/// zero past each sequence's end; token t of row i sits at position
/// prompt_lengths[i] + t of the full sequence.
struct Experience {
  std::size_t batch = 0;
  std::size_t prompt_width = 0;  // padded width of `prompts`
  std::size_t gen_len = 0;
  std::vector<int> prompts;        // [batch][prompt_width], right-padded
  std::vector<std::size_t> prompt_lengths;
  std::vector<int> generated;      // [batch][gen_len], PAD after the end
  std::vector<float> mask;         // 1 for generated tokens up to and including EOS
  std::vector<float> actor_logprobs, ref_logprobs, values, rewards, advantages, returns;
  std::vector<float> rm_scores;    // [batch]

  std::size_t length(std::size_t i) const;  // generated tokens in row i
  std::vector<int> sequence(std::size_t i) const;  // prompt + generated, unpadded
};

/// r_t = -beta * (actor_lp_t - ref_lp_t) on the first `length` tokens, plus
/// clip(rm_score, +-reward_clip) on token length-1. Zero beyond `length`.
std::vector<float> compute_rewards(std::span<const float> actor_lp, std::span<const float> ref_lp,
                                   float rm_score, const PPOConfig& config, std::size_t length);

/// GAE with a zero terminal bootstrap, computed in double.
std::pair<std::vector<double>, std::vector<double>> gae(std::span<const double> rewards,
                                                        std::span<const double> values,
                                                        double gamma, double lambda);

/// Mean 0 / std 1 over entries with mask > 0; left untouched when fewer than
/// two entries are selected.
void whiten(std::span<float> values, std::span<const float> mask);

/// mean(-min(rho * A, clip(rho, 1-eps, 1+eps) * A)), rho = exp(new - old).
Tensor ppo_actor_loss(const Tensor& new_lp, const Tensor& old_lp, const Tensor& advantages,
                      float eps);
/// mean(0.5 * max((v - R)^2, (clip(v, v_old +- c) - R)^2)).
Tensor critic_loss(const Tensor& values, const Tensor& old_values, const Tensor& returns,
                   float value_clip);
/// ppo_loss + coef * next-token CE of the actor on the pretraining batch.
/// Throws ConfigError when coef > 0 and no batch is given.
Tensor ptx_mixture_loss(const Tensor& ppo_loss, const Batch* pretrain, float coef,
                        const TransformerModel& actor);

/// ema <- decay * ema + (1 - decay) * actor. Returns the L2 norm of the change.
double ema_update(TransformerModel& ema, const TransformerModel& actor, float decay);

struct RlhfModels {
  TransformerModel actor;
  TransformerModel reference;
  TransformerModel critic;
  TransformerModel reward;
  std::optional<TransformerModel> ema;

  /// Reference and EMA start as copies of the actor, the critic as a copy of
  /// the reward model.
  static RlhfModels from(const TransformerModel& sft_actor, const TransformerModel& reward,
                         bool with_ema);
};

/// Rolls out prompts through the engine (INFER mode required, else
/// ModeError) and scores them with every role.
Experience generate_experience(const std::vector<std::vector<int>>& prompts, HybridEngine& engine,
                               const RlhfModels& models, const PPOConfig& config,
                               std::uint64_t iteration);

struct TrainLosses {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double ema_delta = 0.0;
};

/// PPO epochs over the experience (TRAIN mode required, else ModeError):
/// actor step with optional mixture loss, critic step, EMA update.
TrainLosses train_rlhf(const Experience& exp, HybridEngine& engine, ZeroOptimizer& critic_opt,
                       RlhfModels& models, const PPOConfig& config,
                       const Batch* pretrain = nullptr);

struct PPOMetrics {
  std::size_t iter = 0;
  double mean_rm_score = 0.0;
  double mean_kl = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double ema_delta = 0.0;
};

std::string metrics_csv(const std::vector<PPOMetrics>& rows);

/// The two-call API: generate_experience then train_rlhf, with the engine
/// mode switches done for the caller.
class PpoTrainer {
 public:
  PpoTrainer(const TransformerModel& sft_actor, const TransformerModel& reward, PPOConfig config,
             std::vector<UnifiedRecord> pretrain = {});
  // The engine and critic optimizer point into models_.
  PpoTrainer(const PpoTrainer&) = delete;
  PpoTrainer& operator=(const PpoTrainer&) = delete;

  Experience generate_experience(const std::vector<std::vector<int>>& prompts);
  TrainLosses train_rlhf(const Experience& exp);
  /// Both calls plus metrics for one batch of prompt records.
  PPOMetrics step(const std::vector<UnifiedRecord>& prompt_records);
  /// Same as step() for already tokenized prompts.
  PPOMetrics step_tokens(const std::vector<std::vector<int>>& prompts);

  RlhfModels& models() { return models_; }
  HybridEngine& engine() { return engine_; }
  const PPOConfig& config() const { return config_; }
  const std::vector<PPOMetrics>& history() const { return history_; }

  /// BOS + prompt bytes, left-truncated to prompt_len.
  std::vector<std::vector<int>> encode_prompts(const std::vector<UnifiedRecord>& records) const;

 private:
  PPOConfig config_;
  RlhfModels models_;
  HybridEngine engine_;
  ZeroOptimizer critic_opt_;
  std::vector<UnifiedRecord> pretrain_;
  std::uint64_t iteration_ = 0;
  std::vector<PPOMetrics> history_;
};

/// Runs `iterations` PPO steps cycling through the prompt records in seeded
/// order, batch records at a time.
std::vector<PPOMetrics> run_ppo(PpoTrainer& trainer, const std::vector<UnifiedRecord>& prompts,
                                std::size_t iterations, std::uint64_t seed);

}  // namespace dsc
