// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/sft.hpp"

#include <cmath>
#include <sstream>

#include "dsc/checkpoint.hpp"
#include "dsc/error.hpp"
#include "dsc/io.hpp"
#include "dsc/ops.hpp"

namespace dsc {

namespace {

// CE of row r over its target positions, as a weighted sum / normalizer.
Tensor row_ce(const TransformerModel& model, const Batch& batch, std::size_t r, double normalizer) {
  const std::size_t len = batch.length(r);
  if (len < 2) return Tensor::scalar(0.0f);
  const auto row = batch.row(r).first(len);
  Tensor logits = forward_full(model, row, 1, len);
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  Tensor head = reshape(slice(logits, 1, 0, len - 1), {len - 1, V});
  std::vector<float> w(batch.loss_mask.begin() + static_cast<std::ptrdiff_t>(r * batch.cols + 1),
                       batch.loss_mask.begin() + static_cast<std::ptrdiff_t>(r * batch.cols + len));
  return cross_entropy(head, row.subspan(1), w, normalizer);
}

}  // namespace

void SFTConfig::validate() const {
  if (epochs < 1) throw ConfigError("sft epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("sft batch size must be >= 1");
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) throw ConfigError("eval fraction must be in [0,1)");
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
  if (world < 1) throw ConfigError("world size must be >= 1");
}

double batch_target_count(const Batch& batch) {
  double n = 0.0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    for (std::size_t t = 1; t < batch.cols; ++t) n += batch.loss_mask[r * batch.cols + t];
  }
  return n;
}

Tensor sft_row_loss(const TransformerModel& model, const Batch& batch, std::size_t r,
                    double normalizer) {
  return row_ce(model, batch, r, normalizer);
}

Tensor sft_loss(const TransformerModel& model, const Batch& batch) {
  if (batch.rows == 0) throw ContractError("sft_loss on an empty batch");
  const double n = batch_target_count(batch);
  if (n <= 0.0) throw ContractError("sft_loss batch has no target tokens");
  Tensor total;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    if (batch.length(r) < 2) continue;
    Tensor l = row_ce(model, batch, r, n);
    total = total.defined() ? add(total, l) : l;
  }
  return total;
}

double eval_sft_loss(const TransformerModel& model, const std::vector<UnifiedRecord>& records,
                     std::size_t max_len, std::size_t batch_size, bool response_only) {
  NoGradGuard guard;
  double sum = 0.0, count = 0.0;
  for (std::size_t at = 0; at < records.size(); at += batch_size) {
    const std::size_t n = std::min(batch_size, records.size() - at);
    const auto b = make_batch(std::span(records).subspan(at, n), max_len, BatchPurpose::SFT,
                              response_only).primary;
    for (std::size_t r = 0; r < b.rows; ++r) sum += row_ce(model, b, r, 1.0).item();
    count += batch_target_count(b);
  }
  if (count <= 0.0) throw EmptyDatasetError("no target tokens to evaluate");
  return sum / count;
}

std::pair<std::vector<UnifiedRecord>, std::vector<UnifiedRecord>> holdout_split(
    const std::vector<UnifiedRecord>& records, double eval_fraction, std::uint64_t seed) {
  std::size_t n_eval = static_cast<std::size_t>(std::llround(eval_fraction * records.size()));
  if (eval_fraction > 0.0 && n_eval == 0 && records.size() >= 2) n_eval = 1;
  if (n_eval >= records.size()) n_eval = records.size() > 0 ? records.size() - 1 : 0;
  const auto perm = seeded_permutation(records.size(), seed ^ 0xE7A1u);
  std::pair<std::vector<UnifiedRecord>, std::vector<UnifiedRecord>> out;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    (i < records.size() - n_eval ? out.first : out.second).push_back(records[perm[i]]);
  }
  return out;
}

SFTResult train_sft(const SFTConfig& config, const std::vector<UnifiedRecord>& records,
                    TransformerModel& model) {
  config.validate();
  if (records.empty()) throw EmptyDatasetError("stage-1 split is empty");
  if (model.config().head != HeadKind::LM) throw HeadKindError("SFT needs an LM-head model");
  for (const auto& r : records) {
    if (!r.chosen) throw SchemaError("SFT record from " + r.source + " has no chosen response");
  }
  auto [train, eval] = holdout_split(records, config.eval_fraction, config.seed);
  const auto& eval_set = eval.empty() ? train : eval;

  SFTResult res;
  res.train_records = train.size();
  res.eval_records = eval.size();
  res.initial_eval_loss = eval_sft_loss(model, eval_set, config.max_len, 16, config.response_only);

  ZeroOptimizer opt(model, config.world, AdamHyper{config.lr}, config.clip_norm);
  std::size_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = seeded_permutation(train.size(), config.seed + 7919u * (epoch + 1));
    for (std::size_t at = 0; at < order.size(); at += config.batch_size) {
      std::vector<UnifiedRecord> chunk;
      for (std::size_t k = at; k < std::min(order.size(), at + config.batch_size); ++k) {
        chunk.push_back(train[order[k]]);
      }
      const Batch b =
          make_batch(chunk, config.max_len, BatchPurpose::SFT, config.response_only).primary;
      const double n = batch_target_count(b);
      if (n <= 0.0) continue;
      if (config.warmup_steps > 0) {
        opt.set_lr(config.lr * std::min(1.0f, static_cast<float>(step + 1) / config.warmup_steps));
      }
      StepStats st;
      try {
        st = opt.step(b.rows, [&](const TransformerModel& m, std::size_t r) {
          return row_ce(m, b, r, n);
        });
      } catch (const NumericError& e) {
        throw NumericError("SFT diverged at step " + std::to_string(step) + ": " + e.what());
      }
      res.curve.push_back({step++, st.loss});
    }
  }
  res.final_eval_loss = eval_sft_loss(model, eval_set, config.max_len, 16, config.response_only);
  if (!config.checkpoint_path.empty()) save_checkpoint(model, config.checkpoint_path);
  return res;
}

std::string loss_curve_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream out;
  out << "step,loss\n";
  for (const auto& p : curve) out << p.step << ',' << fmt_num(p.loss) << '\n';
  return out.str();
}

}  // namespace dsc
