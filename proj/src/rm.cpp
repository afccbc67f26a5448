// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/rm.hpp"

#include <cmath>
#include <sstream>

#include "dsc/checkpoint.hpp"
#include "dsc/error.hpp"
#include "dsc/hybrid_engine.hpp"
#include "dsc/io.hpp"
#include "dsc/ops.hpp"

namespace dsc {

namespace {

std::vector<int> trimmed(const Batch& b, std::size_t r) {
  const auto row = b.row(r).first(b.length(r));
  return {row.begin(), row.end()};
}

// -log sigmoid(c - r) summed over positions where the two responses differ,
// each side clamped to its own last token, divided by the position count.
Tensor all_positions_loss(const TransformerModel& m, const std::vector<int>& c,
                          const std::vector<int>& r) {
  std::size_t div = 0;
  while (div < c.size() && div < r.size() && c[div] == r[div]) ++div;
  const std::size_t end = std::max(c.size(), r.size());
  if (div >= end) div = end - 1;
  Tensor vc = forward_full(m, c, 1, c.size());
  Tensor vr = forward_full(m, r, 1, r.size());
  std::vector<Tensor> terms;
  for (std::size_t t = div; t < end; ++t) {
    const std::size_t ic = std::min(t, c.size() - 1), ir = std::min(t, r.size() - 1);
    terms.push_back(sub(slice(vc, 1, ic, ic + 1), slice(vr, 1, ir, ir + 1)));
  }
  Tensor d = concat(terms, 1);
  return scale(mean(log_sigmoid(d)), -1.0f);
}

}  // namespace

void RMConfig::validate() const {
  if (epochs < 1) throw ConfigError("rm epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("rm batch size must be >= 1");
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) throw ConfigError("eval fraction must be in [0,1)");
  if (world < 1) throw ConfigError("world size must be >= 1");
}

Tensor pairwise_loss(const Tensor& chosen, const Tensor& rejected) {
  return scale(mean(log_sigmoid(sub(chosen, rejected))), -1.0f);
}

double pairwise_loss(std::span<const double> chosen, std::span<const double> rejected) {
  if (chosen.size() != rejected.size()) throw DimensionError("pairwise_loss length mismatch");
  if (chosen.empty()) throw ContractError("pairwise_loss of an empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const double d = chosen[i] - rejected[i];
    // -log sigmoid(d) = log1p(exp(-d)), evaluated stably on both sides.
    total += d > 0 ? std::log1p(std::exp(-d)) : -d + std::log1p(std::exp(d));
  }
  return total / static_cast<double>(chosen.size());
}

double eval_rm_accuracy(const std::vector<UnifiedRecord>& pairs, const TransformerModel& model,
                        std::size_t max_len) {
  require_pairwise(pairs);
  if (pairs.empty()) throw EmptyDatasetError("no pairs to evaluate");
  const auto set = make_batch(pairs, max_len, BatchPurpose::Pairwise);
  double hits = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const float c = scalar_score(model, set.primary.row(i));
    const float r = scalar_score(model, set.rejected->row(i));
    hits += c > r ? 1.0 : (c == r ? 0.5 : 0.0);
  }
  return hits / static_cast<double>(pairs.size());
}

RMResult train_rm(const RMConfig& config, const std::vector<UnifiedRecord>& pairs,
                  TransformerModel& model) {
  config.validate();
  if (pairs.empty()) throw EmptyDatasetError("stage-2 split is empty");
  require_pairwise(pairs);
  if (model.config().head != HeadKind::Scalar) throw HeadKindError("reward model needs a scalar head");
  auto [train, eval] = holdout_split(pairs, config.eval_fraction, config.seed);
  const auto& eval_set = eval.empty() ? train : eval;

  RMResult res;
  res.initial_accuracy = eval_rm_accuracy(eval_set, model, config.max_len);
  res.accuracy.push_back({0, 0, res.initial_accuracy});

  ZeroOptimizer opt(model, config.world, AdamHyper{config.lr}, config.clip_norm);
  std::size_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = seeded_permutation(train.size(), config.seed + 104729u * (epoch + 1));
    for (std::size_t at = 0; at < order.size(); at += config.batch_size) {
      std::vector<UnifiedRecord> chunk;
      for (std::size_t k = at; k < std::min(order.size(), at + config.batch_size); ++k) {
        chunk.push_back(train[order[k]]);
      }
      const auto set = make_batch(chunk, config.max_len, BatchPurpose::Pairwise);
      const float inv = 1.0f / static_cast<float>(chunk.size());
      StepStats st;
      try {
        st = opt.step(chunk.size(), [&](const TransformerModel& m, std::size_t i) {
          const auto c = trimmed(set.primary, i);
          const auto r = trimmed(*set.rejected, i);
          if (config.all_positions) return scale(all_positions_loss(m, c, r), inv);
          return scale(pairwise_loss(scalar_score_tensor(m, c), scalar_score_tensor(m, r)), inv);
        });
      } catch (const NumericError& e) {
        throw NumericError("RM diverged at step " + std::to_string(step) + ": " + e.what());
      }
      res.losses.push_back({step++, st.loss});
    }
    res.accuracy.push_back({epoch + 1, step, eval_rm_accuracy(eval_set, model, config.max_len)});
  }
  res.final_accuracy = res.accuracy.back().accuracy;
  if (!config.checkpoint_path.empty()) save_checkpoint(model, config.checkpoint_path);
  return res;
}

std::string accuracy_csv(const std::vector<AccuracyPoint>& curve) {
  std::ostringstream out;
  out << "epoch,step,accuracy\n";
  for (const auto& p : curve) out << p.epoch << ',' << p.step << ',' << fmt_num(p.accuracy) << '\n';
  return out.str();
}

}  // namespace dsc
