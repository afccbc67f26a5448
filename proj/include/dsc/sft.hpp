// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsc/data.hpp"
#include "dsc/hybrid_engine.hpp"
#include "dsc/model.hpp"

// Step 1: supervised fine-tuning on prompt + chosen response.
namespace dsc {

struct SFTConfig {
  int epochs = 1;
  std::size_t batch_size = 8;
  float lr = 1e-3f;
  std::size_t max_len = 128;
  std::uint64_t seed = 1234;
  double eval_fraction = 0.1;
  bool response_only = false;
  float clip_norm = 1.0f;
  int warmup_steps = 0;
  int world = 1;
  std::string checkpoint_path;  // empty = do not write

  void validate() const;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

/// Mean next-token cross-entropy over loss_mask positions of the batch.
/// Throws ContractError on an empty batch.
Tensor sft_loss(const TransformerModel& model, const Batch& batch);

/// Row `r`'s share of sft_loss: its masked CE sum divided by the batch's
/// total target count. Rows are trimmed to their real length first.
Tensor sft_row_loss(const TransformerModel& model, const Batch& batch, std::size_t r,
                    double normalizer);
double batch_target_count(const Batch& batch);

/// Token-weighted mean loss over records, evaluated without a graph.
double eval_sft_loss(const TransformerModel& model, const std::vector<UnifiedRecord>& records,
                     std::size_t max_len, std::size_t batch_size = 16, bool response_only = false);

/// Holds out eval_fraction of the records (seeded) and returns {train, eval}.
std::pair<std::vector<UnifiedRecord>, std::vector<UnifiedRecord>> holdout_split(
    const std::vector<UnifiedRecord>& records, double eval_fraction, std::uint64_t seed);

struct SFTResult {
  std::vector<LossPoint> curve;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  std::size_t train_records = 0;
  std::size_t eval_records = 0;
};

/// Throws EmptyDatasetError on an empty split and NumericError on divergence.
SFTResult train_sft(const SFTConfig& config, const std::vector<UnifiedRecord>& records,
                    TransformerModel& model);

/// "step,loss" rows with a header line.
std::string loss_curve_csv(const std::vector<LossPoint>& curve);

}  // namespace dsc
