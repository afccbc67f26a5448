// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsc/data.hpp"
#include "dsc/model.hpp"
#include "dsc/sft.hpp"

// Step 2: scalar reward model trained on preference pairs.
namespace dsc {

struct RMConfig {
  int epochs = 1;
  std::size_t batch_size = 8;
  float lr = 5e-4f;
  std::size_t max_len = 128;
  std::uint64_t seed = 1234;
  double eval_fraction = 0.1;
  float clip_norm = 1.0f;
  int world = 1;
  /// Average the ranking loss over every position after the responses
  /// diverge instead of reading the last token only.
  bool all_positions = false;
  std::string checkpoint_path;

  void validate() const;
};

/// mean(-log sigmoid(chosen - rejected)).
Tensor pairwise_loss(const Tensor& chosen, const Tensor& rejected);
double pairwise_loss(std::span<const double> chosen, std::span<const double> rejected);

/// Fraction of pairs with score(chosen) > score(rejected); ties count 0.5.
double eval_rm_accuracy(const std::vector<UnifiedRecord>& pairs, const TransformerModel& model,
                        std::size_t max_len);

struct AccuracyPoint {
  int epoch = 0;
  std::size_t step = 0;
  double accuracy = 0.0;
};

struct RMResult {
  std::vector<LossPoint> losses;
  std::vector<AccuracyPoint> accuracy;  // epoch 0 is the untrained model
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
};

/// Throws SchemaError when any record lacks a preference pair.
RMResult train_rm(const RMConfig& config, const std::vector<UnifiedRecord>& pairs,
                  TransformerModel& model);

/// "epoch,step,accuracy" rows with a header line.
std::string accuracy_csv(const std::vector<AccuracyPoint>& curve);

}  // namespace dsc
