// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dsc/adam.hpp"
#include "dsc/inference.hpp"
#include "dsc/model.hpp"

// Logical workers executed in-process. Training keeps ZeRO shards of the
// parameters, gradients and Adam moments; inference gathers a tensor-parallel
// layout and a KV cache. Every cross-worker combination runs in a fixed order.
namespace dsc {

enum class EngineMode { Train, Infer };
std::string_view to_string(EngineMode mode);

enum class MemCategory { Params = 0, Grads, Optimizer, KvCache, Activations };
inline constexpr std::size_t kMemCategories = 5;
std::string_view to_string(MemCategory c);

struct ShardRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

/// Contiguous split of every flattened parameter over `world` workers. The
/// first len % world workers get one extra element.
struct ShardTable {
  int world = 1;
  std::vector<std::string> names;
  std::vector<std::size_t> lengths;
  std::vector<std::vector<ShardRange>> ranges;  // [param][worker]

  std::size_t worker_elements(int w) const;
  std::size_t total_elements() const;
};

ShardTable make_shard_table(const std::vector<std::string>& names,
                            const std::vector<std::size_t>& lengths, int world);

/// Per-worker buffers laid out like a ShardTable: data[worker][param].
struct ZeroShards {
  ShardTable table;
  std::vector<std::vector<std::vector<float>>> data;
};

ZeroShards partition_zero(const std::vector<std::string>& names,
                          const std::vector<std::vector<float>>& values, int world);
ZeroShards partition_zero(const TransformerModel& model, int world);

/// Reassembles full tensors. Throws IntegrityError on a missing worker or a
/// shard whose length disagrees with the table.
std::vector<std::vector<float>> gather_full(const ZeroShards& shards);

/// Byte accounting per worker and category with an alloc/free event log.
class MemoryLedger {
 public:
  struct Event {
    int worker;
    MemCategory category;
    std::int64_t delta;
    std::string what;
  };

  explicit MemoryLedger(int workers = 1, std::uint64_t budget_per_worker = 0);

  /// Throws BudgetError naming the category when the worker would exceed its
  /// budget (0 = unlimited); nothing is recorded in that case.
  void alloc(int worker, MemCategory c, std::uint64_t bytes, std::string what);
  /// Throws ContractError when freeing more than is held.
  void free(int worker, MemCategory c, std::uint64_t bytes, std::string what);

  int workers() const { return static_cast<int>(bytes_.size()); }
  std::uint64_t budget() const { return budget_; }
  std::uint64_t bytes(int worker, MemCategory c) const;
  std::uint64_t worker_total(int worker) const;
  std::uint64_t total(MemCategory c) const;
  const std::vector<Event>& events() const { return events_; }
  /// Replays the event log and compares with the current balances.
  bool conserved() const;

 private:
  std::uint64_t budget_ = 0;
  std::vector<std::array<std::uint64_t, kMemCategories>> bytes_;
  std::vector<Event> events_;
};

/// Loss of one training sample, built on the gathered model. The step
/// gradient is the sum of the per-sample gradients, so callers fold any batch
/// normalization into each sample's loss.
using SampleLoss = std::function<Tensor(const TransformerModel&, std::size_t sample)>;

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

/// ZeRO-sharded Adam over a model. Samples are spread over workers in
/// contiguous blocks; gradients are reduced in global sample order so results
/// are byte-identical for every world size.
class ZeroOptimizer {
 public:
  ZeroOptimizer(TransformerModel& model, int world, AdamHyper hyper, float clip_norm = 1.0f);

  StepStats step(std::size_t samples, const SampleLoss& loss);

  int world() const { return world_; }
  const AdamHyper& hyper() const { return hyper_; }
  void set_lr(float lr) { hyper_.lr = lr; }
  std::uint64_t steps() const { return step_; }
  const ZeroShards& params() const { return params_; }
  const ZeroShards& exp_avg() const { return m_; }
  const ZeroShards& exp_avg_sq() const { return v_; }
  const ZeroShards& grads() const { return grads_; }
  TransformerModel& model() { return *model_; }

  /// Shard element counts per worker, in bytes of float32.
  std::uint64_t param_bytes(int worker) const;

  /// Replaces the master shards from the model's current values.
  void reload_from_model();

 private:
  void sync_model();

  TransformerModel* model_;
  int world_;
  AdamHyper hyper_;
  float clip_norm_;
  std::uint64_t step_ = 0;
  ZeroShards params_, grads_, m_, v_;
};

struct EngineOptions {
  int world = 1;
  int tp = 1;
  AdamHyper hyper{};
  float clip_norm = 1.0f;
  std::uint64_t memory_budget = 0;  // bytes per worker, 0 = unlimited
  std::size_t kv_batch = 1;
  std::size_t kv_capacity = 0;  // 0 = the model's max_seq_len
};

struct MemoryReport {
  EngineMode mode = EngineMode::Train;
  std::vector<std::array<std::uint64_t, kMemCategories>> per_worker;
  std::array<std::uint64_t, kMemCategories> total{};

  std::uint64_t get(MemCategory c) const { return total[static_cast<std::size_t>(c)]; }
  /// Rows "mode,category,bytes" with a header line.
  std::string to_csv() const;
};

/// Owns the actor's training shards and switches it between TRAIN and INFER.
class HybridEngine {
 public:
  HybridEngine(TransformerModel& model, EngineOptions options);

  EngineMode mode() const { return mode_; }
  const EngineOptions& options() const { return options_; }

  /// Idempotent. TRAIN->INFER releases gradient and optimizer accounting,
  /// builds the TP layout and allocates the KV cache. INFER->TRAIN frees both.
  void switch_mode(EngineMode target);

  /// Throws ModeError unless in TRAIN mode.
  StepStats train_step(std::size_t samples, const SampleLoss& loss);
  /// Throws ModeError unless in INFER mode.
  const InferenceLayout& layout() const;
  std::vector<float> tp_forward(std::span<const int> tokens, std::size_t batch, std::size_t len) const;
  std::vector<Generation> generate(const std::vector<std::vector<int>>& prompts, int max_new,
                                   const GenerationStrategy& strategy) const;

  MemoryReport memory_report() const;
  const MemoryLedger& ledger() const { return ledger_; }
  ZeroOptimizer& optimizer() { return optimizer_; }
  const ZeroOptimizer& optimizer() const { return optimizer_; }
  TransformerModel& model() { return *model_; }

  /// Expected KV bytes: 2 * layers * heads * d_head * capacity * batch * 4.
  std::uint64_t kv_bytes() const;

 private:
  void require(EngineMode m, std::string_view what) const;
  std::size_t kv_capacity() const;

  TransformerModel* model_;
  EngineOptions options_;
  ZeroOptimizer optimizer_;
  MemoryLedger ledger_;
  EngineMode mode_ = EngineMode::Train;
  std::optional<InferenceLayout> layout_;
};

/// Per-worker bytes attributed to each TP-group member for `total` split by
/// heads, with sequences spread over world/tp data-parallel groups.
std::vector<std::uint64_t> split_kv_bytes(const ModelConfig& config, std::size_t batch,
                                          std::size_t capacity, int world, int tp);

}  // namespace dsc
