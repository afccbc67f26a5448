// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dsc/model.hpp"

// Inference path: a tensor-parallel weight layout plus KV-cached incremental
// decoding. Layout tp=1 is the plain single-worker model.
namespace dsc {

/// One worker's column/row slices of the attention and MLP weights.
struct TpShard {
  struct Layer {
    std::vector<float> wq, bq, wk, bk, wv, bv;  // [d, heads*d_head] column slices
    std::vector<float> wo;                      // [heads*d_head, d] row slice
    std::vector<float> wfc, bfc;                // [d, ff_width] column slice
    std::vector<float> wproj;                   // [ff_width, d] row slice
  };
  int head_begin = 0;
  int n_heads = 0;
  int ff_begin = 0;
  int ff_width = 0;
  std::vector<Layer> layers;

  std::size_t bytes() const;
};

/// Weights arranged for tensor-parallel inference. Embeddings, norms, the
/// head and the row-parallel biases are replicated on every worker.
struct InferenceLayout {
  ModelConfig config;
  int tp = 1;
  std::vector<float> wte, wpe, lnf_g, lnf_b, head_w, head_b;
  struct Replicated {
    std::vector<float> ln1_g, ln1_b, ln2_g, ln2_b, bo, bproj;
  };
  std::vector<Replicated> layers;
  std::vector<TpShard> workers;

  /// Bytes resident on worker w (its shard plus every replicated tensor).
  std::size_t worker_bytes(int w) const;
  std::size_t replicated_bytes() const;
};

/// Splits heads and MLP columns across tp workers. Throws ConfigError unless
/// tp divides both n_heads and d_ff.
InferenceLayout build_inference_layout(const TransformerModel& model, int tp);

/// Per-layer key/value blocks [layer][batch][head][capacity][d_head] with a
/// fill length per sequence.
class KVCache {
 public:
  KVCache() = default;
  KVCache(const ModelConfig& config, std::size_t batch, std::size_t capacity);

  std::size_t batch() const { return batch_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t fill(std::size_t seq) const { return fill_.at(seq); }
  void reset();
  std::size_t bytes() const;

  float* key(std::size_t layer, std::size_t seq, std::size_t head, std::size_t pos);
  float* value(std::size_t layer, std::size_t seq, std::size_t head, std::size_t pos);

 private:
  friend std::vector<float> extend(const InferenceLayout&, KVCache&, std::size_t,
                                   std::span<const int>);
  std::size_t offset(std::size_t seq, std::size_t head, std::size_t pos) const;

  std::size_t layers_ = 0, batch_ = 0, heads_ = 0, capacity_ = 0, d_head_ = 0;
  std::vector<std::vector<float>> keys_, values_;
  std::vector<std::size_t> fill_;
};

/// Appends tokens to sequence `seq` of the cache and returns the head output
/// for each appended position: [n][V] logits or [n] scalars, row-major.
/// Cross-worker partial sums are reduced in worker order 0..tp-1.
std::vector<float> extend(const InferenceLayout& layout, KVCache& cache, std::size_t seq,
                          std::span<const int> tokens);

/// Feeds a prompt (must start with BOS) into an empty slot of the cache and
/// returns the last position's output.
std::vector<float> prefill(const InferenceLayout& layout, KVCache& cache, std::size_t seq,
                           std::span<const int> prompt);

/// One decoding step for every sequence: next_tokens[b] is appended to
/// sequence b. Returns logits [batch][V].
std::vector<float> forward_incremental(const InferenceLayout& layout, KVCache& cache,
                                       std::span<const int> next_tokens);
std::vector<float> forward_incremental(const TransformerModel& model, KVCache& cache,
                                       std::span<const int> next_tokens);

/// Full-sequence logits [batch][len][V] computed through the layout.
std::vector<float> layout_forward(const InferenceLayout& layout, std::span<const int> tokens,
                                  std::size_t batch, std::size_t len);

struct GenerationStrategy {
  enum class Kind { Greedy, TopK };
  Kind kind = Kind::Greedy;
  int top_k = 50;
  float temperature = 1.0f;
  std::uint64_t seed = 0;

  static GenerationStrategy greedy() { return {}; }
  static GenerationStrategy sample_top_k(int k, std::uint64_t seed, float temperature = 1.0f) {
    return {Kind::TopK, k, temperature, seed};
  }
};

struct Generation {
  std::vector<int> tokens;      // includes the EOS when one was produced
  std::vector<float> logprobs;  // log-softmax of each chosen token
  bool hit_eos = false;
};

/// Stops at EOS or after max_new tokens. Sequence i of a batch draws from its
/// own generator derived from (seed, i), so batching never changes results.
std::vector<Generation> generate_batch(const InferenceLayout& layout,
                                       const std::vector<std::vector<int>>& prompts, int max_new,
                                       const GenerationStrategy& strategy);
Generation generate(const InferenceLayout& layout, std::span<const int> prompt, int max_new,
                    const GenerationStrategy& strategy);
Generation generate(const TransformerModel& model, std::span<const int> prompt, int max_new,
                    const GenerationStrategy& strategy);

/// Picks the next token from logits; exposed for tests.
int pick_token(std::span<const float> logits, const GenerationStrategy& strategy,
               std::mt19937_64& rng);

/// log_softmax(logits)[token] in double precision.
double token_logprob(std::span<const float> logits, int token);

}  // namespace dsc
