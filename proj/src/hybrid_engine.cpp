// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/hybrid_engine.hpp"

#include <cmath>
#include <sstream>

#include "dsc/error.hpp"

namespace dsc {

namespace {

constexpr std::uint64_t kF32 = sizeof(float);

std::size_t cat_index(MemCategory c) { return static_cast<std::size_t>(c); }

// Sizes of a balanced split of n items over k parts, larger parts first.
std::vector<std::size_t> balanced(std::size_t n, int k) {
  std::vector<std::size_t> out(static_cast<std::size_t>(k), n / static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n % static_cast<std::size_t>(k); ++i) ++out[i];
  return out;
}

ZeroShards zeros_like(const ShardTable& t) {
  ZeroShards z;
  z.table = t;
  z.data.resize(static_cast<std::size_t>(t.world));
  for (int w = 0; w < t.world; ++w) {
    for (const auto& r : t.ranges) z.data[w].emplace_back(r[w].size(), 0.0f);
  }
  return z;
}

}  // namespace

std::string_view to_string(EngineMode mode) { return mode == EngineMode::Train ? "TRAIN" : "INFER"; }

std::string_view to_string(MemCategory c) {
  switch (c) {
    case MemCategory::Params: return "params";
    case MemCategory::Grads: return "grads";
    case MemCategory::Optimizer: return "optimizer";
    case MemCategory::KvCache: return "kv_cache";
    case MemCategory::Activations: return "activations";
  }
  return "?";
}

std::size_t ShardTable::worker_elements(int w) const {
  std::size_t n = 0;
  for (const auto& r : ranges) n += r[w].size();
  return n;
}

std::size_t ShardTable::total_elements() const {
  std::size_t n = 0;
  for (auto l : lengths) n += l;
  return n;
}

ShardTable make_shard_table(const std::vector<std::string>& names,
                            const std::vector<std::size_t>& lengths, int world) {
  if (world < 1) throw ContractError("world size must be >= 1");
  if (names.size() != lengths.size()) throw ContractError("one name per parameter required");
  ShardTable t;
  t.world = world;
  t.names = names;
  t.lengths = lengths;
  for (auto len : lengths) {
    std::vector<ShardRange> rs;
    std::size_t at = 0;
    for (auto n : balanced(len, world)) {
      rs.push_back({at, at + n});
      at += n;
    }
    t.ranges.push_back(std::move(rs));
  }
  return t;
}

ZeroShards partition_zero(const std::vector<std::string>& names,
                          const std::vector<std::vector<float>>& values, int world) {
  std::vector<std::size_t> lengths;
  for (const auto& v : values) lengths.push_back(v.size());
  ZeroShards z;
  z.table = make_shard_table(names, lengths, world);
  z.data.resize(static_cast<std::size_t>(world));
  for (int w = 0; w < world; ++w) {
    for (std::size_t p = 0; p < values.size(); ++p) {
      const auto r = z.table.ranges[p][w];
      z.data[w].emplace_back(values[p].begin() + static_cast<std::ptrdiff_t>(r.begin),
                             values[p].begin() + static_cast<std::ptrdiff_t>(r.end));
    }
  }
  return z;
}

ZeroShards partition_zero(const TransformerModel& model, int world) {
  return partition_zero(model.param_names(), model.values(), world);
}

std::vector<std::vector<float>> gather_full(const ZeroShards& shards) {
  const auto& t = shards.table;
  if (shards.data.size() != static_cast<std::size_t>(t.world)) {
    throw IntegrityError("expected " + std::to_string(t.world) + " worker shards, found " +
                         std::to_string(shards.data.size()));
  }
  std::vector<std::vector<float>> out(t.lengths.size());
  for (std::size_t p = 0; p < t.lengths.size(); ++p) {
    out[p].resize(t.lengths[p]);
    for (int w = 0; w < t.world; ++w) {
      const auto& wd = shards.data[w];
      const auto r = t.ranges[p][w];
      if (p >= wd.size() || wd[p].size() != r.size()) {
        throw IntegrityError("shard of " + t.names[p] + " on worker " + std::to_string(w) +
                             " is missing or has the wrong length");
      }
      std::copy(wd[p].begin(), wd[p].end(), out[p].begin() + static_cast<std::ptrdiff_t>(r.begin));
    }
  }
  return out;
}

MemoryLedger::MemoryLedger(int workers, std::uint64_t budget_per_worker)
    : budget_(budget_per_worker), bytes_(static_cast<std::size_t>(std::max(workers, 1))) {
  for (auto& b : bytes_) b.fill(0);
}

void MemoryLedger::alloc(int worker, MemCategory c, std::uint64_t bytes, std::string what) {
  auto& row = bytes_.at(static_cast<std::size_t>(worker));
  if (budget_ > 0 && worker_total(worker) + bytes > budget_) {
    throw BudgetError("allocating " + std::to_string(bytes) + " bytes of " +
                      std::string(to_string(c)) + " (" + what + ") on worker " +
                      std::to_string(worker) + " exceeds the budget of " +
                      std::to_string(budget_) + " bytes");
  }
  row[cat_index(c)] += bytes;
  events_.push_back({worker, c, static_cast<std::int64_t>(bytes), std::move(what)});
}

void MemoryLedger::free(int worker, MemCategory c, std::uint64_t bytes, std::string what) {
  auto& row = bytes_.at(static_cast<std::size_t>(worker));
  if (row[cat_index(c)] < bytes) {
    throw ContractError("freeing more " + std::string(to_string(c)) + " than allocated");
  }
  row[cat_index(c)] -= bytes;
  events_.push_back({worker, c, -static_cast<std::int64_t>(bytes), std::move(what)});
}

std::uint64_t MemoryLedger::bytes(int worker, MemCategory c) const {
  return bytes_.at(static_cast<std::size_t>(worker))[cat_index(c)];
}

std::uint64_t MemoryLedger::worker_total(int worker) const {
  std::uint64_t n = 0;
  for (auto b : bytes_.at(static_cast<std::size_t>(worker))) n += b;
  return n;
}

std::uint64_t MemoryLedger::total(MemCategory c) const {
  std::uint64_t n = 0;
  for (const auto& row : bytes_) n += row[cat_index(c)];
  return n;
}

bool MemoryLedger::conserved() const {
  std::vector<std::array<std::int64_t, kMemCategories>> replay(bytes_.size());
  for (auto& r : replay) r.fill(0);
  for (const auto& e : events_) {
    auto& cell = replay[static_cast<std::size_t>(e.worker)][cat_index(e.category)];
    cell += e.delta;
    if (cell < 0) return false;
  }
  for (std::size_t w = 0; w < bytes_.size(); ++w) {
    for (std::size_t c = 0; c < kMemCategories; ++c) {
      if (replay[w][c] != static_cast<std::int64_t>(bytes_[w][c])) return false;
    }
  }
  return true;
}

ZeroOptimizer::ZeroOptimizer(TransformerModel& model, int world, AdamHyper hyper, float clip_norm)
    : model_(&model), world_(world), hyper_(hyper), clip_norm_(clip_norm) {
  if (world < 1) throw ConfigError("world size must be >= 1");
  params_ = partition_zero(model, world);
  grads_ = zeros_like(params_.table);
  m_ = zeros_like(params_.table);
  v_ = zeros_like(params_.table);
}

void ZeroOptimizer::reload_from_model() { params_ = partition_zero(*model_, world_); }

std::uint64_t ZeroOptimizer::param_bytes(int worker) const {
  return params_.table.worker_elements(worker) * kF32;
}

void ZeroOptimizer::sync_model() { model_->assign(gather_full(params_)); }

StepStats ZeroOptimizer::step(std::size_t samples, const SampleLoss& loss) {
  if (samples == 0) throw ContractError("optimizer step over zero samples");
  const auto& table = params_.table;
  const std::size_t n_params = table.lengths.size();
  std::vector<std::size_t> offsets(n_params + 1, 0);
  for (std::size_t p = 0; p < n_params; ++p) offsets[p + 1] = offsets[p] + table.lengths[p];

  // Data-parallel phase: worker w handles a contiguous block of samples.
  std::vector<std::vector<float>> per_sample(samples);
  StepStats stats;
  model_->set_requires_grad(true);
  std::size_t s = 0;
  for (auto count : balanced(samples, world_)) {
    for (std::size_t k = 0; k < count; ++k, ++s) {
      model_->zero_grad();
      Tensor l = loss(*model_, s);
      if (l.numel() != 1) throw ContractError("sample loss must be a scalar");
      if (!std::isfinite(l.item())) {
        throw NumericError("non-finite loss " + std::to_string(l.item()) + " at sample " +
                           std::to_string(s));
      }
      stats.loss += l.item();
      backward(l);
      auto& flat = per_sample[s];
      flat.reserve(offsets.back());
      for (const auto& t : model_->params()) {
        auto g = t.grad();
        flat.insert(flat.end(), g.begin(), g.end());
      }
    }
  }
  model_->zero_grad();

  // Reduce-scatter: each worker sums its ranges over samples in global order.
  for (int w = 0; w < world_; ++w) {
    for (std::size_t p = 0; p < n_params; ++p) {
      const auto r = table.ranges[p][w];
      auto& g = grads_.data[w][p];
      for (std::size_t i = 0; i < r.size(); ++i) {
        float acc = 0.0f;
        const std::size_t at = offsets[p] + r.begin + i;
        for (std::size_t q = 0; q < samples; ++q) acc += per_sample[q][at];
        g[i] = acc;
      }
    }
  }

  double sq = 0.0;
  for (std::size_t p = 0; p < n_params; ++p) {
    for (int w = 0; w < world_; ++w) {
      check_finite(grads_.data[w][p], table.names[p]);
      for (float g : grads_.data[w][p]) sq += static_cast<double>(g) * g;
    }
  }
  stats.grad_norm = std::sqrt(sq);
  if (clip_norm_ > 0.0f && stats.grad_norm > clip_norm_) {
    const float coef = static_cast<float>(clip_norm_ / (stats.grad_norm + 1e-6));
    for (auto& wd : grads_.data)
      for (auto& g : wd)
        for (auto& x : g) x *= coef;
    stats.clipped = true;
  }

  ++step_;
  for (int w = 0; w < world_; ++w) {
    for (std::size_t p = 0; p < n_params; ++p) {
      adam_step_range(params_.data[w][p], grads_.data[w][p], m_.data[w][p], v_.data[w][p], step_,
                      hyper_);
    }
  }
  sync_model();
  return stats;
}

std::string MemoryReport::to_csv() const {
  std::ostringstream out;
  out << "mode,category,bytes\n";
  for (std::size_t c = 0; c < kMemCategories; ++c) {
    out << to_string(mode) << ',' << to_string(static_cast<MemCategory>(c)) << ',' << total[c]
        << '\n';
  }
  return out.str();
}

std::vector<std::uint64_t> split_kv_bytes(const ModelConfig& config, std::size_t batch,
                                          std::size_t capacity, int world, int tp) {
  if (tp < 1 || world % tp != 0) throw ConfigError("world size must be a multiple of tp");
  if (config.n_heads % tp != 0) throw ConfigError("tp must divide n_heads");
  const std::uint64_t per_seq_head = 2ull * static_cast<std::uint64_t>(config.n_layers) *
                                     static_cast<std::uint64_t>(config.d_head()) * capacity * kF32;
  const auto seqs = balanced(batch, world / tp);
  std::vector<std::uint64_t> out(static_cast<std::size_t>(world));
  for (int w = 0; w < world; ++w) {
    out[w] = seqs[w / tp] * static_cast<std::uint64_t>(config.n_heads / tp) * per_seq_head;
  }
  return out;
}

HybridEngine::HybridEngine(TransformerModel& model, EngineOptions options)
    : model_(&model),
      options_(options),
      optimizer_(model, options.world, options.hyper, options.clip_norm),
      ledger_(options.world, options.memory_budget) {
  if (options.tp < 1 || options.world % options.tp != 0) {
    throw ConfigError("world size " + std::to_string(options.world) +
                      " must be a multiple of tp " + std::to_string(options.tp));
  }
  const auto& c = model.config();
  if (c.n_heads % options.tp != 0 || c.d_ff % options.tp != 0) {
    throw ConfigError("tp " + std::to_string(options.tp) + " must divide n_heads and d_ff");
  }
  for (int w = 0; w < options.world; ++w) {
    const auto b = optimizer_.param_bytes(w);
    ledger_.alloc(w, MemCategory::Params, b, "zero param shard");
    ledger_.alloc(w, MemCategory::Grads, b, "zero grad shard");
    ledger_.alloc(w, MemCategory::Optimizer, 2 * b, "adam moments");
  }
}

std::size_t HybridEngine::kv_capacity() const {
  return options_.kv_capacity ? options_.kv_capacity
                              : static_cast<std::size_t>(model_->config().max_seq_len);
}

std::uint64_t HybridEngine::kv_bytes() const {
  const auto& c = model_->config();
  return 2ull * static_cast<std::uint64_t>(c.n_layers) * static_cast<std::uint64_t>(c.n_heads) *
         static_cast<std::uint64_t>(c.d_head()) * kv_capacity() * options_.kv_batch * kF32;
}

void HybridEngine::require(EngineMode m, std::string_view what) const {
  if (mode_ != m) {
    throw ModeError(std::string(what) + " requires " + std::string(to_string(m)) +
                    " mode but the engine is in " + std::string(to_string(mode_)) + " mode");
  }
}

void HybridEngine::switch_mode(EngineMode target) {
  if (target == mode_) return;
  const int W = options_.world;
  if (target == EngineMode::Infer) {
    // Released, not freed: the shards keep their contents for the way back.
    for (int w = 0; w < W; ++w) {
      const auto b = optimizer_.param_bytes(w);
      ledger_.free(w, MemCategory::Grads, b, "release grads");
      ledger_.free(w, MemCategory::Optimizer, 2 * b, "release adam moments");
    }
    auto layout = build_inference_layout(*model_, options_.tp);
    const auto kv = split_kv_bytes(model_->config(), options_.kv_batch, kv_capacity(), W, options_.tp);
    int act_done = 0, kv_done = 0;
    try {
      for (int w = 0; w < W; ++w, ++act_done) {
        ledger_.alloc(w, MemCategory::Activations, layout.worker_bytes(w % options_.tp),
                      "tp weight layout");
      }
      for (int w = 0; w < W; ++w, ++kv_done) {
        ledger_.alloc(w, MemCategory::KvCache, kv[w], "kv cache");
      }
    } catch (const BudgetError&) {
      for (int w = 0; w < kv_done; ++w) ledger_.free(w, MemCategory::KvCache, kv[w], "rollback");
      for (int w = 0; w < act_done; ++w) {
        ledger_.free(w, MemCategory::Activations, layout.worker_bytes(w % options_.tp), "rollback");
      }
      for (int w = 0; w < W; ++w) {
        const auto b = optimizer_.param_bytes(w);
        ledger_.alloc(w, MemCategory::Grads, b, "rollback");
        ledger_.alloc(w, MemCategory::Optimizer, 2 * b, "rollback");
      }
      throw;
    }
    layout_ = std::move(layout);
    mode_ = EngineMode::Infer;
    return;
  }
  for (int w = 0; w < W; ++w) {
    ledger_.free(w, MemCategory::KvCache, ledger_.bytes(w, MemCategory::KvCache), "free kv cache");
    ledger_.free(w, MemCategory::Activations, ledger_.bytes(w, MemCategory::Activations),
                 "drop tp layout");
  }
  for (int w = 0; w < W; ++w) {
    const auto b = optimizer_.param_bytes(w);
    ledger_.alloc(w, MemCategory::Grads, b, "reclaim grads");
    ledger_.alloc(w, MemCategory::Optimizer, 2 * b, "reclaim adam moments");
  }
  layout_.reset();
  mode_ = EngineMode::Train;
}

StepStats HybridEngine::train_step(std::size_t samples, const SampleLoss& loss) {
  require(EngineMode::Train, "train_step");
  return optimizer_.step(samples, loss);
}

const InferenceLayout& HybridEngine::layout() const {
  require(EngineMode::Infer, "inference layout");
  return *layout_;
}

std::vector<float> HybridEngine::tp_forward(std::span<const int> tokens, std::size_t batch,
                                            std::size_t len) const {
  require(EngineMode::Infer, "tp_forward");
  return layout_forward(*layout_, tokens, batch, len);
}

std::vector<Generation> HybridEngine::generate(const std::vector<std::vector<int>>& prompts,
                                               int max_new,
                                               const GenerationStrategy& strategy) const {
  require(EngineMode::Infer, "cached generation");
  return generate_batch(*layout_, prompts, max_new, strategy);
}

MemoryReport HybridEngine::memory_report() const {
  MemoryReport r;
  r.mode = mode_;
  for (int w = 0; w < ledger_.workers(); ++w) {
    std::array<std::uint64_t, kMemCategories> row{};
    for (std::size_t c = 0; c < kMemCategories; ++c) {
      row[c] = ledger_.bytes(w, static_cast<MemCategory>(c));
      r.total[c] += row[c];
    }
    r.per_worker.push_back(row);
  }
  return r;
}

}  // namespace dsc
