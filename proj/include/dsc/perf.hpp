// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Analytic step-3 cost model: phase flops and times, memory-limited batch
// size, scaling over GPU counts, dollars and single-GPU feasibility.
namespace dsc::perf {

enum class Phase { Gen, Train };
std::string_view to_string(Phase p);

struct HardwareSpec {
  std::string name = "A100-40GB";
  int gpus = 8;
  double mem_bytes = 40e9;        // decimal GB
  double peak_flops = 312e12;     // dense fp16/bf16
  double bandwidth = 1555e9;      // bytes/s
  double price_per_hour = 4.0;    // $/GPU-hour
  double train_mfu = 0.3;
  double gen_efficiency = 0.6;    // achieved fraction of bandwidth while decoding

  void validate() const;
};

/// Known devices: "A100-40GB", "A100-80GB", "V100-32GB", "A6000-48GB".
HardwareSpec hardware_preset(std::string_view name);
std::vector<std::string> hardware_preset_names();

struct WorkloadSpec {
  std::string name = "opt-13b";
  double actor_params = 13e9;   // N
  double small_params = 350e6;  // M, critic and reward
  int prompt_len = 256;         // P
  int gen_len = 256;            // G
  double queries = 131900;
  int global_batch = 1024;      // query-answer pairs per step
  int ppo_epochs = 1;
  double extra_pass = 1.0;      // actor-sized forwards beyond fwd+bwd (reference)
  double epoch_tokens = 135e6;
  /// Activation + KV bytes one sample needs on a GPU during the step
  /// (default: the opt-13b preset value).
  double per_sample_bytes = 6.0 * 40 * 5120 * 512;

  int seq() const { return prompt_len + gen_len; }
  void validate() const;
};

/// OPT-family shapes from 1.3b to 175b with an OPT-350m reward model.
/// per_sample_bytes = 6 * layers * hidden * (P+G): fp16 K and V plus one
/// checkpointed fp16 activation per layer.
WorkloadSpec workload_preset(std::string_view name);
std::vector<std::string> workload_preset_names();

struct MemoryOptions {
  bool offload = false;       // optimizer states live in host memory
  bool lora = false;
  double lora_fraction = 0.01;  // trainable share of parameters under LoRA
};

/// Flops per sample (query-answer pair).
double flops_phase(const WorkloadSpec& w, Phase phase);
/// GEN share of the per-sample flops.
double gen_flop_fraction(const WorkloadSpec& w);

/// Seconds for one step of `batch` samples per GPU on W GPUs with TP degree tp.
double phase_time(const WorkloadSpec& w, const HardwareSpec& hw, double batch, Phase phase, int W,
                  int tp);

/// Flop-weighted harmonic mean of per-phase throughputs.
double harmonic_throughput(std::span<const double> flop_fractions,
                           std::span<const double> throughputs);
/// total flops / total time / gpus.
double effective_throughput(double gen_flops, double gen_seconds, double train_flops,
                            double train_seconds, int gpus);

/// Training-state bytes per GPU: 16N/W by default.
double state_bytes(double params, int W, const MemoryOptions& options = {});
/// Throws InfeasibleError when the states or one sample do not fit.
int max_batch_per_gpu(const WorkloadSpec& w, const HardwareSpec& hw, int W,
                      const MemoryOptions& options = {});

/// Smallest power-of-two TP degree (<= min(8, W)) whose fp16 weight slice
/// takes at most half of a GPU's memory.
int pick_tp(const WorkloadSpec& w, const HardwareSpec& hw, int W);

struct PerfReport {
  std::string model;
  double params = 0.0;
  int gpus = 0;
  int tp = 1;
  int batch_per_gpu = 0;
  double gen_seconds = 0.0, train_seconds = 0.0;
  double gen_tflops = 0.0, train_tflops = 0.0, effective_tflops = 0.0;  // per GPU
  double epoch_hours = 0.0;
  double dollars = 0.0;
  bool feasible = true;
  std::string note;  // reason when infeasible

  double mfu(const HardwareSpec& hw) const { return effective_tflops * 1e12 / hw.peak_flops; }
};

PerfReport evaluate(const WorkloadSpec& w, const HardwareSpec& hw, int W,
                    const MemoryOptions& options = {});

struct ScalingCurve {
  std::vector<PerfReport> points;
  std::optional<int> knee;  // last W of the super-linear regime
  int knees = 0;            // super-linear -> sub-linear transitions
};

/// W list must be ascending. Infeasible points are kept with feasible=false.
ScalingCurve scaling_curve(const WorkloadSpec& w, const HardwareSpec& hw, const std::vector<int>& Ws,
                           const MemoryOptions& options = {});

struct Cost {
  double hours = 0.0;
  double dollars = 0.0;
};
Cost cost_for_hours(double hours, int gpus, double price_per_hour);
Cost estimate_cost(const WorkloadSpec& w, const HardwareSpec& hw, int W,
                   const MemoryOptions& options = {});

inline constexpr double kFeasibilityOverhead = 1.6;
/// Single-GPU verdict: 2N(1 + k) <= mem.
bool feasible_single_gpu(double params, double mem_bytes, double k = kFeasibilityOverhead);

/// Largest OPT size from the preset list that a single GPU supports, or "".
std::string max_feasible_model(double mem_bytes, double k = kFeasibilityOverhead);

/// model,N,gpus,tp,phase,seconds,tflops_per_gpu,hours,dollars,feasible
std::string reports_csv(const std::vector<PerfReport>& reports);
/// Self-contained SVG line chart of per-GPU TFLOPs against GPU count with
/// generation, training and effective series.
std::string scaling_svg(const ScalingCurve& curve, std::string_view title);

}  // namespace dsc::perf
