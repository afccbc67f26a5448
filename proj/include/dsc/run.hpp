// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dsc/error.hpp"
#include "dsc/ppo.hpp"
#include "dsc/rm.hpp"
#include "dsc/sft.hpp"

// Single-command orchestration of the three training stages and the chat loop.
namespace dsc {

/// Failure inside one stage; what() is "[stage <name>] <diagnostic>".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DatasetSpec {
  std::string path;
  double weight = 1.0;
};

struct RunConfig {
  std::string actor_model = "opt-125m-toy";
  std::string reward_model = "opt-125m-toy";
  std::string deployment = "single_gpu";  // single_gpu | single_node | multi_node
  std::vector<DatasetSpec> datasets;
  std::string pretrain_corpus;  // needed only when ppo.ptx_coef > 0
  std::array<double, 3> stage_fractions{0.2, 0.4, 0.4};
  std::uint64_t seed = 1234;
  std::string output_dir = "dsc_output";

  SFTConfig sft;
  RMConfig rm;
  PPOConfig ppo;
  std::size_t ppo_iterations = 10;

  /// Simulated data-parallel world size for the deployment: 1, 8 or 64.
  int world() const;
  /// TP degree used for generation: largest power of two <= 8 dividing both
  /// the world size and the actor's head count.
  int tensor_parallel() const;
  /// Pushes seed, world size and TP degree into the stage configs and checks
  /// presets and fractions. Throws ConfigError.
  void finalize();

  /// Missing keys keep their defaults; unknown keys are a ConfigError.
  static RunConfig from_json(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_json() const;
};

/// Output-dir override from DSC_OUTPUT_DIR, if set and nonempty.
void apply_env_overrides(RunConfig& config);

/// Artifact locations inside the output directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path sft_actor() const { return root / "actor_sft.dsc"; }
  std::filesystem::path reward() const { return root / "reward.dsc"; }
  std::filesystem::path final_actor() const { return root / "actor_final.dsc"; }
  std::filesystem::path ema_actor() const { return root / "actor_ema.dsc"; }
  std::filesystem::path sft_csv() const { return root / "sft_loss.csv"; }
  std::filesystem::path rm_csv() const { return root / "rm_accuracy.csv"; }
  std::filesystem::path rm_loss_csv() const { return root / "rm_loss.csv"; }
  std::filesystem::path ppo_csv() const { return root / "ppo_metrics.csv"; }
  std::filesystem::path timing() const { return root / "timing.txt"; }
  std::filesystem::path config() const { return root / "run_config.json"; }
};

/// Loads every configured dataset and the pretraining corpus, blends and
/// splits. Runs before any training so a bad path fails fast.
struct PreparedData {
  StageSplit split;
  std::vector<UnifiedRecord> pretrain;
};
PreparedData prepare_data(const RunConfig& config);

SFTResult run_sft_stage(const RunConfig& config, const PreparedData& data);
RMResult run_rm_stage(const RunConfig& config, const PreparedData& data);
std::vector<PPOMetrics> run_ppo_stage(const RunConfig& config, const PreparedData& data);

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<StageTiming> stages;
  double total_seconds = 0.0;
  SFTResult sft;
  RMResult rm;
  std::vector<PPOMetrics> ppo;
};

/// SFT -> RM -> PPO. `log` receives progress lines when non-null.
TrainReport train_all(RunConfig config, std::ostream* log = nullptr);

/// Per-stage wall time table with a Total row.
std::string timing_table(const TrainReport& report);

struct ChatOptions {
  bool greedy = true;
  int top_k = 20;
  float temperature = 1.0f;
  int max_new = 48;
  std::uint64_t seed = 1234;
};

/// "Human: ..." / "Assistant: ..." transcript loop over `in`. `:reset`
/// clears the transcript, `:quit` (or end of input) exits. Context longer
/// than the model window keeps its most recent tokens. Returns the number
/// of responses produced.
std::size_t chat_repl(const TransformerModel& model, const ChatOptions& options, std::istream& in,
                      std::ostream& out);

/// One assistant turn for a transcript; exposed for tests.
std::string chat_respond(const TransformerModel& model, const std::string& transcript,
                         const ChatOptions& options, std::uint64_t turn);

}  // namespace dsc
