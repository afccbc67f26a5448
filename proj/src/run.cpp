// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/run.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dsc/checkpoint.hpp"
#include "dsc/inference.hpp"
#include "dsc/io.hpp"

namespace dsc {

using nlohmann::json;

StageError::StageError(std::string stage, const std::string& message)
    : Error("[stage " + stage + "] " + message), stage_(std::move(stage)) {}

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + k + "' in " + where_);
    }
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError("bad value for '" + std::string(key) + "' in " + where_);
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class Fn>
double timed(Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) {
  return seed * 0x9E3779B97F4A7C15ull + stage;
}

std::vector<UnifiedRecord> with_response(const std::vector<UnifiedRecord>& in) {
  std::vector<UnifiedRecord> out;
  for (const auto& r : in) {
    if (r.chosen) out.push_back(r);
  }
  return out;
}

std::vector<UnifiedRecord> pairwise_only(const std::vector<UnifiedRecord>& in) {
  std::vector<UnifiedRecord> out;
  for (const auto& r : in) {
    if (r.is_pairwise()) out.push_back(r);
  }
  return out;
}

template <class Fn>
auto in_stage(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace

int RunConfig::world() const {
  if (deployment == "single_gpu") return 1;
  if (deployment == "single_node") return 8;
  if (deployment == "multi_node") return 64;
  throw ConfigError("unknown deployment '" + deployment +
                    "' (expected single_gpu, single_node or multi_node)");
}

int RunConfig::tensor_parallel() const {
  const int heads = model_preset(actor_model).n_heads;
  int tp = 1;
  while (tp * 2 <= 8 && world() % (tp * 2) == 0 && heads % (tp * 2) == 0) tp *= 2;
  return tp;
}

void RunConfig::finalize() {
  const auto actor = model_preset(actor_model, HeadKind::LM);
  const auto reward = model_preset(reward_model, HeadKind::Scalar);
  const int W = world();
  double sum = 0.0;
  for (double f : stage_fractions) {
    if (f < 0.0) throw ConfigError("stage fractions must be >= 0");
    sum += f;
  }
  if (!(sum > 0.0)) throw ConfigError("stage fractions must not all be zero");
  if (datasets.empty()) throw ConfigError("no datasets configured");
  for (const auto& d : datasets) {
    if (!(d.weight > 0.0)) throw ConfigError("dataset weight must be > 0 for " + d.path);
  }

  sft.seed = stage_seed(seed, 1);
  sft.world = W;
  sft.max_len = std::min<std::size_t>(sft.max_len, actor.max_seq_len);
  rm.seed = stage_seed(seed, 2);
  rm.world = W;
  rm.max_len = std::min<std::size_t>(rm.max_len, reward.max_seq_len);
  ppo.seed = stage_seed(seed, 3);
  ppo.world = W;
  ppo.tp = tensor_parallel();
  sft.validate();
  rm.validate();
  ppo.validate();
  const int window = std::min(actor.max_seq_len, reward.max_seq_len);
  if (static_cast<int>(ppo.prompt_len + ppo.gen_len) > window) {
    throw ConfigError("ppo prompt_len + gen_len = " + std::to_string(ppo.prompt_len + ppo.gen_len) +
                      " exceeds the model window " + std::to_string(window));
  }
}

RunConfig RunConfig::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section top(j, "run config");
  top.get("actor_model", c.actor_model);
  top.get("reward_model", c.reward_model);
  top.get("deployment", c.deployment);
  top.get("pretrain_corpus", c.pretrain_corpus);
  top.get("stage_fractions", c.stage_fractions);
  top.get("seed", c.seed);
  top.get("output_dir", c.output_dir);
  if (const json* ds = top.child("datasets")) {
    if (!ds->is_array()) throw ConfigError("datasets must be an array");
    for (const auto& d : *ds) {
      DatasetSpec spec;
      if (d.is_string()) {
        spec.path = d.get<std::string>();
      } else {
        Section s(d, "datasets entry");
        s.get("path", spec.path);
        s.get("weight", spec.weight);
      }
      c.datasets.push_back(spec);
    }
  }
  if (const json* s = top.child("sft")) {
    Section x(*s, "sft");
    x.get("epochs", c.sft.epochs);
    x.get("batch_size", c.sft.batch_size);
    x.get("lr", c.sft.lr);
    x.get("max_len", c.sft.max_len);
    x.get("eval_fraction", c.sft.eval_fraction);
    x.get("response_only", c.sft.response_only);
    x.get("clip_norm", c.sft.clip_norm);
    x.get("warmup_steps", c.sft.warmup_steps);
  }
  if (const json* s = top.child("rm")) {
    Section x(*s, "rm");
    x.get("epochs", c.rm.epochs);
    x.get("batch_size", c.rm.batch_size);
    x.get("lr", c.rm.lr);
    x.get("max_len", c.rm.max_len);
    x.get("eval_fraction", c.rm.eval_fraction);
    x.get("clip_norm", c.rm.clip_norm);
    x.get("all_positions", c.rm.all_positions);
  }
  if (const json* s = top.child("ppo")) {
    Section x(*s, "ppo");
    x.get("iterations", c.ppo_iterations);
    x.get("beta", c.ppo.beta);
    x.get("gamma", c.ppo.gamma);
    x.get("lambda", c.ppo.lambda);
    x.get("clip_eps", c.ppo.clip_eps);
    x.get("value_clip", c.ppo.value_clip);
    x.get("ppo_epochs", c.ppo.ppo_epochs);
    x.get("ptx_coef", c.ppo.ptx_coef);
    x.get("enable_ema", c.ppo.enable_ema);
    x.get("ema_decay", c.ppo.ema_decay);
    x.get("reward_clip", c.ppo.reward_clip);
    x.get("prompt_len", c.ppo.prompt_len);
    x.get("gen_len", c.ppo.gen_len);
    x.get("batch", c.ppo.batch);
    x.get("actor_lr", c.ppo.actor_lr);
    x.get("critic_lr", c.ppo.critic_lr);
    x.get("clip_norm", c.ppo.clip_norm);
    x.get("top_k", c.ppo.top_k);
    x.get("temperature", c.ppo.temperature);
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return from_json(read_text_file(path));
}

std::string RunConfig::to_json() const {
  json ds = json::array();
  for (const auto& d : datasets) ds.push_back({{"path", d.path}, {"weight", d.weight}});
  json j = {
      {"actor_model", actor_model},
      {"reward_model", reward_model},
      {"deployment", deployment},
      {"datasets", ds},
      {"pretrain_corpus", pretrain_corpus},
      {"stage_fractions", stage_fractions},
      {"seed", seed},
      {"output_dir", output_dir},
      {"sft",
       {{"epochs", sft.epochs},
        {"batch_size", sft.batch_size},
        {"lr", sft.lr},
        {"max_len", sft.max_len},
        {"eval_fraction", sft.eval_fraction},
        {"response_only", sft.response_only},
        {"clip_norm", sft.clip_norm},
        {"warmup_steps", sft.warmup_steps}}},
      {"rm",
       {{"epochs", rm.epochs},
        {"batch_size", rm.batch_size},
        {"lr", rm.lr},
        {"max_len", rm.max_len},
        {"eval_fraction", rm.eval_fraction},
        {"clip_norm", rm.clip_norm},
        {"all_positions", rm.all_positions}}},
      {"ppo",
       {{"iterations", ppo_iterations},
        {"beta", ppo.beta},
        {"gamma", ppo.gamma},
        {"lambda", ppo.lambda},
        {"clip_eps", ppo.clip_eps},
        {"value_clip", ppo.value_clip},
        {"ppo_epochs", ppo.ppo_epochs},
        {"ptx_coef", ppo.ptx_coef},
        {"enable_ema", ppo.enable_ema},
        {"ema_decay", ppo.ema_decay},
        {"reward_clip", ppo.reward_clip},
        {"prompt_len", ppo.prompt_len},
        {"gen_len", ppo.gen_len},
        {"batch", ppo.batch},
        {"actor_lr", ppo.actor_lr},
        {"critic_lr", ppo.critic_lr},
        {"clip_norm", ppo.clip_norm},
        {"top_k", ppo.top_k},
        {"temperature", ppo.temperature}}},
  };
  return j.dump(2) + "\n";
}

void apply_env_overrides(RunConfig& config) {
  if (const char* dir = std::getenv("DSC_OUTPUT_DIR"); dir != nullptr && *dir != '\0') {
    config.output_dir = dir;
  }
}

PreparedData prepare_data(const RunConfig& config) {
  for (const auto& d : config.datasets) {
    if (!std::filesystem::exists(d.path)) throw ConfigError("dataset not found: " + d.path);
  }
  const bool needs_corpus = config.ppo.ptx_coef > 0.0f;
  if (needs_corpus && config.pretrain_corpus.empty()) {
    throw ConfigError("ppo.ptx_coef > 0 but no pretrain_corpus is configured");
  }
  if (!config.pretrain_corpus.empty() && !std::filesystem::exists(config.pretrain_corpus)) {
    throw ConfigError("pretrain corpus not found: " + config.pretrain_corpus);
  }
  std::vector<std::vector<UnifiedRecord>> sets;
  std::vector<double> weights;
  for (const auto& d : config.datasets) {
    sets.push_back(load_dataset(d.path));
    weights.push_back(d.weight);
  }
  PreparedData out;
  const auto mixed = blend(sets, weights, stage_seed(config.seed, 10));
  out.split = split_stages(mixed, config.stage_fractions, stage_seed(config.seed, 11));
  if (!config.pretrain_corpus.empty()) out.pretrain = load_pretrain_corpus(config.pretrain_corpus);
  return out;
}

SFTResult run_sft_stage(const RunConfig& config, const PreparedData& data) {
  return in_stage("sft", [&] {
    const RunPaths paths{config.output_dir};
    const auto records = with_response(data.split.stages[0]);
    if (records.empty()) throw EmptyDatasetError("stage-1 split has no records with a response");
    TransformerModel actor(model_preset(config.actor_model, HeadKind::LM), config.seed);
    auto cfg = config.sft;
    cfg.checkpoint_path = paths.sft_actor().string();
    auto res = train_sft(cfg, records, actor);
    write_text_file(paths.sft_csv(), loss_curve_csv(res.curve));
    return res;
  });
}

RMResult run_rm_stage(const RunConfig& config, const PreparedData& data) {
  return in_stage("rm", [&] {
    const RunPaths paths{config.output_dir};
    const auto pairs = pairwise_only(data.split.stages[1]);
    if (pairs.empty()) throw EmptyDatasetError("stage-2 split has no preference pairs");
    const auto rcfg = model_preset(config.reward_model, HeadKind::Scalar);
    TransformerModel reward(rcfg, config.seed + 1);
    // Start from the SFT body when it is available and shaped the same.
    if (std::filesystem::exists(paths.sft_actor())) {
      const auto sft = load_checkpoint(paths.sft_actor());
      if (sft.config().same_body(rcfg)) reward.copy_body_from(sft);
    }
    auto cfg = config.rm;
    cfg.checkpoint_path = paths.reward().string();
    auto res = train_rm(cfg, pairs, reward);
    write_text_file(paths.rm_csv(), accuracy_csv(res.accuracy));
    write_text_file(paths.rm_loss_csv(), loss_curve_csv(res.losses));
    return res;
  });
}

std::vector<PPOMetrics> run_ppo_stage(const RunConfig& config, const PreparedData& data) {
  return in_stage("ppo", [&] {
    const RunPaths paths{config.output_dir};
    const auto& prompts = data.split.stages[2];
    if (prompts.empty()) throw EmptyDatasetError("stage-3 split is empty");
    for (const auto& p : {paths.sft_actor(), paths.reward()}) {
      if (!std::filesystem::exists(p)) throw CheckpointError("missing checkpoint " + p.string());
    }
    const auto actor = load_checkpoint(paths.sft_actor());
    const auto reward = load_checkpoint(paths.reward());
    PpoTrainer trainer(actor, reward, config.ppo, data.pretrain);
    auto metrics = run_ppo(trainer, prompts, config.ppo_iterations, config.ppo.seed);
    save_checkpoint(trainer.models().actor, paths.final_actor());
    if (trainer.models().ema) save_checkpoint(*trainer.models().ema, paths.ema_actor());
    write_text_file(paths.ppo_csv(), metrics_csv(metrics));
    return metrics;
  });
}

TrainReport train_all(RunConfig config, std::ostream* log) {
  PreparedData data;
  in_stage("setup", [&] {
    config.finalize();
    data = prepare_data(config);
    write_text_file(RunPaths{config.output_dir}.config(), config.to_json());
    return 0;
  });
  const auto say = [&](const std::string& s) {
    if (log) *log << s << std::endl;
  };
  say("splits: sft=" + std::to_string(data.split.stages[0].size()) +
      " rm=" + std::to_string(data.split.stages[1].size()) +
      " ppo=" + std::to_string(data.split.stages[2].size()) +
      " world=" + std::to_string(config.world()) + " tp=" + std::to_string(config.ppo.tp));

  TrainReport rep;
  const auto t0 = std::chrono::steady_clock::now();
  rep.stages.push_back({"Step 1 (SFT)", timed([&] { rep.sft = run_sft_stage(config, data); })});
  say("sft: eval loss " + fmt_num(rep.sft.initial_eval_loss) + " -> " + fmt_num(rep.sft.final_eval_loss));
  rep.stages.push_back({"Step 2 (RM)", timed([&] { rep.rm = run_rm_stage(config, data); })});
  say("rm: accuracy " + fmt_num(rep.rm.initial_accuracy) + " -> " + fmt_num(rep.rm.final_accuracy));
  rep.stages.push_back({"Step 3 (PPO)", timed([&] { rep.ppo = run_ppo_stage(config, data); })});
  if (!rep.ppo.empty()) {
    say("ppo: mean rm score " + fmt_num(rep.ppo.front().mean_rm_score) + " -> " +
        fmt_num(rep.ppo.back().mean_rm_score));
  }
  rep.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text_file(RunPaths{config.output_dir}.timing(), timing_table(rep));
  return rep;
}

std::string timing_table(const TrainReport& report) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-16s %12s\n", "stage", "seconds");
  out << line;
  for (const auto& s : report.stages) {
    std::snprintf(line, sizeof line, "%-16s %12.3f\n", s.stage.c_str(), s.seconds);
    out << line;
  }
  std::snprintf(line, sizeof line, "%-16s %12.3f\n", "Total", report.total_seconds);
  out << line;
  return out.str();
}

std::string chat_respond(const TransformerModel& model, const std::string& transcript,
                         const ChatOptions& options, std::uint64_t turn) {
  if (model.config().head != HeadKind::LM) throw HeadKindError("chat needs an LM-head checkpoint");
  if (options.max_new < 1) throw ConfigError("max_new must be >= 1");
  const auto window = static_cast<std::size_t>(model.config().max_seq_len);
  const std::size_t keep_new = std::min<std::size_t>(options.max_new, window - 2);
  std::vector<int> ids = tokenize(transcript);
  const std::size_t room = window - keep_new - 1;  // BOS
  if (ids.size() > room) ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(room));
  ids.insert(ids.begin(), kBos);
  const auto strategy = options.greedy
                            ? GenerationStrategy::greedy()
                            : GenerationStrategy::sample_top_k(options.top_k, options.seed + turn,
                                                               options.temperature);
  const auto g = generate(model, ids, static_cast<int>(keep_new), strategy);
  std::string text = detokenize(g.tokens);
  // The model may run on into the next speaker's line.
  if (auto cut = text.find("\nHuman:"); cut != std::string::npos) text.resize(cut);
  return text;
}

std::size_t chat_repl(const TransformerModel& model, const ChatOptions& options, std::istream& in,
                      std::ostream& out) {
  if (model.config().head != HeadKind::LM) throw HeadKindError("chat needs an LM-head checkpoint");
  std::string transcript;
  std::string line;
  std::size_t turns = 0;
  out << "Human: " << std::flush;
  while (std::getline(in, line)) {
    if (line == ":quit") break;
    if (line == ":reset") {
      transcript.clear();
      out << "(transcript cleared)\nHuman: " << std::flush;
      continue;
    }
    transcript += "Human: " + line + "\nAssistant: ";
    const auto reply = chat_respond(model, transcript, options, turns);
    transcript += reply + "\n";
    out << "Assistant: " << reply << "\nHuman: " << std::flush;
    ++turns;
  }
  out << "\n";
  return turns;
}

}  // namespace dsc
