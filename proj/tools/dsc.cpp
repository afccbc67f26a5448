// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

// dsc: train / sft / rm / ppo / chat / perf / bench.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsc/checkpoint.hpp"
#include "dsc/io.hpp"
#include "dsc/perf.hpp"
#include "dsc/run.hpp"

namespace {

using dsc::RunConfig;

struct RunFlags {
  std::string config;
  std::string actor_model, reward_model, deployment, output_dir, pretrain;
  std::vector<std::string> data;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> ppo_iterations;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config, "RunConfig JSON file");
    app->add_option("--actor-model", actor_model, "actor preset, e.g. opt-125m-toy");
    app->add_option("--reward-model", reward_model, "reward preset");
    app->add_option("--deployment-type", deployment, "single_gpu | single_node | multi_node");
    app->add_option("--data", data, "JSONL dataset path (repeatable, weight 1 each)");
    app->add_option("--pretrain-corpus", pretrain, "plain-text corpus for the mixture loss");
    app->add_option("--output-dir", output_dir, "artifact directory");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--ppo-iterations", ppo_iterations, "PPO iterations");
  }

  RunConfig build() const {
    RunConfig c = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (!actor_model.empty()) c.actor_model = actor_model;
    if (!reward_model.empty()) c.reward_model = reward_model;
    if (!deployment.empty()) c.deployment = deployment;
    if (!data.empty()) {
      c.datasets.clear();
      for (const auto& d : data) c.datasets.push_back({d, 1.0});
    }
    if (!pretrain.empty()) c.pretrain_corpus = pretrain;
    if (!output_dir.empty()) c.output_dir = output_dir;
    if (seed) c.seed = *seed;
    if (ppo_iterations) c.ppo_iterations = *ppo_iterations;
    dsc::apply_env_overrides(c);
    return c;
  }
};

int cmd_train(const RunFlags& f) {
  const auto report = dsc::train_all(f.build(), &std::cerr);
  std::cout << dsc::timing_table(report);
  return 0;
}

int cmd_stage(const RunFlags& f, const std::string& stage) {
  RunConfig c = f.build();
  dsc::PreparedData data;
  try {
    c.finalize();
    data = dsc::prepare_data(c);
  } catch (const std::exception& e) {
    throw dsc::StageError("setup", e.what());
  }
  if (stage == "sft") {
    const auto r = dsc::run_sft_stage(c, data);
    std::cout << "sft eval loss " << dsc::fmt_num(r.initial_eval_loss) << " -> "
              << dsc::fmt_num(r.final_eval_loss) << "\n";
  } else if (stage == "rm") {
    const auto r = dsc::run_rm_stage(c, data);
    std::cout << "rm accuracy " << dsc::fmt_num(r.initial_accuracy) << " -> "
              << dsc::fmt_num(r.final_accuracy) << "\n";
  } else {
    const auto m = dsc::run_ppo_stage(c, data);
    std::cout << dsc::metrics_csv(m);
  }
  return 0;
}

struct ChatFlags {
  std::string checkpoint;
  int top_k = 0;
  float temperature = 1.0f;
  int max_new = 48;
  std::uint64_t seed = 1234;
};

int cmd_chat(const ChatFlags& f) {
  const auto model = dsc::load_checkpoint(f.checkpoint);
  dsc::ChatOptions o;
  o.greedy = f.top_k <= 0;
  o.top_k = f.top_k;
  o.temperature = f.temperature;
  o.max_new = f.max_new;
  o.seed = f.seed;
  dsc::chat_repl(model, o, std::cin, std::cout);
  return 0;
}

struct PerfFlags {
  std::string config;
  std::string model = "opt-13b";
  std::string hardware = "A100-40GB";
  std::vector<int> gpus{8, 16, 32, 64};
  bool offload = false, lora = false;
  std::optional<double> mfu, gen_eff, price, per_sample_bytes;
  std::string csv, svg;
};

void apply_perf_config(PerfFlags& f, const std::string& path) {
  const auto j = nlohmann::json::parse(dsc::read_text_file(path));
  static const std::set<std::string> known{"model", "hardware", "gpus", "offload", "lora", "mfu",
                                           "gen_efficiency", "price", "per_sample_bytes", "csv", "svg"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw dsc::ConfigError("unknown key '" + k + "' in perf config");
  }
  if (j.contains("model")) f.model = j["model"].get<std::string>();
  if (j.contains("hardware")) f.hardware = j["hardware"].get<std::string>();
  if (j.contains("gpus")) f.gpus = j["gpus"].get<std::vector<int>>();
  if (j.contains("offload")) f.offload = j["offload"].get<bool>();
  if (j.contains("lora")) f.lora = j["lora"].get<bool>();
  if (j.contains("mfu")) f.mfu = j["mfu"].get<double>();
  if (j.contains("gen_efficiency")) f.gen_eff = j["gen_efficiency"].get<double>();
  if (j.contains("price")) f.price = j["price"].get<double>();
  if (j.contains("per_sample_bytes")) f.per_sample_bytes = j["per_sample_bytes"].get<double>();
  if (j.contains("csv")) f.csv = j["csv"].get<std::string>();
  if (j.contains("svg")) f.svg = j["svg"].get<std::string>();
}

int cmd_perf(PerfFlags f, const CLI::App& app) {
  if (!f.config.empty()) {
    // flags given on the command line win over the file
    PerfFlags file = f;
    apply_perf_config(file, f.config);
    const auto given = [&](const char* name) { return app.count(name) > 0; };
    if (!given("--model")) f.model = file.model;
    if (!given("--hardware")) f.hardware = file.hardware;
    if (!given("--gpus")) f.gpus = file.gpus;
    if (!given("--offload")) f.offload = file.offload;
    if (!given("--lora")) f.lora = file.lora;
    if (!given("--mfu")) f.mfu = file.mfu;
    if (!given("--gen-efficiency")) f.gen_eff = file.gen_eff;
    if (!given("--price")) f.price = file.price;
    if (!given("--per-sample-bytes")) f.per_sample_bytes = file.per_sample_bytes;
    if (!given("--csv")) f.csv = file.csv;
    if (!given("--svg")) f.svg = file.svg;
  }
  namespace perf = dsc::perf;
  auto w = perf::workload_preset(f.model);
  auto hw = perf::hardware_preset(f.hardware);
  if (f.mfu) hw.train_mfu = *f.mfu;
  if (f.gen_eff) hw.gen_efficiency = *f.gen_eff;
  if (f.price) hw.price_per_hour = *f.price;
  if (f.per_sample_bytes) w.per_sample_bytes = *f.per_sample_bytes;
  perf::MemoryOptions opt;
  opt.offload = f.offload;
  opt.lora = f.lora;

  const auto curve = perf::scaling_curve(w, hw, f.gpus, opt);
  std::printf("workload %s (N=%.3g, M=%.3g, P=%d, G=%d), hardware %s\n", w.name.c_str(),
              w.actor_params, w.small_params, w.prompt_len, w.gen_len, hw.name.c_str());
  std::printf("generation flop share %.1f%%\n", 100.0 * perf::gen_flop_fraction(w));
  std::printf("%6s %4s %6s %10s %10s %10s %10s %10s %6s %9s %10s\n", "gpus", "tp", "batch", "gen_s",
              "train_s", "gen_tf", "train_tf", "eff_tf", "mfu%", "hours", "dollars");
  for (const auto& r : curve.points) {
    if (!r.feasible) {
      std::printf("%6d  infeasible: %s\n", r.gpus, r.note.c_str());
      continue;
    }
    std::printf("%6d %4d %6d %10.3f %10.3f %10.2f %10.2f %10.2f %6.1f %9.2f %10.0f\n", r.gpus, r.tp,
                r.batch_per_gpu, r.gen_seconds, r.train_seconds, r.gen_tflops, r.train_tflops,
                r.effective_tflops, 100.0 * r.mfu(hw), r.epoch_hours, r.dollars);
  }
  if (curve.knee) {
    std::printf("scaling knee at %d GPUs (%d knee%s)\n", *curve.knee, curve.knees,
                curve.knees == 1 ? "" : "s");
  } else {
    std::printf("no super-linear regime\n");
  }
  std::printf("single-GPU max model (k=%.1f):", perf::kFeasibilityOverhead);
  for (const auto& name : perf::hardware_preset_names()) {
    const auto h = perf::hardware_preset(name);
    const auto best = perf::max_feasible_model(h.mem_bytes);
    std::printf(" %s=%s", name.c_str(), best.empty() ? "none" : best.c_str());
  }
  std::printf("\n");
  if (!f.csv.empty()) dsc::write_text_file(f.csv, perf::reports_csv(curve.points));
  if (!f.svg.empty()) {
    dsc::write_text_file(f.svg, perf::scaling_svg(curve, w.name + " on " + hw.name));
  }
  return 0;
}

struct BenchFlags {
  std::string actor_model = "opt-125m-toy";
  std::string reward_model = "opt-125m-toy";
  std::size_t iterations = 3;
  std::size_t batch = 8;
  std::size_t prompt_len = 32;
  int gen_len = 32;
  std::uint64_t seed = 1234;
};

// Toy step-3 timing: generation vs training share of wall time and flops.
int cmd_bench(const BenchFlags& f) {
  const auto acfg = dsc::model_preset(f.actor_model, dsc::HeadKind::LM);
  const auto rcfg = dsc::model_preset(f.reward_model, dsc::HeadKind::Scalar);
  dsc::TransformerModel actor(acfg, f.seed), reward(rcfg, f.seed + 1);
  dsc::PPOConfig cfg;
  cfg.batch = f.batch;
  cfg.prompt_len = f.prompt_len;
  cfg.gen_len = f.gen_len;
  cfg.seed = f.seed;
  dsc::PpoTrainer trainer(actor, reward, cfg);
  std::vector<dsc::UnifiedRecord> prompts;
  for (std::size_t i = 0; i < f.batch; ++i) {
    dsc::UnifiedRecord r;
    r.prompt = "Human: tell me about item " + std::to_string(i) + ". Assistant:";
    r.source = "bench";
    prompts.push_back(r);
  }
  const auto encoded = trainer.encode_prompts(prompts);
  double gen_s = 0, train_s = 0, tokens = 0;
  for (std::size_t it = 0; it < f.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto exp = trainer.generate_experience(encoded);
    const auto t1 = std::chrono::steady_clock::now();
    trainer.train_rlhf(exp);
    const auto t2 = std::chrono::steady_clock::now();
    gen_s += std::chrono::duration<double>(t1 - t0).count();
    train_s += std::chrono::duration<double>(t2 - t1).count();
    for (float m : exp.mask) tokens += m;
  }
  const double n = static_cast<double>(trainer.models().actor.num_parameters());
  dsc::perf::WorkloadSpec w;
  w.actor_params = n;
  w.small_params = static_cast<double>(trainer.models().critic.num_parameters());
  w.prompt_len = static_cast<int>(f.prompt_len);
  w.gen_len = f.gen_len;
  std::printf("actor %s (%.0f params), %zu iterations of %zu prompts\n", f.actor_model.c_str(), n,
              f.iterations, f.batch);
  std::printf("generation %.3f s (%.1f%% of time), training %.3f s\n", gen_s,
              100.0 * gen_s / (gen_s + train_s), train_s);
  std::printf("analytic generation flop share %.1f%%\n", 100.0 * dsc::perf::gen_flop_fraction(w));
  std::printf("generated tokens/s %.1f\n", tokens / gen_s);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsc: desk-scale RLHF training (SFT, reward model, PPO) and cost model"};
  app.require_subcommand(1);

  RunFlags train_f, sft_f, rm_f, ppo_f;
  auto* train = app.add_subcommand("train", "run SFT, RM and PPO in sequence");
  train_f.attach(train);
  auto* sft = app.add_subcommand("sft", "step 1 only");
  sft_f.attach(sft);
  auto* rm = app.add_subcommand("rm", "step 2 only");
  rm_f.attach(rm);
  auto* ppo = app.add_subcommand("ppo", "step 3 only (needs step 1 and 2 checkpoints)");
  ppo_f.attach(ppo);

  ChatFlags chat_f;
  auto* chat = app.add_subcommand("chat", "interactive Human/Assistant loop");
  chat->add_option("checkpoint", chat_f.checkpoint, "LM-head checkpoint")->required();
  chat->add_option("--top-k", chat_f.top_k, "top-k sampling; 0 = greedy");
  chat->add_option("--temperature", chat_f.temperature);
  chat->add_option("--max-new", chat_f.max_new, "tokens per reply");
  chat->add_option("--seed", chat_f.seed);

  PerfFlags perf_f;
  auto* perf = app.add_subcommand("perf", "analytic throughput, scaling and cost model");
  perf->add_option("-c,--config", perf_f.config, "perf JSON config");
  perf->add_option("--model", perf_f.model, "opt-1.3b .. opt-175b");
  perf->add_option("--hardware", perf_f.hardware, "A100-40GB, A100-80GB, V100-32GB, A6000-48GB");
  perf->add_option("--gpus", perf_f.gpus, "ascending GPU counts")->delimiter(',');
  perf->add_flag("--offload", perf_f.offload, "optimizer states in host memory");
  perf->add_flag("--lora", perf_f.lora, "low-rank trainable parameters");
  perf->add_option("--mfu", perf_f.mfu, "training-phase efficiency");
  perf->add_option("--gen-efficiency", perf_f.gen_eff, "generation bandwidth efficiency");
  perf->add_option("--price", perf_f.price, "$ per GPU-hour");
  perf->add_option("--per-sample-bytes", perf_f.per_sample_bytes);
  perf->add_option("--csv", perf_f.csv, "write per-phase CSV");
  perf->add_option("--svg", perf_f.svg, "write throughput chart");

  BenchFlags bench_f;
  auto* bench = app.add_subcommand("bench", "time generation vs training on a toy step 3");
  bench->add_option("--actor-model", bench_f.actor_model, "actor preset")->capture_default_str();
  bench->add_option("--reward-model", bench_f.reward_model, "reward/critic preset")->capture_default_str();
  bench->add_option("--iterations", bench_f.iterations, "PPO iterations to time")->capture_default_str();
  bench->add_option("--batch", bench_f.batch, "prompts per iteration")->capture_default_str();
  bench->add_option("--prompt-len", bench_f.prompt_len, "prompt tokens")->capture_default_str();
  bench->add_option("--gen-len", bench_f.gen_len, "generated tokens")->capture_default_str();
  bench->add_option("--seed", bench_f.seed, "seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  std::string which = app.get_subcommands().front()->get_name();
  try {
    if (which == "train") return cmd_train(train_f);
    if (which == "sft") return cmd_stage(sft_f, "sft");
    if (which == "rm") return cmd_stage(rm_f, "rm");
    if (which == "ppo") return cmd_stage(ppo_f, "ppo");
    if (which == "chat") return cmd_chat(chat_f);
    if (which == "perf") return cmd_perf(perf_f, *perf);
    if (which == "bench") return cmd_bench(bench_f);
  } catch (const dsc::StageError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "[" << which << "] error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
