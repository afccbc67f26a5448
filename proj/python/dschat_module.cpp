// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dsc/checkpoint.hpp"
#include "dsc/data.hpp"
#include "dsc/error.hpp"
#include "dsc/inference.hpp"
#include "dsc/perf.hpp"
#include "dsc/ppo.hpp"
#include "dsc/rm.hpp"
#include "dsc/run.hpp"
#include "dsc/tensor.hpp"

namespace py = pybind11;
using namespace dsc;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// tokens: 1-D (one row) or 2-D [batch, len] int array
py::array_t<float> forward(const TransformerModel& model,
                           const py::array_t<int, py::array::c_style | py::array::forcecast>& tokens) {
  if (tokens.ndim() != 1 && tokens.ndim() != 2) throw DimensionError("tokens must be 1-D or 2-D");
  const std::size_t batch = tokens.ndim() == 2 ? tokens.shape(0) : 1;
  const std::size_t len = tokens.shape(tokens.ndim() - 1);
  std::span<const int> ids(tokens.data(), batch * len);
  NoGradGuard ng;
  return to_numpy(forward_full(model, ids, batch, len));
}

template <class E>
void register_error(py::module_& m, const char* name, py::handle base) {
  py::register_exception<E>(m, name, base);
}

}  // namespace

PYBIND11_MODULE(dschat, m) {
  m.doc() = "RLHF training pipeline: tokenizer, transformer, PPO math, perf model, orchestration";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  register_error<DimensionError>(m, "DimensionError", base);
  register_error<ContractError>(m, "ContractError", base);
  register_error<NumericError>(m, "NumericError", base);
  register_error<LengthError>(m, "LengthError", base);
  register_error<CapacityError>(m, "CapacityError", base);
  register_error<HeadKindError>(m, "HeadKindError", base);
  register_error<ParseError>(m, "ParseError", base);
  register_error<SchemaError>(m, "SchemaError", base);
  register_error<EmptyDatasetError>(m, "EmptyDatasetError", base);
  register_error<ModeError>(m, "ModeError", base);
  register_error<IntegrityError>(m, "IntegrityError", base);
  register_error<ConfigError>(m, "ConfigError", base);
  register_error<BudgetError>(m, "BudgetError", base);
  register_error<InfeasibleError>(m, "InfeasibleError", base);
  register_error<CheckpointError>(m, "CheckpointError", base);
  register_error<BadMagicError>(m, "BadMagicError", base);
  register_error<UnsupportedVersionError>(m, "UnsupportedVersionError", base);
  register_error<TruncatedError>(m, "TruncatedError", base);
  register_error<ConfigMismatchError>(m, "ConfigMismatchError", base);
  register_error<StageError>(m, "StageError", base);

  m.attr("PAD") = kPad;
  m.attr("BOS") = kBos;
  m.attr("EOS") = kEos;
  m.attr("UNK") = kUnk;
  m.attr("VOCAB") = kTokenizerVocab;

  // data
  m.def("tokenize", [](const py::bytes& b) { return tokenize(std::string(b)); }, py::arg("text"));
  m.def("tokenize", [](const std::string& s) { return tokenize(s); }, py::arg("text"));
  m.def("detokenize", [](const std::vector<int>& ids) { return py::bytes(detokenize(ids)); },
        py::arg("ids"), "Returns bytes; decode as UTF-8 for text.");

  py::class_<UnifiedRecord>(m, "Record")
      .def(py::init([](std::string prompt, std::optional<std::string> chosen,
                       std::optional<std::string> rejected, std::string source) {
             return UnifiedRecord{std::move(prompt), std::move(chosen), std::move(rejected),
                                  std::move(source)};
           }),
           py::arg("prompt"), py::arg("chosen") = std::nullopt, py::arg("rejected") = std::nullopt,
           py::arg("source") = "")
      .def_readwrite("prompt", &UnifiedRecord::prompt)
      .def_readwrite("chosen", &UnifiedRecord::chosen)
      .def_readwrite("rejected", &UnifiedRecord::rejected)
      .def_readwrite("source", &UnifiedRecord::source)
      .def("is_pairwise", &UnifiedRecord::is_pairwise)
      .def("__repr__", [](const UnifiedRecord& r) { return "<Record prompt=" + r.prompt + ">"; });

  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("parse_dataset", &parse_dataset, py::arg("text"), py::arg("source") = "inline");
  m.def("blend",
        [](const std::vector<std::vector<UnifiedRecord>>& ds, const std::vector<double>& w,
           std::uint64_t seed, std::optional<std::size_t> target) { return blend(ds, w, seed, target); },
        py::arg("datasets"), py::arg("weights"), py::arg("seed"), py::arg("target") = std::nullopt);
  m.def("split_stages",
        [](const std::vector<UnifiedRecord>& recs, const std::array<double, 3>& f, std::uint64_t seed) {
          const auto s = split_stages(recs, f, seed);
          return py::make_tuple(s.indices[0], s.indices[1], s.indices[2]);
        },
        py::arg("records"), py::arg("fractions"), py::arg("seed"),
        "Index lists (sft, rm, ppo) into `records`.");

  // model
  py::enum_<HeadKind>(m, "HeadKind").value("LM", HeadKind::LM).value("Scalar", HeadKind::Scalar);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("head", &ModelConfig::head)
      .def("validate", &ModelConfig::validate)
      .def("to_json", &ModelConfig::to_json)
      .def(py::self == py::self);
  m.def("model_preset", &model_preset, py::arg("name"), py::arg("head") = HeadKind::LM);
  m.def("model_preset_names", &model_preset_names);

  py::class_<TransformerModel>(m, "TransformerModel")
      .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def_property_readonly("config", &TransformerModel::config)
      .def("num_parameters", &TransformerModel::num_parameters)
      .def("param_names", &TransformerModel::param_names)
      .def("values", &TransformerModel::values)
      .def("assign", &TransformerModel::assign, py::arg("values"))
      .def("clone", &TransformerModel::clone)
      .def("forward", &forward, py::arg("tokens"),
           "Logits [batch, len, V] (LM head) or values [batch, len] (scalar head).")
      .def("score", [](const TransformerModel& mm, const std::vector<int>& ids) {
        return scalar_score(mm, ids);
      }, py::arg("tokens"));

  m.def("save_checkpoint", &save_checkpoint, py::arg("model"), py::arg("path"));
  m.def("load_checkpoint",
        [](const std::filesystem::path& p) { return load_checkpoint(p); }, py::arg("path"));

  m.def(
      "generate",
      [](const TransformerModel& model, const std::vector<int>& prompt, int max_new, int top_k,
         float temperature, std::uint64_t seed) {
        const auto strategy = top_k <= 0 ? GenerationStrategy::greedy()
                                         : GenerationStrategy::sample_top_k(top_k, seed, temperature);
        const auto g = generate(model, prompt, max_new, strategy);
        return py::make_tuple(g.tokens, g.logprobs, g.hit_eos);
      },
      py::arg("model"), py::arg("prompt"), py::arg("max_new"), py::arg("top_k") = 0,
      py::arg("temperature") = 1.0f, py::arg("seed") = 0,
      "KV-cached decoding. top_k <= 0 is greedy. Returns (tokens, logprobs, hit_eos).");

  // pipeline math
  m.def("pairwise_loss",
        [](const std::vector<double>& c, const std::vector<double>& r) { return pairwise_loss(c, r); },
        py::arg("chosen"), py::arg("rejected"));
  m.def("gae",
        [](const std::vector<double>& r, const std::vector<double>& v, double gamma, double lambda) {
          return gae(r, v, gamma, lambda);
        },
        py::arg("rewards"), py::arg("values"), py::arg("gamma") = 1.0, py::arg("lam") = 0.95,
        "Returns (advantages, returns).");
  m.def(
      "compute_rewards",
      [](const std::vector<float>& actor, const std::vector<float>& ref, float score, float beta,
         float clip, std::size_t length) {
        PPOConfig c;
        c.beta = beta;
        c.reward_clip = clip;
        return compute_rewards(actor, ref, score, c, length);
      },
      py::arg("actor_logprobs"), py::arg("ref_logprobs"), py::arg("rm_score"), py::arg("beta") = 0.1f,
      py::arg("reward_clip") = 5.0f, py::arg("length"));
  m.def(
      "ppo_actor_loss",
      [](const std::vector<float>& new_lp, const std::vector<float>& old_lp,
         const std::vector<float>& adv, float eps) {
        const Shape s{new_lp.size()};
        return ppo_actor_loss(Tensor::from(s, new_lp), Tensor::from(s, old_lp),
                              Tensor::from(s, adv), eps)
            .item();
      },
      py::arg("new_logprobs"), py::arg("old_logprobs"), py::arg("advantages"), py::arg("eps") = 0.2f);
  m.def("ema_update", &ema_update, py::arg("ema"), py::arg("actor"), py::arg("decay"),
        "In place; returns the L2 norm of the change.");

  // perf model
  auto perf = m.def_submodule("perf", "Analytic step-3 throughput and cost model");
  py::class_<perf::HardwareSpec>(perf, "HardwareSpec")
      .def(py::init<>())
      .def_readwrite("name", &perf::HardwareSpec::name)
      .def_readwrite("gpus", &perf::HardwareSpec::gpus)
      .def_readwrite("mem_bytes", &perf::HardwareSpec::mem_bytes)
      .def_readwrite("peak_flops", &perf::HardwareSpec::peak_flops)
      .def_readwrite("bandwidth", &perf::HardwareSpec::bandwidth)
      .def_readwrite("price_per_hour", &perf::HardwareSpec::price_per_hour)
      .def_readwrite("train_mfu", &perf::HardwareSpec::train_mfu)
      .def_readwrite("gen_efficiency", &perf::HardwareSpec::gen_efficiency);
  py::class_<perf::WorkloadSpec>(perf, "WorkloadSpec")
      .def(py::init<>())
      .def_readwrite("name", &perf::WorkloadSpec::name)
      .def_readwrite("actor_params", &perf::WorkloadSpec::actor_params)
      .def_readwrite("small_params", &perf::WorkloadSpec::small_params)
      .def_readwrite("prompt_len", &perf::WorkloadSpec::prompt_len)
      .def_readwrite("gen_len", &perf::WorkloadSpec::gen_len)
      .def_readwrite("global_batch", &perf::WorkloadSpec::global_batch)
      .def_readwrite("per_sample_bytes", &perf::WorkloadSpec::per_sample_bytes);
  py::class_<perf::MemoryOptions>(perf, "MemoryOptions")
      .def(py::init<>())
      .def_readwrite("offload", &perf::MemoryOptions::offload)
      .def_readwrite("lora", &perf::MemoryOptions::lora)
      .def_readwrite("lora_fraction", &perf::MemoryOptions::lora_fraction);
  py::class_<perf::PerfReport>(perf, "PerfReport")
      .def_readonly("model", &perf::PerfReport::model)
      .def_readonly("gpus", &perf::PerfReport::gpus)
      .def_readonly("tp", &perf::PerfReport::tp)
      .def_readonly("batch_per_gpu", &perf::PerfReport::batch_per_gpu)
      .def_readonly("gen_seconds", &perf::PerfReport::gen_seconds)
      .def_readonly("train_seconds", &perf::PerfReport::train_seconds)
      .def_readonly("gen_tflops", &perf::PerfReport::gen_tflops)
      .def_readonly("train_tflops", &perf::PerfReport::train_tflops)
      .def_readonly("effective_tflops", &perf::PerfReport::effective_tflops)
      .def_readonly("epoch_hours", &perf::PerfReport::epoch_hours)
      .def_readonly("dollars", &perf::PerfReport::dollars)
      .def_readonly("feasible", &perf::PerfReport::feasible)
      .def_readonly("note", &perf::PerfReport::note);
  perf.def("hardware_preset", &perf::hardware_preset, py::arg("name"));
  perf.def("workload_preset", &perf::workload_preset, py::arg("name"));
  perf.def("gen_flop_fraction", &perf::gen_flop_fraction, py::arg("workload"));
  perf.def("evaluate", &perf::evaluate, py::arg("workload"), py::arg("hardware"), py::arg("gpus"),
           py::arg("options") = perf::MemoryOptions{});
  perf.def(
      "scaling_curve",
      [](const perf::WorkloadSpec& w, const perf::HardwareSpec& hw, const std::vector<int>& Ws) {
        const auto c = perf::scaling_curve(w, hw, Ws);
        return py::make_tuple(c.points, c.knee, c.knees);
      },
      py::arg("workload"), py::arg("hardware"), py::arg("gpus"),
      "Returns (reports, knee or None, knee count).");
  perf.def("cost_for_hours",
           [](double h, int gpus, double price) { return perf::cost_for_hours(h, gpus, price).dollars; },
           py::arg("hours"), py::arg("gpus"), py::arg("price_per_hour"));
  perf.def("feasible_single_gpu", &perf::feasible_single_gpu, py::arg("params"), py::arg("mem_bytes"),
           py::arg("k") = perf::kFeasibilityOverhead);
  perf.def("max_feasible_model", &perf::max_feasible_model, py::arg("mem_bytes"),
           py::arg("k") = perf::kFeasibilityOverhead);

  // orchestration
  m.def(
      "train",
      [](const std::string& config_json, std::optional<std::string> output_dir) {
        auto c = RunConfig::from_json(config_json);
        if (output_dir) c.output_dir = *output_dir;
        TrainReport r;
        {
          py::gil_scoped_release release;
          r = train_all(c);
        }
        py::dict out;
        py::list stages;
        for (const auto& s : r.stages) stages.append(py::make_tuple(s.stage, s.seconds));
        out["stages"] = stages;
        out["total_seconds"] = r.total_seconds;
        out["sft_eval_loss"] = py::make_tuple(r.sft.initial_eval_loss, r.sft.final_eval_loss);
        out["rm_accuracy"] = py::make_tuple(r.rm.initial_accuracy, r.rm.final_accuracy);
        py::list scores;
        for (const auto& p : r.ppo) scores.append(p.mean_rm_score);
        out["ppo_rm_scores"] = scores;
        out["output_dir"] = c.output_dir;
        return out;
      },
      py::arg("config_json"), py::arg("output_dir") = std::nullopt,
      "Runs SFT, RM and PPO from a JSON run config.");
  m.def(
      "chat_respond",
      [](const TransformerModel& model, const std::string& transcript, int max_new, int top_k,
         std::uint64_t seed) {
        ChatOptions o;
        o.greedy = top_k <= 0;
        o.top_k = top_k;
        o.max_new = max_new;
        o.seed = seed;
        const auto text = chat_respond(model, transcript, o, 0);
        // sampled bytes need not be valid UTF-8
        return py::reinterpret_steal<py::str>(
            PyUnicode_DecodeUTF8(text.data(), static_cast<py::ssize_t>(text.size()), "replace"));
      },
      py::arg("model"), py::arg("transcript"), py::arg("max_new") = 48, py::arg("top_k") = 0,
      py::arg("seed") = 1234);
}
