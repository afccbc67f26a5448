// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/perf.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "dsc/error.hpp"
#include "dsc/io.hpp"

namespace dsc::perf {

namespace {

struct OptShape {
  double params;
  int layers;
  int hidden;
};

// Published OPT configurations.
const std::map<std::string, OptShape, std::less<>>& opt_shapes() {
  static const std::map<std::string, OptShape, std::less<>> m{
      {"opt-1.3b", {1.3e9, 24, 2048}},  {"opt-2.7b", {2.7e9, 32, 2560}},
      {"opt-6.7b", {6.7e9, 32, 4096}},  {"opt-13b", {13e9, 40, 5120}},
      {"opt-30b", {30e9, 48, 7168}},    {"opt-66b", {66e9, 64, 9216}},
      {"opt-175b", {175e9, 96, 12288}},
  };
  return m;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (out.rfind("facebook/", 0) == 0) out = out.substr(9);
  return out;
}

}  // namespace

std::string_view to_string(Phase p) { return p == Phase::Gen ? "generation" : "training"; }

void HardwareSpec::validate() const {
  if (gpus < 1 || !(mem_bytes > 0) || !(peak_flops > 0) || !(bandwidth > 0) || !(price_per_hour > 0)) {
    throw ConfigError("hardware fields must be positive");
  }
  if (!(train_mfu > 0 && train_mfu <= 1) || !(gen_efficiency > 0 && gen_efficiency <= 1)) {
    throw ConfigError("efficiency factors must be in (0,1]");
  }
}

HardwareSpec hardware_preset(std::string_view name) {
  HardwareSpec h;
  const auto key = lower(name);
  if (key == "a100-40gb") return h;
  if (key == "a100-80gb") {
    h.name = "A100-80GB";
    h.mem_bytes = 80e9;
    h.bandwidth = 2039e9;
    return h;
  }
  if (key == "v100-32gb") {
    h.name = "V100-32GB";
    h.mem_bytes = 32e9;
    h.peak_flops = 125e12;
    h.bandwidth = 900e9;
    return h;
  }
  if (key == "a6000-48gb") {
    h.name = "A6000-48GB";
    h.mem_bytes = 48e9;
    h.peak_flops = 155e12;
    h.bandwidth = 768e9;
    return h;
  }
  throw ConfigError("unknown hardware preset '" + std::string(name) + "'");
}

std::vector<std::string> hardware_preset_names() {
  return {"A100-40GB", "A100-80GB", "V100-32GB", "A6000-48GB"};
}

void WorkloadSpec::validate() const {
  if (prompt_len <= 0 || gen_len <= 0) throw ConfigError("prompt and generation lengths must be > 0");
  if (global_batch < 1) throw ConfigError("global batch must be >= 1");
  if (!(actor_params > 0) || small_params < 0) throw ConfigError("parameter counts must be positive");
  if (ppo_epochs < 1) throw ConfigError("ppo epochs must be >= 1");
  if (!(per_sample_bytes > 0)) throw ConfigError("per-sample bytes must be > 0");
}

WorkloadSpec workload_preset(std::string_view name) {
  const auto key = lower(name);
  auto it = opt_shapes().find(key);
  if (it == opt_shapes().end()) throw ConfigError("unknown workload preset '" + std::string(name) + "'");
  WorkloadSpec w;
  w.name = key;
  w.actor_params = it->second.params;
  w.per_sample_bytes = 6.0 * it->second.layers * it->second.hidden * w.seq();
  return w;
}

std::vector<std::string> workload_preset_names() {
  std::vector<std::pair<double, std::string>> v;
  for (const auto& [k, s] : opt_shapes()) v.emplace_back(s.params, k);
  std::sort(v.begin(), v.end());
  std::vector<std::string> out;
  for (auto& [p, k] : v) out.push_back(k);
  return out;
}

double flops_phase(const WorkloadSpec& w, Phase phase) {
  const double N = w.actor_params, M = w.small_params, S = w.seq();
  if (phase == Phase::Gen) return 2.0 * N * S;
  // actor fwd+bwd, extra actor-sized forwards, critic fwd+bwd, reward fwd
  return w.ppo_epochs * ((6.0 * N + 2.0 * N * w.extra_pass) * S + 8.0 * M * S);
}

double gen_flop_fraction(const WorkloadSpec& w) {
  const double g = flops_phase(w, Phase::Gen);
  return g / (g + flops_phase(w, Phase::Train));
}

double phase_time(const WorkloadSpec& w, const HardwareSpec& hw, double batch, Phase phase, int W,
                  int tp) {
  if (batch < 1) throw ContractError("phase_time needs batch >= 1");
  if (W < 1 || tp < 1) throw ContractError("phase_time needs W, tp >= 1");
  const double N = w.actor_params;
  if (phase == Phase::Train) {
    // every GPU trains its own `batch` samples
    return flops_phase(w, Phase::Train) * batch * W / (hw.peak_flops * hw.train_mfu * W);
  }
  const double prefill = 2.0 * N * w.prompt_len * batch / (hw.peak_flops * hw.train_mfu);
  const double compute = 2.0 * N * batch * W / (hw.peak_flops * W);
  const double memory = (2.0 * N / tp) / (hw.bandwidth * hw.gen_efficiency);
  return prefill + w.gen_len * std::max(compute, memory);
}

double harmonic_throughput(std::span<const double> flop_fractions,
                           std::span<const double> throughputs) {
  if (flop_fractions.size() != throughputs.size() || flop_fractions.empty()) {
    throw DimensionError("harmonic_throughput needs matching nonempty inputs");
  }
  double denom = 0.0, total = 0.0;
  for (std::size_t i = 0; i < throughputs.size(); ++i) {
    denom += flop_fractions[i] / throughputs[i];
    total += flop_fractions[i];
  }
  return total / denom;
}

double effective_throughput(double gen_flops, double gen_seconds, double train_flops,
                            double train_seconds, int gpus) {
  return (gen_flops + train_flops) / (gen_seconds + train_seconds) / gpus;
}

double state_bytes(double params, int W, const MemoryOptions& o) {
  if (W < 1) throw ContractError("world size must be >= 1");
  // fp16 params 2, fp16 grads 2, fp32 master + Adam moments 12
  const double f = o.lora ? o.lora_fraction : 1.0;
  const double grads = 2.0 * f;
  const double optim = o.offload ? 0.0 : 12.0 * f;
  return (2.0 + grads + optim) * params / W;
}

int max_batch_per_gpu(const WorkloadSpec& w, const HardwareSpec& hw, int W, const MemoryOptions& o) {
  const double states = state_bytes(w.actor_params, W, o);
  if (states > hw.mem_bytes) {
    throw InfeasibleError("model states need " + fmt_num(states / 1e9) + " GB per GPU, " +
                          fmt_num(hw.mem_bytes / 1e9) + " GB available");
  }
  const double by_mem = std::floor((hw.mem_bytes - states) / w.per_sample_bytes);
  const double cap = std::floor(static_cast<double>(w.global_batch) / W);
  const double b = std::min(by_mem, cap);
  if (b < 1) {
    throw InfeasibleError("no room for a single sample per GPU at W=" + std::to_string(W));
  }
  return static_cast<int>(b);
}

int pick_tp(const WorkloadSpec& w, const HardwareSpec& hw, int W) {
  const int limit = std::min(8, W);
  int tp = 1;
  while (tp * 2 <= limit && 2.0 * w.actor_params / tp > 0.5 * hw.mem_bytes) tp *= 2;
  return tp;
}

PerfReport evaluate(const WorkloadSpec& w, const HardwareSpec& hw, int W, const MemoryOptions& o) {
  w.validate();
  hw.validate();
  PerfReport r;
  r.model = w.name;
  r.params = w.actor_params;
  r.gpus = W;
  r.tp = pick_tp(w, hw, W);
  try {
    r.batch_per_gpu = max_batch_per_gpu(w, hw, W, o);
  } catch (const InfeasibleError& e) {
    r.feasible = false;
    r.note = e.what();
    return r;
  }
  const double b = r.batch_per_gpu;
  r.gen_seconds = phase_time(w, hw, b, Phase::Gen, W, r.tp);
  r.train_seconds = phase_time(w, hw, b, Phase::Train, W, r.tp);
  const double gen_flops = flops_phase(w, Phase::Gen) * b * W;
  const double train_flops = flops_phase(w, Phase::Train) * b * W;
  r.gen_tflops = gen_flops / r.gen_seconds / W / 1e12;
  r.train_tflops = train_flops / r.train_seconds / W / 1e12;
  r.effective_tflops =
      effective_throughput(gen_flops, r.gen_seconds, train_flops, r.train_seconds, W) / 1e12;
  const double tokens_per_s = W * b * w.seq() / (r.gen_seconds + r.train_seconds);
  r.epoch_hours = w.epoch_tokens / tokens_per_s / 3600.0;
  r.dollars = cost_for_hours(r.epoch_hours, W, hw.price_per_hour).dollars;
  return r;
}

ScalingCurve scaling_curve(const WorkloadSpec& w, const HardwareSpec& hw, const std::vector<int>& Ws,
                           const MemoryOptions& o) {
  if (!std::is_sorted(Ws.begin(), Ws.end()) ||
      std::adjacent_find(Ws.begin(), Ws.end()) != Ws.end()) {
    throw ContractError("scaling_curve needs a strictly ascending W list");
  }
  ScalingCurve c;
  for (int W : Ws) c.points.push_back(evaluate(w, hw, W, o));
  // A segment is super-linear when total throughput grows faster than W,
  // i.e. when per-GPU throughput rises.
  int prev = 0;  // +1 super, -1 sub, 0 unknown
  for (std::size_t i = 0; i + 1 < c.points.size(); ++i) {
    const auto& a = c.points[i];
    const auto& b = c.points[i + 1];
    if (!a.feasible || !b.feasible) {
      prev = 0;
      continue;
    }
    const int kind = b.effective_tflops > a.effective_tflops ? 1 : -1;
    if (prev == 1 && kind == -1) {
      ++c.knees;
      if (!c.knee) c.knee = a.gpus;
    }
    prev = kind;
  }
  return c;
}

Cost cost_for_hours(double hours, int gpus, double price_per_hour) {
  return {hours, hours * gpus * price_per_hour};
}

Cost estimate_cost(const WorkloadSpec& w, const HardwareSpec& hw, int W, const MemoryOptions& o) {
  const auto r = evaluate(w, hw, W, o);
  if (!r.feasible) throw InfeasibleError(r.note);
  return {r.epoch_hours, r.dollars};
}

bool feasible_single_gpu(double params, double mem_bytes, double k) {
  return 2.0 * params * (1.0 + k) <= mem_bytes;
}

std::string max_feasible_model(double mem_bytes, double k) {
  std::string best;
  for (const auto& name : workload_preset_names()) {
    if (feasible_single_gpu(opt_shapes().find(name)->second.params, mem_bytes, k)) best = name;
  }
  return best;
}

std::string reports_csv(const std::vector<PerfReport>& reports) {
  std::ostringstream out;
  out << "model,N,gpus,tp,phase,seconds,tflops_per_gpu,hours,dollars,feasible\n";
  for (const auto& r : reports) {
    const auto row = [&](std::string_view phase, double secs, double tf) {
      out << r.model << ',' << fmt_num(r.params) << ',' << r.gpus << ',' << r.tp << ',' << phase
          << ',' << fmt_num(secs) << ',' << fmt_num(tf) << ',' << fmt_num(r.epoch_hours) << ','
          << fmt_num(r.dollars) << ',' << (r.feasible ? "true" : "false") << '\n';
    };
    row("generation", r.gen_seconds, r.gen_tflops);
    row("training", r.train_seconds, r.train_tflops);
    row("effective", r.gen_seconds + r.train_seconds, r.effective_tflops);
  }
  return out.str();
}

std::string scaling_svg(const ScalingCurve& curve, std::string_view title) {
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  std::vector<const PerfReport*> pts;
  double ymax = 0;
  for (const auto& p : curve.points) {
    if (!p.feasible) continue;
    pts.push_back(&p);
    ymax = std::max({ymax, p.gen_tflops, p.train_tflops, p.effective_tflops});
  }
  ymax = ymax > 0 ? ymax * 1.1 : 1.0;
  double xmin = 1, xmax = 2;
  if (!pts.empty()) {
    xmin = std::log2(pts.front()->gpus);
    xmax = std::log2(pts.back()->gpus);
    if (xmax <= xmin) xmax = xmin + 1;
  }
  const auto X = [&](int g) { return L + (std::log2(g) - xmin) / (xmax - xmin) * (W - L - R); };
  const auto Y = [&](double v) { return H - B - v / ymax * (H - T - B); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title
    << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  for (const auto* p : pts) {
    s << "<text x=\"" << X(p->gpus) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
      << p->gpus << "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4;
    s << "<text x=\"" << L - 6 << "\" y=\"" << Y(v) + 4 << "\" text-anchor=\"end\">"
      << fmt_num(std::round(v * 10) / 10) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">GPUs</text>\n";
  s << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
    << ")\" text-anchor=\"middle\">TFLOPs per GPU</text>\n";
  struct Series {
    const char* label;
    const char* color;
    double PerfReport::*field;
  };
  const Series series[] = {{"generation", "#d62728", &PerfReport::gen_tflops},
                           {"training", "#1f77b4", &PerfReport::train_tflops},
                           {"effective", "#2ca02c", &PerfReport::effective_tflops}};
  int row = 0;
  for (const auto& se : series) {
    s << "<polyline fill=\"none\" stroke=\"" << se.color << "\" stroke-width=\"2\" points=\"";
    for (const auto* p : pts) s << X(p->gpus) << ',' << Y(p->*se.field) << ' ';
    s << "\"/>\n";
    for (const auto* p : pts) {
      s << "<circle cx=\"" << X(p->gpus) << "\" cy=\"" << Y(p->*se.field) << "\" r=\"3\" fill=\""
        << se.color << "\"/>\n";
    }
    const double ly = T + 10 + 18 * row++;
    s << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly
      << "\" stroke=\"" << se.color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << se.label << "</text>\n";
  }
  if (curve.knee) {
    const double kx = X(*curve.knee);
    s << "<line x1=\"" << kx << "\" y1=\"" << T << "\" x2=\"" << kx << "\" y2=\"" << H - B
      << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    s << "<text x=\"" << kx + 4 << "\" y=\"" << T + 12 << "\" fill=\"gray\">knee</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace dsc::perf
