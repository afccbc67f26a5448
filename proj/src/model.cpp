// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/model.hpp"

#include <cmath>
#include <map>
#include <random>

#include <json.hpp>

#include "dsc/error.hpp"
#include "dsc/ops.hpp"

namespace dsc {

namespace {

constexpr std::size_t kPerLayer = 16;

struct PresetShape {
  int layers, heads, d_model, d_ff, max_seq;
};

const std::map<std::string, PresetShape, std::less<>>& presets() {
  static const std::map<std::string, PresetShape, std::less<>> table = {
      {"opt-125m-toy", {2, 4, 64, 256, 128}},   {"opt-350m-toy", {4, 4, 128, 512, 128}},
      {"opt-1.3b-toy", {6, 6, 192, 768, 256}},  {"opt-2.7b-toy", {6, 8, 256, 1024, 256}},
      {"opt-6.7b-toy", {8, 8, 256, 1024, 256}}, {"opt-13b-toy", {8, 8, 320, 1280, 256}},
  };
  return table;
}

}  // namespace

std::string_view to_string(HeadKind kind) { return kind == HeadKind::LM ? "lm" : "scalar"; }

HeadKind head_kind_from_string(std::string_view s) {
  if (s == "lm") return HeadKind::LM;
  if (s == "scalar") return HeadKind::Scalar;
  throw ConfigError("unknown head kind '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_seq_len < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4 (pad/bos/eos/unk are reserved)");
}

bool ModelConfig::same_body(const ModelConfig& o) const {
  return n_layers == o.n_layers && n_heads == o.n_heads && d_model == o.d_model &&
         d_ff == o.d_ff && vocab_size == o.vocab_size && max_seq_len == o.max_seq_len;
}

std::string ModelConfig::to_json() const {
  nlohmann::json j = {{"n_layers", n_layers}, {"n_heads", n_heads},     {"d_model", d_model},
                      {"d_ff", d_ff},         {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
                      {"head", std::string(to_string(head))}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  ModelConfig c;
  try {
    auto j = nlohmann::json::parse(text);
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.head = head_kind_from_string(j.at("head").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig model_preset(std::string_view name, HeadKind head) {
  std::string key(name);
  if (key.starts_with("facebook/")) key = key.substr(9) + "-toy";
  auto it = presets().find(key);
  if (it == presets().end()) throw ConfigError("unknown model preset '" + std::string(name) + "'");
  const auto& p = it->second;
  ModelConfig c;
  c.n_layers = p.layers;
  c.n_heads = p.heads;
  c.d_model = p.d_model;
  c.d_ff = p.d_ff;
  c.max_seq_len = p.max_seq;
  c.vocab_size = 260;
  c.head = head;
  return c;
}

std::vector<std::string> model_preset_names() {
  std::vector<std::string> out;
  for (const auto& [k, v] : presets()) out.push_back(k);
  return out;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"wte", {v, d}});
  out.push_back({"wpe", {static_cast<std::size_t>(c.max_seq_len), d}});
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "h" + std::to_string(i) + ".";
    out.push_back({p + "ln1.g", {d}});
    out.push_back({p + "ln1.b", {d}});
    out.push_back({p + "attn.wq", {d, d}});
    out.push_back({p + "attn.bq", {d}});
    out.push_back({p + "attn.wk", {d, d}});
    out.push_back({p + "attn.bk", {d}});
    out.push_back({p + "attn.wv", {d, d}});
    out.push_back({p + "attn.bv", {d}});
    out.push_back({p + "attn.wo", {d, d}});
    out.push_back({p + "attn.bo", {d}});
    out.push_back({p + "ln2.g", {d}});
    out.push_back({p + "ln2.b", {d}});
    out.push_back({p + "mlp.wfc", {d, f}});
    out.push_back({p + "mlp.bfc", {f}});
    out.push_back({p + "mlp.wproj", {f, d}});
    out.push_back({p + "mlp.bproj", {d}});
  }
  out.push_back({"lnf.g", {d}});
  out.push_back({"lnf.b", {d}});
  if (c.head == HeadKind::LM) {
    out.push_back({"lm_head.w", {d, v}});
  } else {
    out.push_back({"v_head.w", {d, 1}});
    out.push_back({"v_head.b", {1}});
  }
  return out;
}

void TransformerModel::build(ModelConfig config) {
  config_ = config;
  params_.clear();
  names_.clear();
  for (auto& [name, shape] : parameter_layout(config_)) {
    auto t = Tensor::zeros(shape);
    t.set_name(name);
    params_.push_back(t);
    names_.push_back(name);
  }
  layers_.clear();
  for (int i = 0; i < config_.n_layers; ++i) {
    const auto* p = params_.data() + 2 + kPerLayer * static_cast<std::size_t>(i);
    layers_.push_back(Layer{p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9], p[10],
                            p[11], p[12], p[13], p[14], p[15]});
  }
  lnf_index_ = 2 + kPerLayer * static_cast<std::size_t>(config_.n_layers);
}

TransformerModel TransformerModel::zeros(ModelConfig config) {
  TransformerModel m;
  m.build(config);
  return m;
}

TransformerModel::TransformerModel(ModelConfig config, std::uint64_t seed) {
  build(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float out_std = 0.02f / std::sqrt(2.0f * static_cast<float>(config_.n_layers));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& n = names_[i];
    auto data = params_[i].data();
    float std_dev = 0.0f;
    if (n.ends_with(".g")) {
      std::fill(data.begin(), data.end(), 1.0f);
      continue;
    }
    if (n == "wte" || n.ends_with(".wq") || n.ends_with(".wk") || n.ends_with(".wv") ||
        n.ends_with(".wfc") || n.starts_with("lm_head") || n == "v_head.w") {
      std_dev = 0.02f;
    } else if (n == "wpe") {
      std_dev = 0.01f;
    } else if (n.ends_with(".wo") || n.ends_with(".wproj")) {
      std_dev = out_std;
    }
    for (auto& x : data) x = std_dev == 0.0f ? 0.0f : std_dev * normal(rng);
  }
}

std::size_t TransformerModel::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

const Tensor& TransformerModel::head_b() const {
  if (config_.head != HeadKind::Scalar) throw HeadKindError("LM head has no bias");
  return params_[lnf_index_ + 3];
}

TransformerModel TransformerModel::clone() const {
  TransformerModel m = zeros(config_);
  m.assign(values());
  return m;
}

void TransformerModel::set_requires_grad(bool on) {
  for (auto& p : params_) p.set_requires_grad(on);
}

void TransformerModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void TransformerModel::copy_body_from(const TransformerModel& other) {
  if (!config_.same_body(other.config_)) throw ConfigMismatchError("model bodies differ");
  for (std::size_t i = 0; i < lnf_index_ + 2; ++i) {
    auto src = other.params_[i].data();
    std::copy(src.begin(), src.end(), params_[i].data().begin());
  }
}

void TransformerModel::assign(const std::vector<std::vector<float>>& values) {
  if (values.size() != params_.size()) throw DimensionError("assign: parameter count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (values[i].size() != params_[i].numel()) {
      throw DimensionError("assign: size mismatch for " + names_[i]);
    }
    std::copy(values[i].begin(), values[i].end(), params_[i].data().begin());
  }
}

std::vector<std::vector<float>> TransformerModel::values() const {
  std::vector<std::vector<float>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

Tensor forward_full(const TransformerModel& model, std::span<const int> tokens, std::size_t batch,
                    std::size_t len) {
  const auto& c = model.config();
  if (tokens.size() != batch * len) throw DimensionError("tokens must hold batch*len ids");
  if (len > static_cast<std::size_t>(c.max_seq_len)) {
    throw LengthError("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                      std::to_string(c.max_seq_len));
  }
  if (batch == 0 || len == 0) throw ContractError("forward_full on an empty batch");
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto h = static_cast<std::size_t>(c.n_heads);
  const auto dh = static_cast<std::size_t>(c.d_head());

  std::vector<int> positions(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) positions[b * len + t] = static_cast<int>(t);
  }
  Tensor x = add(embedding(model.wte(), tokens, {batch, len}),
                 embedding(model.wpe(), positions, {batch, len}));
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  auto split_heads = [&](const Tensor& t) {
    return transpose(reshape(t, {batch, len, h, dh}), 1, 2);
  };
  for (int i = 0; i < c.n_layers; ++i) {
    const auto& L = model.layer(i);
    Tensor a = layer_norm(x, L.ln1_g, L.ln1_b);
    Tensor q = split_heads(add(matmul(a, L.wq), L.bq));
    Tensor k = split_heads(add(matmul(a, L.wk), L.bk));
    Tensor v = split_heads(add(matmul(a, L.wv), L.bv));
    Tensor p = softmax(causal_scores(q, k, att_scale));
    Tensor o = reshape(transpose(matmul(p, v), 1, 2), {batch, len, d});
    x = add(x, add(matmul(o, L.wo), L.bo));
    Tensor m = layer_norm(x, L.ln2_g, L.ln2_b);
    Tensor f = gelu(add(matmul(m, L.wfc), L.bfc));
    x = add(x, add(matmul(f, L.wproj), L.bproj));
  }
  x = layer_norm(x, model.lnf_g(), model.lnf_b());
  if (c.head == HeadKind::LM) return matmul(x, model.head_w());
  return reshape(add(matmul(x, model.head_w()), model.head_b()), {batch, len});
}

int last_non_pad(std::span<const int> tokens) {
  for (std::size_t i = tokens.size(); i-- > 0;) {
    if (tokens[i] != kPad) return static_cast<int>(i);
  }
  return -1;
}

Tensor scalar_score_tensor(const TransformerModel& model, std::span<const int> tokens) {
  if (model.config().head != HeadKind::Scalar) {
    throw HeadKindError("scalar_score needs a scalar-head model");
  }
  const int last = last_non_pad(tokens);
  if (last < 0) throw ContractError("scalar_score on an all-pad sequence");
  const auto n = static_cast<std::size_t>(last) + 1;
  Tensor values = forward_full(model, tokens.first(n), 1, n);
  return reshape(slice(values, 1, n - 1, n), {});
}

float scalar_score(const TransformerModel& model, std::span<const int> tokens) {
  NoGradGuard guard;
  return scalar_score_tensor(model, tokens).item();
}

}  // namespace dsc
