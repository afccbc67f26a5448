// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dsc/tensor.hpp"

namespace dsc {

/// Reserved token ids shared by every vocabulary.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

enum class HeadKind { LM, Scalar };

std::string_view to_string(HeadKind kind);
HeadKind head_kind_from_string(std::string_view s);

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 260;
  int max_seq_len = 128;
  HeadKind head = HeadKind::LM;

  int d_head() const { return d_model / n_heads; }
  /// Throws ConfigError when an invariant is violated.
  void validate() const;
  /// Same transformer body (everything but the head).
  bool same_body(const ModelConfig& other) const;
  bool operator==(const ModelConfig&) const = default;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
};

/// Toy configurations named after the OPT family, e.g. "opt-350m-toy". The
/// Hugging Face style "facebook/opt-350m" resolves to the same preset.
ModelConfig model_preset(std::string_view name, HeadKind head = HeadKind::LM);
std::vector<std::string> model_preset_names();

/// Pre-LN GPT with learned positions. Parameters live in a fixed canonical
/// order which is also the checkpoint order.
class TransformerModel {
 public:
  struct Layer {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor wfc, bfc, wproj, bproj;
  };

  TransformerModel() = default;
  /// Gaussian init from a seeded generator.
  TransformerModel(ModelConfig config, std::uint64_t seed);
  /// Zero-initialized parameters with the right shapes.
  static TransformerModel zeros(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  std::size_t num_parameters() const;

  const Tensor& wte() const { return params_[0]; }
  const Tensor& wpe() const { return params_[1]; }
  const Layer& layer(int i) const { return layers_[static_cast<std::size_t>(i)]; }
  const Tensor& lnf_g() const { return params_[lnf_index_]; }
  const Tensor& lnf_b() const { return params_[lnf_index_ + 1]; }
  /// LM: [d, V]. Scalar: [d, 1].
  const Tensor& head_w() const { return params_[lnf_index_ + 2]; }
  /// Scalar head bias [1]; undefined for LM heads.
  const Tensor& head_b() const;

  /// Deep copy, detached from any graph.
  TransformerModel clone() const;
  void set_requires_grad(bool on);
  void zero_grad();

  /// Copies every parameter except the head from `other` (same body required).
  void copy_body_from(const TransformerModel& other);
  /// Overwrites parameter values; shapes must match.
  void assign(const std::vector<std::vector<float>>& values);
  std::vector<std::vector<float>> values() const;

 private:
  void build(ModelConfig config);

  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<Layer> layers_;
  std::size_t lnf_index_ = 0;
};

/// Parameter names and shapes in canonical order for a configuration.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

/// Full causal pass over tokens[batch][len] (row-major). LM heads return
/// logits [batch, len, V]; scalar heads return values [batch, len].
Tensor forward_full(const TransformerModel& model, std::span<const int> tokens, std::size_t batch,
                    std::size_t len);

/// Index of the last non-pad token, or -1 when the row is all padding.
int last_non_pad(std::span<const int> tokens);

/// Scalar-head output at the last non-pad position.
float scalar_score(const TransformerModel& model, std::span<const int> tokens);

/// Differentiable version of scalar_score; returns a scalar tensor.
Tensor scalar_score_tensor(const TransformerModel& model, std::span<const int> tokens);

}  // namespace dsc
