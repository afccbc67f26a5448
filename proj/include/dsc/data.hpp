// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dsc {

/// Common record shape every source dataset is converted into.
struct UnifiedRecord {
  std::string prompt;
  std::optional<std::string> chosen;
  std::optional<std::string> rejected;
  std::string source;

  bool is_pairwise() const { return chosen.has_value() && rejected.has_value(); }
  /// Throws SchemaError on an empty prompt, a lone rejected response, or
  /// identical chosen/rejected texts.
  void validate() const;
};

/// JSONL with {"prompt": str, "chosen": str?, "rejected": str?} per line.
/// Blank lines are skipped; errors name the 1-based line number.
std::vector<UnifiedRecord> load_dataset(const std::filesystem::path& path);
std::vector<UnifiedRecord> parse_dataset(std::string_view text, const std::string& source);

/// Newline-delimited UTF-8 documents; each becomes a prompt-only record.
std::vector<UnifiedRecord> load_pretrain_corpus(const std::filesystem::path& path);

/// Throws SchemaError naming the first record without a preference pair.
void require_pairwise(std::span<const UnifiedRecord> records);

/// Fisher-Yates permutation of 0..n-1 driven by mt19937_64(seed).
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

/// Splits `total` into integer parts proportional to `weights` (largest
/// remainder, ties to the lower index). Each part is within 1 of its share.
std::vector<std::size_t> apportion(std::span<const double> weights, std::size_t total);

/// Mixes datasets so source i contributes round(w_i / sum(w) * target)
/// records (upsampling by cycling when a source is short), then shuffles.
/// `target` defaults to the total number of input records.
std::vector<UnifiedRecord> blend(const std::vector<std::vector<UnifiedRecord>>& datasets,
                                 std::span<const double> weights, std::uint64_t seed,
                                 std::optional<std::size_t> target = std::nullopt);

struct StageSplit {
  std::array<std::vector<UnifiedRecord>, 3> stages;
  std::array<std::vector<std::size_t>, 3> indices;  // positions in the input list
  std::array<double, 3> fractions{};
  std::uint64_t seed = 0;
};

/// Disjoint, exhaustive split of records into the three training stages.
StageSplit split_stages(const std::vector<UnifiedRecord>& records,
                        const std::array<double, 3>& fractions, std::uint64_t seed);

/// Byte-level tokenizer: byte b maps to id b + 4; ids 0..3 are PAD/BOS/EOS/UNK.
inline constexpr int kTokenizerVocab = 260;
std::vector<int> tokenize(std::string_view text);
/// Special ids are dropped.
std::string detokenize(std::span<const int> ids);

enum class BatchPurpose { SFT, Pairwise, Prompt, Pretrain };

/// Right-padded [rows][cols] id matrix. `mask` marks real tokens; `loss_mask`
/// marks positions whose token is a training target.
struct Batch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;
  std::vector<float> mask;
  std::vector<float> loss_mask;

  std::span<const int> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }
  std::size_t length(std::size_t r) const;
};

struct BatchSet {
  Batch primary;                 // chosen side for PAIRWISE
  std::optional<Batch> rejected;  // PAIRWISE only
};

/// Sequences: SFT/PAIRWISE = BOS prompt response EOS, PROMPT = BOS prompt,
/// PRETRAIN = BOS text EOS. Over-long prompts lose their oldest tokens;
/// pretraining text is cut at the end. With `response_only` the prompt is
/// excluded from loss_mask.
BatchSet make_batch(std::span<const UnifiedRecord> records, std::size_t max_len,
                    BatchPurpose purpose, bool response_only = false);

}  // namespace dsc
