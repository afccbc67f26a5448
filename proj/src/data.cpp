// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dsc/error.hpp"
#include "dsc/model.hpp"

namespace dsc {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open dataset " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::vector<int> encode_sequence(const std::vector<int>& prompt, const std::vector<int>& response,
                                 std::size_t max_len, std::size_t& prompt_tokens) {
  // BOS + prompt + response + EOS with the prompt trimmed from the left first.
  std::vector<int> seq{kBos};
  const std::size_t fixed = 2 + response.size();
  std::size_t keep = 0;
  if (max_len > fixed) keep = std::min(prompt.size(), max_len - fixed);
  seq.insert(seq.end(), prompt.end() - static_cast<std::ptrdiff_t>(keep), prompt.end());
  prompt_tokens = keep;
  seq.insert(seq.end(), response.begin(), response.end());
  seq.push_back(kEos);
  if (seq.size() > max_len) seq.resize(max_len);
  return seq;
}

void append_row(Batch& b, const std::vector<int>& seq, std::size_t target_from) {
  const std::size_t base = b.ids.size();
  b.ids.resize(base + b.cols, kPad);
  b.mask.resize(base + b.cols, 0.0f);
  b.loss_mask.resize(base + b.cols, 0.0f);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    b.ids[base + t] = seq[t];
    b.mask[base + t] = 1.0f;
    if (t >= 1 && t >= target_from) b.loss_mask[base + t] = 1.0f;
  }
  ++b.rows;
}

}  // namespace

void UnifiedRecord::validate() const {
  if (prompt.empty()) throw SchemaError("record has an empty prompt");
  if (rejected && !chosen) throw SchemaError("record has a rejected response but no chosen one");
  if (chosen && rejected && *chosen == *rejected) {
    throw SchemaError("record has identical chosen and rejected responses");
  }
}

std::vector<UnifiedRecord> parse_dataset(std::string_view text, const std::string& source) {
  std::vector<UnifiedRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (is_blank(line)) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": malformed JSON (line " + std::to_string(line_no) + ")");
    }
    if (!j.is_object() || !j.contains("prompt") || !j["prompt"].is_string()) {
      throw ParseError(where + ": missing string field \"prompt\" (line " +
                       std::to_string(line_no) + ")");
    }
    UnifiedRecord r;
    r.prompt = j["prompt"].get<std::string>();
    r.source = source;
    for (const char* key : {"chosen", "rejected"}) {
      if (!j.contains(key) || j[key].is_null()) continue;
      if (!j[key].is_string()) {
        throw ParseError(where + ": field \"" + key + "\" must be a string (line " +
                         std::to_string(line_no) + ")");
      }
      (std::string_view(key) == "chosen" ? r.chosen : r.rejected) = j[key].get<std::string>();
    }
    try {
      r.validate();
    } catch (const SchemaError& e) {
      throw ParseError(where + ": " + e.what() + " (line " + std::to_string(line_no) + ")");
    }
    out.push_back(std::move(r));
  }
  if (out.empty()) throw EmptyDatasetError("dataset " + source + " has no records");
  return out;
}

std::vector<UnifiedRecord> load_dataset(const std::filesystem::path& path) {
  return parse_dataset(read_file(path), path.filename().string());
}

std::vector<UnifiedRecord> load_pretrain_corpus(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<UnifiedRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (is_blank(line)) continue;
    out.push_back({line, std::nullopt, std::nullopt, path.filename().string()});
  }
  if (out.empty()) throw EmptyDatasetError("pretraining corpus " + path.string() + " is empty");
  return out;
}

void require_pairwise(std::span<const UnifiedRecord> records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].is_pairwise()) {
      throw SchemaError("record " + std::to_string(i) + " from " + records[i].source +
                        " lacks a chosen/rejected pair");
    }
  }
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

std::vector<std::size_t> apportion(std::span<const double> weights, std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0.0)) throw ContractError("weights must have a positive sum");
  std::vector<std::size_t> parts(weights.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0.0 || !std::isfinite(weights[i])) {
      throw ContractError("weights must be finite and non-negative");
    }
    const double share = weights[i] / sum * static_cast<double>(total);
    parts[i] = static_cast<std::size_t>(std::floor(share));
    used += parts[i];
    rema.emplace_back(share - std::floor(share), i);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total && k < rema.size(); ++k, ++used) ++parts[rema[k].second];
  return parts;
}

std::vector<UnifiedRecord> blend(const std::vector<std::vector<UnifiedRecord>>& datasets,
                                 std::span<const double> weights, std::uint64_t seed,
                                 std::optional<std::size_t> target) {
  if (datasets.size() != weights.size()) {
    throw ContractError("blend needs one weight per dataset");
  }
  std::size_t total = 0;
  for (const auto& d : datasets) total += d.size();
  const auto counts = apportion(weights, target.value_or(total));
  std::vector<UnifiedRecord> out;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    if (counts[i] == 0) continue;
    if (datasets[i].empty()) throw ContractError("blend: dataset " + std::to_string(i) + " is empty");
    const auto perm = seeded_permutation(datasets[i].size(), seed + 0x5151u * (i + 1));
    for (std::size_t k = 0; k < counts[i]; ++k) out.push_back(datasets[i][perm[k % perm.size()]]);
  }
  const auto order = seeded_permutation(out.size(), seed);
  std::vector<UnifiedRecord> shuffled;
  shuffled.reserve(out.size());
  for (auto idx : order) shuffled.push_back(std::move(out[idx]));
  return shuffled;
}

StageSplit split_stages(const std::vector<UnifiedRecord>& records,
                        const std::array<double, 3>& fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0 || !std::isfinite(f)) throw ContractError("stage fractions must be non-negative");
    sum += f;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw ContractError("stage fractions must sum to 1");
  const auto sizes = apportion(fractions, records.size());
  const auto perm = seeded_permutation(records.size(), seed);
  StageSplit split;
  split.fractions = fractions;
  split.seed = seed;
  std::size_t at = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < sizes[s]; ++k, ++at) {
      split.indices[s].push_back(perm[at]);
      split.stages[s].push_back(records[perm[at]]);
    }
  }
  return split;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c) + 4);
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 4 && id < kTokenizerVocab) out.push_back(static_cast<char>(id - 4));
  }
  return out;
}

std::size_t Batch::length(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += mask[r * cols + c] > 0.0f ? 1 : 0;
  return n;
}

BatchSet make_batch(std::span<const UnifiedRecord> records, std::size_t max_len,
                    BatchPurpose purpose, bool response_only) {
  if (max_len < 2) throw ContractError("max_len must be at least 2");
  BatchSet set;
  set.primary.cols = max_len;
  if (purpose == BatchPurpose::Pairwise) set.rejected = Batch{0, max_len, {}, {}, {}};
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = "record " + std::to_string(i) + " (" + r.source + ")";
    if (r.prompt.empty()) throw SchemaError(where + ": empty prompt");
    const auto prompt = tokenize(r.prompt);
    switch (purpose) {
      case BatchPurpose::SFT: {
        if (!r.chosen) throw SchemaError(where + ": SFT batch needs a chosen response");
        std::size_t kept = 0;
        auto seq = encode_sequence(prompt, tokenize(*r.chosen), max_len, kept);
        append_row(set.primary, seq, response_only ? 1 + kept : 1);
        break;
      }
      case BatchPurpose::Pairwise: {
        if (!r.is_pairwise()) throw SchemaError(where + ": pairwise batch needs chosen and rejected");
        if (*r.chosen == *r.rejected) throw SchemaError(where + ": chosen equals rejected");
        std::size_t kept = 0;
        auto c = encode_sequence(prompt, tokenize(*r.chosen), max_len, kept);
        append_row(set.primary, c, response_only ? 1 + kept : 1);
        auto j = encode_sequence(prompt, tokenize(*r.rejected), max_len, kept);
        append_row(*set.rejected, j, response_only ? 1 + kept : 1);
        break;
      }
      case BatchPurpose::Prompt: {
        std::vector<int> seq{kBos};
        const std::size_t keep = std::min(prompt.size(), max_len - 1);
        seq.insert(seq.end(), prompt.end() - static_cast<std::ptrdiff_t>(keep), prompt.end());
        append_row(set.primary, seq, 1);
        break;
      }
      case BatchPurpose::Pretrain: {
        std::vector<int> seq{kBos};
        seq.insert(seq.end(), prompt.begin(), prompt.end());
        seq.push_back(kEos);
        if (seq.size() > max_len) seq.resize(max_len);
        append_row(set.primary, seq, 1);
        break;
      }
    }
  }
  return set;
}

}  // namespace dsc
