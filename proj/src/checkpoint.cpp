// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dsc/error.hpp"

namespace dsc {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

}  // namespace

std::string serialize_checkpoint(const TransformerModel& model) {
  const std::string header = model.config().to_json();
  std::string out(kCheckpointMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out.reserve(out.size() + model.num_parameters() * 4);
  for (const auto& p : model.params()) {
    for (float f : p.data()) put_f32(out, f);
  }
  return out;
}

TransformerModel deserialize_checkpoint(const std::string& bytes,
                                        const std::optional<ModelConfig>& expected) {
  if (bytes.size() < 4) throw TruncatedError("checkpoint truncated before magic");
  if (bytes.compare(0, 3, "DSC") != 0) throw BadMagicError("not a DSC checkpoint (bad magic)");
  if (bytes[3] != kCheckpointMagic[3]) {
    throw UnsupportedVersionError("unsupported checkpoint version '" + bytes.substr(0, 4) + "'");
  }
  if (bytes.size() < 8) throw TruncatedError("checkpoint truncated in header length");
  const std::size_t header_len = get_u32(bytes, 4);
  if (bytes.size() < 8 + header_len) throw TruncatedError("checkpoint truncated in header");
  const ModelConfig config = ModelConfig::from_json(bytes.substr(8, header_len));
  if (expected && !(*expected == config)) {
    throw ConfigMismatchError("checkpoint config " + config.to_json() + " does not match expected " +
                              expected->to_json());
  }
  TransformerModel model = TransformerModel::zeros(config);
  const std::size_t need = 8 + header_len + model.num_parameters() * 4;
  if (bytes.size() < need) {
    throw TruncatedError("checkpoint truncated: " + std::to_string(bytes.size()) + " of " +
                         std::to_string(need) + " bytes");
  }
  if (bytes.size() > need) throw CheckpointError("trailing bytes after checkpoint payload");
  std::size_t at = 8 + header_len;
  for (auto& p : model.params()) {
    for (auto& f : p.data()) {
      f = std::bit_cast<float>(get_u32(bytes, at));
      at += 4;
    }
  }
  return model;
}

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

TransformerModel load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ModelConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expected);
}

}  // namespace dsc
