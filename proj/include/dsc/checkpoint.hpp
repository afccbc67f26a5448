// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "dsc/model.hpp"

namespace dsc {

/// Layout: "DSC1", u32 little-endian header length, header (ModelConfig as
/// JSON), then every parameter in canonical order as little-endian float32.
inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'C', '1'};

std::string serialize_checkpoint(const TransformerModel& model);
/// Throws BadMagicError, UnsupportedVersionError, TruncatedError or
/// ConfigMismatchError (when `expected` is given and differs).
TransformerModel deserialize_checkpoint(const std::string& bytes,
                                        const std::optional<ModelConfig>& expected = std::nullopt);

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path);
TransformerModel load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace dsc
