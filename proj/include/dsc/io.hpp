// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

namespace dsc {

/// Shortest-stable "%.9g" rendering used by every CSV the tools emit.
std::string fmt_num(double v);

/// Writes the whole string, creating parent directories. Throws Error on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace dsc
