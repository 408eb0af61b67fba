// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace bevcon {

// Decimal with 17 significant digits; round-trips IEEE doubles exactly.
std::string format_g17(double v);

// nlohmann's dump() uses shortest-round-trip floats; dataset and manifest
// files are specified to carry 17 significant digits, so they go through
// this writer instead. Keys are emitted in sorted order (nlohmann default),
// which keeps the output canonical.
std::string dump_json_17g(const nlohmann::json& j, int indent = 2);

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

std::string hash_hex(const std::string& content);  // 16-char fnv1a64

}  // namespace bevcon
