// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include <json.hpp>

#include "zlora/matrix.hpp"

namespace zlora {

/// Matrix as {"rows": R, "cols": C, "data": [row-major doubles]}.
/// Doubles survive a write/read cycle bit for bit.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// Reads a whole file; throws KeyError if the file cannot be opened.
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

nlohmann::json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

/// Shortest decimal string that round-trips the double exactly.
std::string csv_double(double v);

} // namespace zlora
