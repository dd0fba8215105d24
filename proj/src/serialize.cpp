// SPDX-License-Identifier: Apache-2.0

#include "zlora/serialize.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "zlora/errors.hpp"

namespace zlora {

nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    j["data"] = m.vec();
    return j;
}

Matrix matrix_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("rows") || !j.contains("cols") || !j.contains("data")) {
        throw ConfigError("matrix_from_json: expected object with rows/cols/data");
    }
    const int rows = j.at("rows").get<int>();
    const int cols = j.at("cols").get<int>();
    std::vector<double> data = j.at("data").get<std::vector<double>>();
    return Matrix(rows, cols, std::move(data));
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw KeyError("cannot open file: " + path);
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw KeyError("cannot write file: " + path);
    }
    out << content;
    if (!out) {
        throw KeyError("write failed: " + path);
    }
}

nlohmann::json read_json_file(const std::string& path) {
    const std::string text = read_text_file(path);
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("invalid JSON in " + path);
    }
    return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

std::string csv_double(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace zlora
