// SPDX-License-Identifier: Apache-2.0
//
// Regenerates the golden fixtures under tests/data. Run from anywhere:
//   gen_goldens <output-dir>
// Goldens pin deterministic outputs of a verified build; regenerate them
// only when a deliberate behavior change invalidates the old values.

#include <iostream>
#include <string>

#include <json.hpp>

#include "zlora/matrix.hpp"
#include "zlora/rng.hpp"
#include "zlora/serialize.hpp"
#include "zlora/toymodel.hpp"

using namespace zlora;

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: gen_goldens <output-dir>\n";
        return 2;
    }
    const std::string out_dir = argv[1];

    ModelConfig cfg;
    cfg.languages = {"de", "en"};
    const std::uint64_t seed = 0;
    ToyModel model(cfg, seed);
    auto params = model.named_params();
    for (const std::string& lang : cfg.languages) {
        Matrix* prompt = params.at("prompt." + lang);
        *prompt = Matrix(prompt->rows(), prompt->cols());
    }

    SplitMix64 rng(derive_seed(seed, "golden.x"));
    const Matrix x = Matrix::gaussian(cfg.seq_len, cfg.width, rng);
    const int chunk_len = cfg.chunk_lengths.back();

    nlohmann::json j;
    j["config"] = cfg.to_json();
    j["seed"] = seed;
    j["language"] = "de";
    j["chunk_len"] = chunk_len;
    j["x"] = matrix_to_json(x);
    j["y_full"] = matrix_to_json(model.forward(x, "de", std::nullopt));
    j["y_chunk"] = matrix_to_json(model.forward(x, "de", chunk_len));
    write_json_file(out_dir + "/golden_forward.json", j);
    std::cout << "wrote " << out_dir << "/golden_forward.json\n";
    return 0;
}
