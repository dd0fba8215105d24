// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one JSON document that pins everything a run
// needs. Parsing is strict: unknown keys anywhere in the tree are rejected
// with their full path, so a typo cannot silently fall back to a default.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "zlora/synthdata.hpp"
#include "zlora/toymodel.hpp"
#include "zlora/training.hpp"

namespace zlora {

struct DataConfig {
    std::map<std::string, std::string> tiers;  // language -> high|mid|low
    LongTailProfile profile;
    int eval_count = 32;
    double noise_ratio = 0.01;
    bool domain_mismatch = false;
    double c_sh = 1.0;
    double c_sp = 1.0;
    int teacher_rank = 0;  // 0: follow lora.r
};

struct WarmStartSpec {
    // "auto": the same run's plain ZipperSoft cell at the first seed;
    // otherwise a path to a training checkpoint JSON.
    std::string source = "auto";
    WarmStartFlags flags;
};

struct RunConfig {
    ModelConfig model;
    // "default" (built-in 12-language table), "identity", or a file path.
    // Files may cover a superset of the model languages; the matching
    // principal block is used.
    std::string similarity = "default";
    DataConfig data;
    std::vector<std::string> source_languages;
    std::vector<std::string> variants;  // variant names, plus "ZipperSoft+initB"
    std::vector<std::uint64_t> seeds = {0};
    StageConfig stage1;
    StageConfig stage2;
    bool chunked = false;
    WarmStartSpec warm_start;
    bool reinit_head_adapter = false;
    bool export_datasets = false;
    std::string out_dir = "runs/out";

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::string& path);
};

/// Splits a variant token into the variant and whether it requests the
/// warm-started flavor ("ZipperSoft+initB" -> {ZipperSoft, true}).
std::pair<Variant, bool> parse_variant_token(const std::string& token);

/// FNV digest of the canonical serialized config, as 16 hex digits. Every
/// artifact a run emits carries this value.
std::string config_hash_hex(const RunConfig& rc);

/// A config with the documented defaults: the built-in 12-language set,
/// long-tailed counts, all six variants plus the warm-started ZipperSoft,
/// and five seeds.
RunConfig default_run_config();

/// Resolves the similarity selector and restricts it to the model's
/// languages (principal sub-block, order-canonical).
SimilarityTarget resolve_similarity(const RunConfig& rc);

/// Principal sub-block of `sim` for exactly `langs`; every requested
/// language must be present in `sim`.
SimilarityTarget subset_similarity(const SimilarityTarget& sim,
                                   const std::vector<std::string>& langs);

}  // namespace zlora
