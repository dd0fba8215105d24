// SPDX-License-Identifier: Apache-2.0

#include "zlora/runconfig.hpp"

#include <algorithm>
#include <set>

#include "zlora/errors.hpp"
#include "zlora/rng.hpp"
#include "zlora/router.hpp"
#include "zlora/serialize.hpp"

namespace zlora {

namespace {

/// Tracks which keys of one JSON object were consumed; anything left over
/// is reported with its full path.
class FieldReader {
public:
    FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(path_ + ": expected an object");
        }
    }

    const nlohmann::json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    template <typename T>
    void load(const std::string& key, T& out) {
        if (const nlohmann::json* v = find(key)) {
            try {
                out = v->get<T>();
            } catch (const nlohmann::json::exception&) {
                throw ConfigError(path_ + "." + key + ": wrong type");
            }
        }
    }

    std::string sub(const std::string& key) const { return path_ + "." + key; }

    void finish() const {
        std::vector<std::string> unknown;
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (seen_.count(it.key()) == 0) {
                unknown.push_back(path_ + "." + it.key());
            }
        }
        if (!unknown.empty()) {
            std::string msg = "unknown config field";
            if (unknown.size() > 1) msg += "s";
            msg += ":";
            for (const auto& u : unknown) msg += " " + u;
            throw ConfigError(msg);
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void parse_model(const nlohmann::json& j, const std::string& path, ModelConfig& m) {
    FieldReader r(j, path);
    r.load("width", m.width);
    r.load("depth", m.depth);
    r.load("seq_len", m.seq_len);
    r.load("stack_factor", m.stack_factor);
    r.load("target_dim", m.target_dim);
    r.load("d_lid", m.d_lid);
    r.load("chunk_lengths", m.chunk_lengths);
    r.load("languages", m.languages);
    if (const nlohmann::json* lj = r.find("lora")) {
        FieldReader lr(*lj, r.sub("lora"));
        lr.load("r", m.lora.r);
        lr.load("alpha", m.lora.alpha);
        lr.load("tau", m.lora.tau);
        lr.load("k", m.lora.k);
        lr.load("r_s", m.lora.r_s);
        lr.load("r_p", m.lora.r_p);
        lr.load("fly_density", m.lora.fly_density);
        if (const nlohmann::json* p = lr.find("hard_polarity")) {
            m.lora.hard_polarity = polarity_from_string(p->get<std::string>());
        }
        lr.finish();
    }
    r.finish();
}

void parse_data(const nlohmann::json& j, const std::string& path, DataConfig& d) {
    FieldReader r(j, path);
    r.load("tiers", d.tiers);
    if (const nlohmann::json* pj = r.find("profile")) {
        FieldReader pr(*pj, r.sub("profile"));
        pr.load("high", d.profile.high);
        pr.load("mid", d.profile.mid);
        pr.load("low", d.profile.low);
        pr.finish();
    }
    r.load("eval_count", d.eval_count);
    r.load("noise_ratio", d.noise_ratio);
    r.load("domain_mismatch", d.domain_mismatch);
    r.load("c_sh", d.c_sh);
    r.load("c_sp", d.c_sp);
    r.load("teacher_rank", d.teacher_rank);
    r.finish();
}

void parse_stage(const nlohmann::json& j, const std::string& path, StageConfig& s) {
    FieldReader r(j, path);
    r.load("steps", s.steps);
    r.load("batch_size", s.batch_size);
    r.load("base_lr", s.base_lr);
    r.load("warmup_ratio", s.warmup_ratio);
    r.load("schedule", s.schedule);
    r.load("adapters_only", s.adapters_only);
    r.load("train_lid", s.train_lid);
    r.finish();
}

void parse_warm(const nlohmann::json& j, const std::string& path, WarmStartSpec& w) {
    FieldReader r(j, path);
    r.load("source", w.source);
    r.load("load_b_shared", w.flags.load_b_shared);
    r.load("load_b_spec", w.flags.load_b_spec);
    r.load("load_router", w.flags.load_router);
    r.finish();
}

}  // namespace

std::pair<Variant, bool> parse_variant_token(const std::string& token) {
    const std::string suffix = "+initB";
    std::string name = token;
    bool warm = false;
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        warm = true;
        name.resize(name.size() - suffix.size());
    }
    return {variant_from_string(name), warm};
}

void RunConfig::validate() const {
    model.validate();
    stage1.validate();
    stage2.validate();
    if (stage1.stage != 1 || stage2.stage != 2) {
        throw ConfigError("stage blocks carry fixed stage numbers");
    }
    if (stage1.adapters_only) {
        throw ConfigError("stage1.adapters_only is not meaningful: stage 1 has no encoder adapters");
    }
    if (similarity.empty()) {
        throw ConfigError("similarity must be \"default\", \"identity\", or a file path");
    }
    if (variants.empty()) {
        throw ConfigError("variants must name at least one adapter variant");
    }
    for (const auto& token : variants) {
        (void)parse_variant_token(token);  // throws ConfigError on bad names
    }
    if (seeds.empty()) {
        throw ConfigError("seeds must list at least one seed");
    }
    if (source_languages.empty()) {
        throw ConfigError("source_languages must name at least one language");
    }
    const std::set<std::string> langs(model.languages.begin(), model.languages.end());
    for (const auto& l : source_languages) {
        if (langs.count(l) == 0) {
            throw ConfigError("source language " + l + " is not in model.languages");
        }
    }
    std::set<std::string> tier_langs;
    for (const auto& [lang, tier] : data.tiers) {
        (void)tier;
        tier_langs.insert(lang);
    }
    if (tier_langs != langs) {
        throw ConfigError("data.tiers must assign exactly the model languages");
    }
    (void)long_tail_sizes(data.profile, data.tiers);  // tier names and sizes
    if (data.eval_count < 1) {
        throw ConfigError("data.eval_count must be >= 1");
    }
    if (data.noise_ratio < 0.0) {
        throw ConfigError("data.noise_ratio must be non-negative");
    }
    if (data.c_sh < 0.0 || data.c_sp < 0.0) {
        throw ConfigError("data.c_sh and data.c_sp must be non-negative");
    }
    if (out_dir.empty()) {
        throw ConfigError("out_dir must not be empty");
    }
    if (warm_start.source.empty()) {
        throw ConfigError("warm_start.source must be \"auto\" or a checkpoint path");
    }
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["model"] = model.to_json();
    j["similarity"] = similarity;
    nlohmann::json dj;
    dj["tiers"] = data.tiers;
    dj["profile"] = {{"high", data.profile.high},
                     {"mid", data.profile.mid},
                     {"low", data.profile.low}};
    dj["eval_count"] = data.eval_count;
    dj["noise_ratio"] = data.noise_ratio;
    dj["domain_mismatch"] = data.domain_mismatch;
    dj["c_sh"] = data.c_sh;
    dj["c_sp"] = data.c_sp;
    dj["teacher_rank"] = data.teacher_rank;
    j["data"] = std::move(dj);
    j["source_languages"] = source_languages;
    j["variants"] = variants;
    j["seeds"] = seeds;
    auto stage_json = [](const StageConfig& s) {
        nlohmann::json sj;
        sj["steps"] = s.steps;
        sj["batch_size"] = s.batch_size;
        sj["base_lr"] = s.base_lr;
        sj["warmup_ratio"] = s.warmup_ratio;
        sj["schedule"] = s.schedule;
        sj["adapters_only"] = s.adapters_only;
        sj["train_lid"] = s.train_lid;
        return sj;
    };
    j["stage1"] = stage_json(stage1);
    j["stage2"] = stage_json(stage2);
    j["chunked"] = chunked;
    nlohmann::json wj;
    wj["source"] = warm_start.source;
    wj["load_b_shared"] = warm_start.flags.load_b_shared;
    wj["load_b_spec"] = warm_start.flags.load_b_spec;
    wj["load_router"] = warm_start.flags.load_router;
    j["warm_start"] = std::move(wj);
    j["reinit_head_adapter"] = reinit_head_adapter;
    j["export_datasets"] = export_datasets;
    j["out_dir"] = out_dir;
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig rc = default_run_config();
    FieldReader r(j, "config");
    if (const nlohmann::json* mj = r.find("model")) {
        parse_model(*mj, r.sub("model"), rc.model);
        // A fresh language list invalidates the default tier/source setup;
        // require the config to restate them unless they still fit.
    }
    r.load("similarity", rc.similarity);
    if (const nlohmann::json* dj = r.find("data")) {
        parse_data(*dj, r.sub("data"), rc.data);
    }
    r.load("source_languages", rc.source_languages);
    r.load("variants", rc.variants);
    r.load("seeds", rc.seeds);
    if (const nlohmann::json* s1 = r.find("stage1")) {
        parse_stage(*s1, r.sub("stage1"), rc.stage1);
    }
    if (const nlohmann::json* s2 = r.find("stage2")) {
        parse_stage(*s2, r.sub("stage2"), rc.stage2);
    }
    r.load("chunked", rc.chunked);
    if (const nlohmann::json* wj = r.find("warm_start")) {
        parse_warm(*wj, r.sub("warm_start"), rc.warm_start);
    }
    r.load("reinit_head_adapter", rc.reinit_head_adapter);
    r.load("export_datasets", rc.export_datasets);
    r.load("out_dir", rc.out_dir);
    r.finish();
    rc.stage1.stage = 1;
    rc.stage2.stage = 2;
    rc.stage1.chunked = rc.chunked;
    rc.stage2.chunked = rc.chunked;
    rc.validate();
    return rc;
}

RunConfig RunConfig::from_file(const std::string& path) {
    return from_json(read_json_file(path));
}

std::string config_hash_hex(const RunConfig& rc) {
    const std::uint64_t h = fnv1a64(rc.to_json().dump());
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 0; i < 16; ++i) {
        out[static_cast<std::size_t>(15 - i)] = digits[(h >> (4 * i)) & 0xf];
    }
    return out;
}

RunConfig default_run_config() {
    RunConfig rc;
    rc.model.width = 32;
    rc.model.depth = 2;
    rc.model.seq_len = 16;
    rc.model.stack_factor = 4;
    rc.model.target_dim = 16;
    rc.model.d_lid = 16;
    rc.model.chunk_lengths = {2, 4, 8, 16};
    rc.model.languages = default_similarity().languages;
    rc.model.lora.r = 8;
    rc.model.lora.alpha = 16.0;
    rc.model.lora.k = 2;
    rc.model.lora.r_s = 4;
    rc.model.lora.r_p = 4;
    rc.model.lora.fly_density = 0.1;

    rc.similarity = "default";
    for (const char* l : {"en", "fr", "es", "de"}) rc.data.tiers[l] = "high";
    for (const char* l : {"it", "pt", "ja", "ar"}) rc.data.tiers[l] = "mid";
    for (const char* l : {"ko", "nl", "th", "vi"}) rc.data.tiers[l] = "low";
    rc.source_languages = {"en", "fr", "th"};
    rc.variants = {"Vanilla",    "Independent", "FlyLoRA",        "ZipperStatic",
                   "ZipperHard", "ZipperSoft",  "ZipperSoft+initB"};
    rc.seeds = {0, 1, 2, 3, 4};

    rc.stage1.stage = 1;
    rc.stage1.steps = 300;
    rc.stage1.batch_size = 8;
    rc.stage1.base_lr = 1e-3;
    rc.stage2.stage = 2;
    // Long enough that head languages converge; below this the shared-vs-
    // specific decomposition has not separated and variant order is noise.
    rc.stage2.steps = 2000;
    rc.stage2.batch_size = 8;
    rc.stage2.base_lr = 1e-3;

    rc.out_dir = "runs/default";
    return rc;
}

SimilarityTarget subset_similarity(const SimilarityTarget& sim,
                                   const std::vector<std::string>& langs) {
    std::vector<int> pick;
    for (const auto& l : langs) {
        const auto it = std::find(sim.languages.begin(), sim.languages.end(), l);
        if (it == sim.languages.end()) {
            throw ConfigError("similarity target does not cover language " + l);
        }
        pick.push_back(static_cast<int>(it - sim.languages.begin()));
    }
    SimilarityTarget out;
    out.languages = langs;
    const int n = static_cast<int>(pick.size());
    out.s = Matrix(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            out.s(i, j) = sim.s(pick[static_cast<std::size_t>(i)],
                                pick[static_cast<std::size_t>(j)]);
        }
    }
    return out;
}

SimilarityTarget resolve_similarity(const RunConfig& rc) {
    if (rc.similarity == "identity") {
        SimilarityTarget t;
        t.languages = rc.model.languages;
        t.s = Matrix::identity(static_cast<int>(t.languages.size()));
        return t;
    }
    const SimilarityTarget base = rc.similarity == "default"
                                      ? default_similarity()
                                      : similarity_from_json(read_json_file(rc.similarity));
    return subset_similarity(base, rc.model.languages);
}

}  // namespace zlora
