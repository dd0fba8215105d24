// SPDX-License-Identifier: Apache-2.0

#include "zlora/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "zlora/errors.hpp"
#include "zlora/rng.hpp"
#include "zlora/serialize.hpp"
#include "zlora/synthdata.hpp"
#include "zlora/training.hpp"

namespace zlora {

namespace fs = std::filesystem;

namespace {

std::string cell_dir(const std::string& token, std::uint64_t seed) {
    return "stage2/" + token + "/seed" + std::to_string(seed);
}

std::optional<int> eval_chunk_of(const RunConfig& rc) {
    if (!rc.chunked) {
        return std::nullopt;
    }
    return *std::max_element(rc.model.chunk_lengths.begin(), rc.model.chunk_lengths.end());
}

std::string hash_line(const std::string& hash) { return "# config_hash " + hash; }

/// Everything a run derives from its config before any training happens.
struct RunContext {
    SimilarityTarget sim;
    TeacherSpec teachers;
    Dataset data;
    std::map<std::string, Matrix> lid;
    std::map<std::string, int> counts;
    DataOptions opts;
};

RunContext make_context(const RunConfig& rc) {
    const std::uint64_t seed0 = rc.seeds.front();
    SimilarityTarget sim = resolve_similarity(rc);
    TeacherSpec teachers = make_teachers(rc.model, sim, rc.data.c_sh, rc.data.c_sp,
                                         rc.data.teacher_rank, derive_seed(seed0, "teachers"));
    DataOptions opts;
    opts.eval_count = rc.data.eval_count;
    opts.noise_ratio = rc.data.noise_ratio;
    opts.domain_mismatch = rc.data.domain_mismatch;
    std::map<std::string, int> counts = long_tail_sizes(rc.data.profile, rc.data.tiers);
    Dataset data = sample_dataset(teachers, counts, opts, derive_seed(seed0, "data"));
    std::map<std::string, Matrix> lid =
        synth_lid_embeddings(sim, rc.model.d_lid, derive_seed(seed0, "lid"));
    return {std::move(sim), std::move(teachers), std::move(data), std::move(lid),
            std::move(counts), opts};
}

void write_metrics_csv(const fs::path& path, const std::string& hash,
                       const std::vector<MetricRow>& rows) {
    std::string out = hash_line(hash) + "\n" + metrics_csv_header() + "\n";
    for (const MetricRow& r : rows) {
        out += metric_row_csv(r) + "\n";
    }
    write_text_file(path.string(), out);
}

void write_checkpoint(const fs::path& path, const std::string& hash, const ToyModel& model,
                      const AdamState& optim, int stage) {
    nlohmann::json j = training_checkpoint_json(model, optim, stage);
    j["config_hash"] = hash;
    write_json_file(path.string(), j);
}

nlohmann::json load_checked_json(const fs::path& path, const std::string& hash) {
    nlohmann::json j = read_json_file(path.string());
    if (!j.contains("config_hash") || j["config_hash"] != hash) {
        throw CompatibilityError(path.string() +
                                 ": config_hash mismatch, artifact belongs to another config");
    }
    return j;
}

std::vector<MetricRow> read_metrics_csv(const fs::path& path, const std::string& hash) {
    std::istringstream is(read_text_file(path.string()));
    std::string line;
    if (!std::getline(is, line) || line != hash_line(hash)) {
        throw CompatibilityError(path.string() +
                                 ": config_hash line mismatch, artifact belongs to another config");
    }
    if (!std::getline(is, line) || line != metrics_csv_header()) {
        throw ContractError(path.string() + ": unexpected metrics header \"" + line + "\"");
    }
    std::vector<MetricRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            f.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
            if (comma == std::string::npos) {
                break;
            }
            start = comma + 1;
        }
        if (f.size() != 8) {
            throw ContractError(path.string() + ": malformed metrics row \"" + line + "\"");
        }
        MetricRow r;
        r.step = std::stoi(f[0]);
        r.stage = std::stoi(f[1]);
        r.variant = f[2];
        r.language = f[3];
        r.mse = std::stod(f[4]);
        r.normalized_error = std::stod(f[5]);
        r.lr = std::stod(f[6]);
        if (!f[7].empty()) {
            r.mean_p = std::stod(f[7]);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Mean over the rows of the last two eval steps, the same convention
/// run_training uses for its final figures.
struct CellFinal {
    std::map<std::string, double> mse;
    std::map<std::string, double> normalized;
};

CellFinal final_of(const std::vector<MetricRow>& rows) {
    std::vector<int> eval_steps;
    for (const MetricRow& row : rows) {
        if (row.step > 0 && (eval_steps.empty() || eval_steps.back() != row.step)) {
            eval_steps.push_back(row.step);
        }
    }
    const std::size_t take = std::min<std::size_t>(2, eval_steps.size());
    const std::set<int> last(eval_steps.end() - static_cast<std::ptrdiff_t>(take),
                             eval_steps.end());
    std::map<std::string, std::pair<double, double>> acc;
    std::map<std::string, int> cnt;
    for (const MetricRow& row : rows) {
        if (last.count(row.step)) {
            acc[row.language].first += row.mse;
            acc[row.language].second += row.normalized_error;
            cnt[row.language] += 1;
        }
    }
    CellFinal out;
    for (const auto& [lang, sums] : acc) {
        out.mse[lang] = sums.first / cnt.at(lang);
        out.normalized[lang] = sums.second / cnt.at(lang);
    }
    return out;
}

void require_complete(const fs::path& root, const RunConfig& rc) {
    std::vector<std::string> missing;
    for (const std::string& rel : declared_artifacts(rc)) {
        if (!fs::exists(root / rel)) {
            missing.push_back(rel);
        }
    }
    std::string msg = "incomplete run in " + root.string() + "; missing:";
    for (const std::string& m : missing) {
        msg += " " + m;
    }
    if (!missing.empty()) {
        throw IncompleteRunError(msg, missing);
    }
}

ToyModel load_cell_model(const fs::path& root, const std::string& token, std::uint64_t seed,
                         const std::string& hash) {
    const nlohmann::json j =
        load_checked_json(root / cell_dir(token, seed) / "checkpoint.json", hash);
    return ToyModel::from_json(j.at("model"));
}

/// Encoder-side adapter parameters per layer, plus the per-layer router for
/// the gated variants. The head-side bank is identical across variants and
/// deliberately excluded from the comparison.
long long variant_param_total(const ToyModel& model, Variant v) {
    long long total = 0;
    const int n_lang = static_cast<int>(model.config().languages.size());
    for (const auto& [layer, bank] : model.encoder_banks()) {
        (void)layer;
        total += count_trainable_params(v, bank.cfg, n_lang, model.config().d_lid);
    }
    return total;
}

} // namespace

std::vector<std::string> declared_artifacts(const RunConfig& rc) {
    std::vector<std::string> out = {"config.json", "base_mse.json", "manifest.json",
                                    "stage1/metrics.csv", "stage1/checkpoint.json"};
    for (const std::string& token : rc.variants) {
        for (std::uint64_t seed : rc.seeds) {
            out.push_back(cell_dir(token, seed) + "/metrics.csv");
            out.push_back(cell_dir(token, seed) + "/checkpoint.json");
        }
    }
    if (rc.export_datasets) {
        out.push_back("datasets/manifest.json");
    }
    return out;
}

RunConfig load_run_config(const std::string& run_dir) {
    const fs::path p = fs::path(run_dir) / "config.json";
    if (!fs::exists(p)) {
        throw IncompleteRunError("incomplete run in " + run_dir + "; missing: config.json",
                                 {"config.json"});
    }
    const nlohmann::json j = read_json_file(p.string());
    RunConfig rc = RunConfig::from_json(j.at("config"));
    if (!j.contains("config_hash") || j.at("config_hash") != config_hash_hex(rc)) {
        throw CompatibilityError(p.string() + ": config_hash does not match the stored config");
    }
    return rc;
}

void cmd_run(const RunConfig& rc) {
    rc.validate();
    const bool has_plain_soft =
        std::find(rc.variants.begin(), rc.variants.end(), "ZipperSoft") != rc.variants.end();
    for (const std::string& token : rc.variants) {
        if (parse_variant_token(token).second && rc.warm_start.source == "auto" &&
            !has_plain_soft) {
            throw ConfigError("variant " + token +
                              " with warm_start.source=auto needs a plain ZipperSoft cell in the "
                              "same run");
        }
    }

    const std::string hash = config_hash_hex(rc);
    const fs::path root(rc.out_dir);
    fs::create_directories(root / "stage1");
    {
        nlohmann::json cj;
        cj["config_hash"] = hash;
        cj["config"] = rc.to_json();
        write_json_file((root / "config.json").string(), cj);
    }

    const RunContext ctx = make_context(rc);
    const std::optional<int> echunk = eval_chunk_of(rc);
    const std::uint64_t seed0 = rc.seeds.front();

    // Stage 1: one backbone fit on the source languages, shared by every cell.
    ToyModel model(rc.model, derive_seed(seed0, "model.init"));
    model.set_lid_embeddings(ctx.lid);
    std::map<std::string, std::vector<Sample>> s1_train;
    std::map<std::string, std::vector<Sample>> s1_eval;
    std::map<std::string, double> base1;
    const auto& s1_source = rc.data.domain_mismatch ? ctx.data.stage1_train : ctx.data.train;
    for (const std::string& lang : rc.source_languages) {
        s1_train[lang] = s1_source.at(lang);
        s1_eval[lang] = ctx.data.eval.at(lang);
        base1[lang] = eval_mse(model, ctx.data.eval.at(lang), lang, echunk);
    }
    StageConfig c1 = rc.stage1;
    c1.stage = 1;
    c1.chunked = rc.chunked;
    AdamState opt1;
    const TrainHistory h1 =
        run_training(model, opt1, s1_train, s1_eval, base1, c1, derive_seed(seed0, "stage1.train"));
    write_metrics_csv(root / "stage1/metrics.csv", hash, h1.rows);
    write_checkpoint(root / "stage1/checkpoint.json", hash, model, opt1, 1);

    // Stage-2 floors: what the shared backbone alone achieves per language.
    std::map<std::string, double> base2;
    for (const std::string& lang : rc.model.languages) {
        base2[lang] = eval_mse(model, ctx.data.eval.at(lang), lang, echunk);
    }
    {
        nlohmann::json bj;
        bj["config_hash"] = hash;
        bj["stage1"] = base1;
        bj["stage2"] = base2;
        write_json_file((root / "base_mse.json").string(), bj);
    }

    // Plain cells first so warm-started ones can read their source.
    std::vector<std::string> order;
    for (const std::string& token : rc.variants) {
        if (!parse_variant_token(token).second) {
            order.push_back(token);
        }
    }
    for (const std::string& token : rc.variants) {
        if (parse_variant_token(token).second) {
            order.push_back(token);
        }
    }

    for (const std::string& token : order) {
        const auto [variant, warm] = parse_variant_token(token);
        for (std::uint64_t seed : rc.seeds) {
            ToyModel cell = model;
            if (rc.reinit_head_adapter) {
                cell.reinit_head_adapter(derive_seed(seed, "head_adapter"));
            }
            cell.attach_adapters(variant, derive_seed(seed, "adapters"));
            if (warm) {
                nlohmann::json sj;
                if (rc.warm_start.source == "auto") {
                    sj = load_checked_json(root / cell_dir("ZipperSoft", seed0) / "checkpoint.json",
                                           hash);
                } else {
                    sj = read_json_file(rc.warm_start.source);
                }
                const ToyModel source = ToyModel::from_json(sj.at("model"));
                initial_b_warmstart(cell, source, rc.warm_start.flags);
            }
            StageConfig c2 = rc.stage2;
            c2.stage = 2;
            c2.chunked = rc.chunked;
            AdamState opt2;
            const TrainHistory h2 = run_training(cell, opt2, ctx.data.train, ctx.data.eval, base2,
                                                 c2, derive_seed(seed, "stage2.train"));
            const fs::path dir = root / cell_dir(token, seed);
            fs::create_directories(dir);
            write_metrics_csv(dir / "metrics.csv", hash, h2.rows);
            write_checkpoint(dir / "checkpoint.json", hash, cell, opt2, 2);
        }
    }

    if (rc.export_datasets) {
        nlohmann::json manifest =
            dataset_manifest(ctx.teachers, ctx.counts, ctx.opts, derive_seed(seed0, "data"));
        manifest["config_hash"] = hash;
        export_dataset(ctx.data, manifest, (root / "datasets").string());
    }

    {
        nlohmann::json mj;
        mj["config_hash"] = hash;
        char th[20];
        std::snprintf(th, sizeof(th), "%016llx",
                      static_cast<unsigned long long>(teacher_hash(ctx.teachers)));
        mj["teacher_hash"] = std::string(th);
        mj["artifacts"] = declared_artifacts(rc);
        mj["complete"] = true;
        write_json_file((root / "manifest.json").string(), mj);
    }

    cmd_report(rc.out_dir);
}

void cmd_report(const std::string& run_dir) {
    const fs::path root(run_dir);
    const RunConfig rc = load_run_config(run_dir);
    require_complete(root, rc);
    const std::string hash = config_hash_hex(rc);

    std::map<std::string, std::map<std::uint64_t, CellFinal>> finals;
    for (const std::string& token : rc.variants) {
        for (std::uint64_t seed : rc.seeds) {
            finals[token][seed] =
                final_of(read_metrics_csv(root / cell_dir(token, seed) / "metrics.csv", hash));
        }
    }

    fs::create_directories(root / "report");
    const std::string hl = hash_line(hash) + "\n";
    const double n_seeds = static_cast<double>(rc.seeds.size());

    std::map<std::string, std::map<std::string, double>> mean_norm; // token -> lang -> mean
    for (const std::string& token : rc.variants) {
        for (const std::string& lang : rc.model.languages) {
            double m = 0.0;
            for (std::uint64_t seed : rc.seeds) {
                m += finals[token][seed].normalized.at(lang);
            }
            mean_norm[token][lang] = m / n_seeds;
        }
    }

    // Parameter totals per base variant, from the first-seed checkpoints.
    std::map<std::string, long long> param_totals; // token -> encoder adapter params
    std::map<Variant, ToyModel> audited;
    for (const std::string& token : rc.variants) {
        const Variant v = parse_variant_token(token).first;
        if (!audited.count(v)) {
            audited.emplace(v, load_cell_model(root, token, rc.seeds.front(), hash));
        }
        param_totals[token] = variant_param_total(audited.at(v), v);
    }

    {
        std::string csv = hl + "variant,language,normalized_error_mean,normalized_error_std,"
                               "trainable_params\n";
        for (const std::string& token : rc.variants) {
            for (const std::string& lang : rc.model.languages) {
                const double mean = mean_norm[token][lang];
                double var = 0.0;
                for (std::uint64_t seed : rc.seeds) {
                    const double d = finals[token][seed].normalized.at(lang) - mean;
                    var += d * d;
                }
                csv += token + "," + lang + "," + csv_double(mean) + "," +
                       csv_double(std::sqrt(var / n_seeds)) + "," +
                       std::to_string(param_totals[token]) + "\n";
            }
        }
        write_text_file((root / "report/comparison.csv").string(), csv);
    }

    {
        std::string csv = hl + "variant,seed,language,mse,normalized_error\n";
        for (const std::string& token : rc.variants) {
            for (std::uint64_t seed : rc.seeds) {
                for (const std::string& lang : rc.model.languages) {
                    csv += token + "," + std::to_string(seed) + "," + lang + "," +
                           csv_double(finals[token][seed].mse.at(lang)) + "," +
                           csv_double(finals[token][seed].normalized.at(lang)) + "\n";
                }
            }
        }
        write_text_file((root / "report/per_seed.csv").string(), csv);
    }

    if (mean_norm.count("Vanilla")) {
        // Positive percentages are improvements over the plain adapter.
        std::string csv = hl + "variant,language,relative_change_pct\n";
        for (const std::string& token : rc.variants) {
            for (const std::string& lang : rc.model.languages) {
                const double vanilla = mean_norm["Vanilla"][lang];
                const double rel = (vanilla - mean_norm[token][lang]) / vanilla * 100.0;
                csv += token + "," + lang + "," + csv_double(rel) + "\n";
            }
        }
        write_text_file((root / "report/relative_vs_vanilla.csv").string(), csv);
    }

    {
        // Radar value: 1 - normalized error, floored at zero.
        std::string csv = hl + "variant,language,value\n";
        for (const std::string& token : rc.variants) {
            for (const std::string& lang : rc.model.languages) {
                const double value = std::max(0.0, 1.0 - mean_norm[token][lang]);
                csv += token + "," + lang + "," + csv_double(value) + "\n";
            }
        }
        write_text_file((root / "report/radar_data.csv").string(), csv);
    }

    {
        std::string csv = hl + "variant,layer,count\n";
        std::set<Variant> done;
        for (const std::string& token : rc.variants) {
            const Variant v = parse_variant_token(token).first;
            if (!done.insert(v).second) {
                continue;
            }
            const ToyModel& m = audited.at(v);
            const int n_lang = static_cast<int>(m.config().languages.size());
            long long total = 0;
            for (const std::string& layer : m.adapted_layer_names()) {
                const AdapterBank& bank = m.encoder_banks().at(layer);
                const long long c =
                    count_trainable_params(v, bank.cfg, n_lang, m.config().d_lid);
                total += c;
                csv += to_string(v) + "," + layer + "," + std::to_string(c) + "\n";
            }
            csv += to_string(v) + ",total," + std::to_string(total) + "\n";
        }
        write_text_file((root / "report/params.csv").string(), csv);
    }

    {
        std::string csv = hl + "variant,seed,language,rank,mean_p\n";
        for (const std::string& token : rc.variants) {
            const Variant v = parse_variant_token(token).first;
            if (v != Variant::ZipperHard && v != Variant::ZipperSoft) {
                continue;
            }
            for (std::uint64_t seed : rc.seeds) {
                const ToyModel m = load_cell_model(root, token, seed, hash);
                for (const std::string& lang : rc.model.languages) {
                    const std::vector<double> profile = m.routing_profile(lang);
                    for (std::size_t rank = 0; rank < profile.size(); ++rank) {
                        csv += token + "," + std::to_string(seed) + "," + lang + "," +
                               std::to_string(rank) + "," + csv_double(profile[rank]) + "\n";
                    }
                }
            }
        }
        write_text_file((root / "report/routing.csv").string(), csv);
    }
}

void cmd_export_embeddings(const std::string& run_dir) {
    const fs::path root(run_dir);
    const RunConfig rc = load_run_config(run_dir);
    require_complete(root, rc);
    const std::string hash = config_hash_hex(rc);
    const RunContext ctx = make_context(rc);
    const std::optional<int> echunk = eval_chunk_of(rc);

    std::string csv = hash_line(hash) + "\nvariant,seed,language,sample";
    for (int i = 0; i < rc.model.width; ++i) {
        csv += ",v" + std::to_string(i);
    }
    csv += "\n";

    for (const std::string& token : rc.variants) {
        for (std::uint64_t seed : rc.seeds) {
            const ToyModel m = load_cell_model(root, token, seed, hash);
            for (const std::string& lang : rc.model.languages) {
                const std::vector<Sample>& samples = ctx.data.eval.at(lang);
                for (std::size_t i = 0; i < samples.size(); ++i) {
                    const Matrix pooled = mean_cols(m.encode(samples[i].x, lang, echunk));
                    csv += token + "," + std::to_string(seed) + "," + lang + "," +
                           std::to_string(i);
                    for (int d = 0; d < pooled.rows(); ++d) {
                        csv += "," + csv_double(pooled(d, 0));
                    }
                    csv += "\n";
                }
            }
        }
    }
    write_text_file((root / "embeddings.csv").string(), csv);
}

} // namespace zlora
