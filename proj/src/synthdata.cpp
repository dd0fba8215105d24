// SPDX-License-Identifier: Apache-2.0

#include "zlora/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "zlora/errors.hpp"
#include "zlora/rng.hpp"
#include "zlora/serialize.hpp"

namespace zlora {

namespace {

std::uint64_t mix_hash(std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

std::uint64_t matrix_bytes_hash(const Matrix& m) {
    std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()),
                                               m.size() * sizeof(double)));
    h = mix_hash(h, static_cast<std::uint64_t>(m.rows()));
    h = mix_hash(h, static_cast<std::uint64_t>(m.cols()));
    return h;
}

std::set<std::string> sorted_set(const std::vector<std::string>& v) {
    return std::set<std::string>(v.begin(), v.end());
}

/// Rows of `m` orthonormalized in place by modified Gram-Schmidt.
void orthonormalize_rows(Matrix& m, const std::string& what) {
    for (int i = 0; i < m.rows(); ++i) {
        for (int k = 0; k < i; ++k) {
            double dot = 0.0;
            for (int j = 0; j < m.cols(); ++j) dot += m(i, j) * m(k, j);
            for (int j = 0; j < m.cols(); ++j) m(i, j) -= dot * m(k, j);
        }
        double norm = 0.0;
        for (int j = 0; j < m.cols(); ++j) norm += m(i, j) * m(i, j);
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            throw StructureError(what + ": degenerate direction during orthonormalization");
        }
        for (int j = 0; j < m.cols(); ++j) m(i, j) /= norm;
    }
}

/// Matrices orthonormalized in place under the Frobenius inner product,
/// in list order.
void orthonormalize_frobenius(std::vector<Matrix>& basis, const std::string& what) {
    for (std::size_t i = 0; i < basis.size(); ++i) {
        for (std::size_t k = 0; k < i; ++k) {
            const double dot = frobenius_inner(basis[i], basis[k]);
            basis[i] = sub(basis[i], scale(basis[k], dot));
        }
        const double norm = frobenius_norm(basis[i]);
        if (norm < 1e-12) {
            throw StructureError(what + ": degenerate direction during orthonormalization");
        }
        basis[i] = scale(basis[i], 1.0 / norm);
    }
}

}  // namespace

std::map<std::string, int> long_tail_sizes(const LongTailProfile& profile,
                                           const std::map<std::string, std::string>& tier_of) {
    if (profile.high < 1 || profile.mid < 1 || profile.low < 1) {
        throw ConfigError("long_tail_sizes: tier sizes must be >= 1");
    }
    if (tier_of.empty()) {
        throw ConfigError("long_tail_sizes: no languages assigned");
    }
    std::map<std::string, int> out;
    for (const auto& [lang, tier] : tier_of) {
        if (tier == "high") {
            out[lang] = profile.high;
        } else if (tier == "mid") {
            out[lang] = profile.mid;
        } else if (tier == "low") {
            out[lang] = profile.low;
        } else {
            throw ConfigError("long_tail_sizes: unknown tier '" + tier + "' for language " + lang);
        }
    }
    return out;
}

TeacherSpec make_teachers(const ModelConfig& cfg, const SimilarityTarget& sim, double c_sh,
                          double c_sp, int teacher_rank, std::uint64_t seed) {
    cfg.validate();
    if (sorted_set(sim.languages) != sorted_set(cfg.languages)) {
        throw ConfigError("make_teachers: similarity languages do not match model languages");
    }
    if (c_sh < 0.0 || c_sp < 0.0) {
        throw ConfigError("make_teachers: c_sh and c_sp must be non-negative");
    }
    const int rank = teacher_rank <= 0 ? cfg.lora.r : teacher_rank;
    if (rank < 1) {
        throw ConfigError("make_teachers: teacher rank must be >= 1");
    }

    std::vector<std::string> langs = cfg.languages;
    std::sort(langs.begin(), langs.end());
    const auto coords = similarity_coordinates(sim);

    TeacherSpec spec{cfg,   c_sh, c_sp, rank, seed, ToyModel(cfg, derive_seed(seed, "teacher.base")),
                     {},    {},   {}};

    const auto layer_names = spec.base.adapted_layer_names();
    const auto base_params = static_cast<const ToyModel&>(spec.base).named_params();

    for (const auto& layer : layer_names) {
        const Matrix& w = *base_params.at(layer);
        const int d_out = w.rows();
        const int d_in = w.cols();
        if (rank > d_in || rank > d_out) {
            throw ConfigError("make_teachers: teacher rank " + std::to_string(rank) +
                              " exceeds layer " + layer + " with shape " + w.shape_str());
        }
        if (static_cast<std::size_t>(d_out) * static_cast<std::size_t>(rank) <
            langs.size() + 1) {
            throw ConfigError("make_teachers: layer " + layer +
                              " is too small to host independent per-language directions");
        }

        SplitMix64 a_rng(derive_seed(seed, "teacher.At." + layer));
        Matrix a_t = Matrix::gaussian(rank, d_in, a_rng);
        orthonormalize_rows(a_t, "make_teachers A_t " + layer);

        std::vector<Matrix> basis;
        basis.reserve(langs.size() + 1);
        SplitMix64 sh_rng(derive_seed(seed, "teacher.C." + layer + ".shared"));
        basis.push_back(Matrix::gaussian(d_out, rank, sh_rng));
        for (const auto& lang : langs) {
            SplitMix64 c_rng(derive_seed(seed, "teacher.C." + layer + "." + lang));
            basis.push_back(Matrix::gaussian(d_out, rank, c_rng));
        }
        orthonormalize_frobenius(basis, "make_teachers C " + layer);

        spec.shared[layer] = matmul(basis[0], a_t);
        for (const auto& lang : langs) {
            const auto& v = coords.at(lang);
            Matrix m(d_out, rank);
            for (std::size_t k = 0; k < langs.size(); ++k) {
                m = add(m, scale(basis[k + 1], v[k]));
            }
            spec.specific[layer][lang] = matmul(m, a_t);
        }
    }

    for (const auto& lang : langs) {
        ToyModel teacher = spec.base;
        auto params = teacher.named_params();
        for (const auto& layer : layer_names) {
            Matrix& w = *params.at(layer);
            w = add(w, add(scale(spec.shared.at(layer), c_sh),
                           scale(spec.specific.at(layer).at(lang), c_sp)));
        }
        spec.folded.emplace(lang, std::move(teacher));
    }
    return spec;
}

Matrix teacher_forward(const TeacherSpec& spec, const Matrix& x, const std::string& lang) {
    const auto it = spec.folded.find(lang);
    if (it == spec.folded.end()) {
        throw KeyError("teacher_forward: no teacher for language " + lang);
    }
    return it->second.forward(x, lang, std::nullopt);
}

Matrix teacher_delta_cosines(const TeacherSpec& spec, const std::vector<std::string>& order) {
    const int n = static_cast<int>(order.size());
    std::vector<double> norms(order.size());
    auto pair_inner = [&](const std::string& a, const std::string& b) {
        double acc = 0.0;
        for (const auto& [layer, per_lang] : spec.specific) {
            const auto ia = per_lang.find(a);
            const auto ib = per_lang.find(b);
            if (ia == per_lang.end() || ib == per_lang.end()) {
                throw KeyError("teacher_delta_cosines: unknown language " +
                               (ia == per_lang.end() ? a : b));
            }
            acc += frobenius_inner(ia->second, ib->second);
        }
        return acc;
    };
    for (int i = 0; i < n; ++i) {
        norms[static_cast<std::size_t>(i)] = std::sqrt(pair_inner(order[static_cast<std::size_t>(i)],
                                                                  order[static_cast<std::size_t>(i)]));
    }
    Matrix c(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double denom =
                norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)];
            if (denom < 1e-30) {
                throw StructureError("teacher_delta_cosines: zero-norm delta");
            }
            c(i, j) = pair_inner(order[static_cast<std::size_t>(i)],
                                 order[static_cast<std::size_t>(j)]) / denom;
        }
    }
    return c;
}

std::uint64_t teacher_hash(const TeacherSpec& spec) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [lang, model] : spec.folded) {
        h = mix_hash(h, fnv1a64(lang));
        std::set<std::string> names;
        for (const auto& [name, ptr] : static_cast<const ToyModel&>(model).named_params()) {
            (void)ptr;
            names.insert(name);
        }
        h = mix_hash(h, model.params_hash(names));
    }
    return h;
}

Dataset sample_dataset(const TeacherSpec& teachers, const std::map<std::string, int>& train_counts,
                       const DataOptions& opts, std::uint64_t seed) {
    const ModelConfig& cfg = teachers.cfg;
    std::set<std::string> want = sorted_set(cfg.languages);
    std::set<std::string> have;
    for (const auto& [lang, count] : train_counts) {
        have.insert(lang);
        if (count < 1) {
            throw ConfigError("sample_dataset: train count for " + lang + " must be >= 1");
        }
    }
    if (want != have) {
        throw ConfigError("sample_dataset: train counts must cover exactly the model languages");
    }
    if (opts.eval_count < 1) {
        throw ConfigError("sample_dataset: eval_count must be >= 1");
    }
    if (opts.noise_ratio < 0.0) {
        throw ConfigError("sample_dataset: noise_ratio must be non-negative");
    }

    // One feature-scale draw shared by every language, so the first-stage
    // split differs from the main one only by input covariance.
    Matrix mismatch_scale;
    if (opts.domain_mismatch) {
        SplitMix64 s_rng(derive_seed(seed, "domain.scale"));
        mismatch_scale = Matrix::uniform(1, cfg.width, s_rng, 0.5, 1.5);
    }

    Dataset ds;
    for (const auto& [lang, count] : train_counts) {
        auto draw_clean = [&](const std::string& purpose, int n, bool scaled) {
            std::vector<Sample> out;
            out.reserve(static_cast<std::size_t>(n));
            SplitMix64 rng(derive_seed(seed, "data." + purpose + "." + lang));
            for (int i = 0; i < n; ++i) {
                Matrix x = Matrix::gaussian(cfg.seq_len, cfg.width, rng);
                if (scaled) {
                    for (int r = 0; r < x.rows(); ++r) {
                        for (int c = 0; c < x.cols(); ++c) x(r, c) *= mismatch_scale(0, c);
                    }
                }
                out.push_back(Sample{x, teacher_forward(teachers, x, lang)});
            }
            return out;
        };
        auto train = draw_clean("train", count, false);
        auto eval = draw_clean("eval", opts.eval_count, false);
        std::vector<Sample> stage1;
        if (opts.domain_mismatch) {
            stage1 = draw_clean("stage1", count, true);
        }

        // Noise scale follows the clean target spread of this language.
        double sum_v = 0.0, sum_sq = 0.0;
        std::size_t n_v = 0;
        for (const auto* split : {&train, &eval}) {
            for (const auto& s : *split) {
                for (double v : s.y.vec()) {
                    sum_v += v;
                    sum_sq += v * v;
                    ++n_v;
                }
            }
        }
        const double mean = sum_v / static_cast<double>(n_v);
        const double var = std::max(0.0, sum_sq / static_cast<double>(n_v) - mean * mean);
        const double sigma = opts.noise_ratio * std::sqrt(var);

        auto add_noise = [&](std::vector<Sample>& split, const std::string& purpose) {
            if (sigma == 0.0) return;
            SplitMix64 rng(derive_seed(seed, "noise." + purpose + "." + lang));
            for (auto& s : split) {
                for (double& v : s.y.vec()) v += sigma * rng.gaussian();
            }
        };
        add_noise(train, "train");
        add_noise(eval, "eval");
        add_noise(stage1, "stage1");

        ds.train.emplace(lang, std::move(train));
        ds.eval.emplace(lang, std::move(eval));
        if (opts.domain_mismatch) {
            ds.stage1_train.emplace(lang, std::move(stage1));
        }
    }
    return ds;
}

double eval_mse(const ToyModel& model, const std::vector<Sample>& samples, const std::string& lang,
                std::optional<int> chunk_len) {
    if (samples.empty()) {
        throw ContractError("eval_mse: empty sample list");
    }
    double acc = 0.0;
    std::size_t entries = 0;
    for (const auto& s : samples) {
        const Matrix err = sub(model.forward(s.x, lang, chunk_len), s.y);
        for (double v : err.vec()) acc += v * v;
        entries += err.size();
    }
    return acc / static_cast<double>(entries);
}

EvalMetrics eval_metrics(const ToyModel& model, const std::vector<Sample>& samples,
                         const std::string& lang, std::optional<int> chunk_len, double base_mse) {
    if (!(base_mse > 0.0)) {
        throw ContractError("eval_metrics: base mse must be positive");
    }
    EvalMetrics m;
    m.mse = eval_mse(model, samples, lang, chunk_len);
    m.normalized_error = m.mse / base_mse;
    return m;
}

std::uint64_t sample_hash(const Sample& s) {
    return mix_hash(matrix_bytes_hash(s.x), matrix_bytes_hash(s.y));
}

nlohmann::json dataset_manifest(const TeacherSpec& spec, const std::map<std::string, int>& counts,
                                const DataOptions& opts, std::uint64_t seed) {
    nlohmann::json j;
    j["seed"] = seed;
    j["teacher_seed"] = spec.seed;
    j["teacher_hash"] = teacher_hash(spec);
    j["teacher_rank"] = spec.teacher_rank;
    j["c_sh"] = spec.c_sh;
    j["c_sp"] = spec.c_sp;
    j["languages"] = spec.cfg.languages;
    j["train_counts"] = counts;
    j["eval_count"] = opts.eval_count;
    j["noise_ratio"] = opts.noise_ratio;
    j["domain_mismatch"] = opts.domain_mismatch;
    return j;
}

void export_dataset(const Dataset& ds, const nlohmann::json& manifest, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_json_file(dir + "/manifest.json", manifest);
    auto write_split = [&](const std::map<std::string, std::vector<Sample>>& split,
                           const std::string& name) {
        for (const auto& [lang, samples] : split) {
            nlohmann::json j;
            j["language"] = lang;
            j["split"] = name;
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& s : samples) {
                arr.push_back({{"x", matrix_to_json(s.x)}, {"y", matrix_to_json(s.y)}});
            }
            j["samples"] = std::move(arr);
            write_json_file(dir + "/" + name + "." + lang + ".json", j);
        }
    };
    write_split(ds.train, "train");
    write_split(ds.eval, "eval");
    write_split(ds.stage1_train, "stage1");
}

}  // namespace zlora
