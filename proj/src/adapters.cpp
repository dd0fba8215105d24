// SPDX-License-Identifier: Apache-2.0

#include "zlora/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zlora/errors.hpp"
#include "zlora/rng.hpp"
#include "zlora/serialize.hpp"

namespace zlora {

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Vanilla: return "Vanilla";
        case Variant::Independent: return "Independent";
        case Variant::FlyLoRA: return "FlyLoRA";
        case Variant::ZipperStatic: return "ZipperStatic";
        case Variant::ZipperHard: return "ZipperHard";
        case Variant::ZipperSoft: return "ZipperSoft";
    }
    return "unknown";
}

Variant variant_from_string(const std::string& s) {
    for (Variant v : all_variants()) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw ConfigError("unknown adapter variant: \"" + s + "\"");
}

std::string to_string(HardPolarity p) {
    return p == HardPolarity::SpecOnOne ? "spec_on_one" : "shared_on_one";
}

HardPolarity polarity_from_string(const std::string& s) {
    if (s == "spec_on_one") {
        return HardPolarity::SpecOnOne;
    }
    if (s == "shared_on_one") {
        return HardPolarity::SharedOnOne;
    }
    throw ConfigError("unknown hard polarity: \"" + s + "\" (spec_on_one | shared_on_one)");
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v = {Variant::Vanilla,      Variant::Independent,
                                           Variant::FlyLoRA,      Variant::ZipperStatic,
                                           Variant::ZipperHard,   Variant::ZipperSoft};
    return v;
}

void LoraConfig::validate(Variant v) const {
    if (r < 1) {
        throw ConfigError("lora.r must be >= 1, got " + std::to_string(r));
    }
    if (!(alpha > 0.0)) {
        throw ConfigError("lora.alpha must be positive");
    }
    if (d_in < 1 || d_out < 1) {
        throw ConfigError("lora.d_in/d_out must be >= 1, got " + std::to_string(d_in) + "/" +
                          std::to_string(d_out));
    }
    if (v == Variant::ZipperHard && !(tau > 0.0 && tau < 1.0)) {
        throw ConfigError("lora.tau must lie in (0,1)");
    }
    if (v == Variant::FlyLoRA) {
        if (k < 1 || k > r) {
            throw ConfigError("lora.k must satisfy 1 <= k <= r, got " + std::to_string(k));
        }
        if (!(fly_density > 0.0 && fly_density <= 1.0)) {
            throw ConfigError("lora.fly_density must lie in (0,1]");
        }
    }
    if (v == Variant::ZipperStatic) {
        if (r_s < 0 || r_p < 0 || r_s + r_p != r) {
            throw ConfigError("lora.r_s + lora.r_p must equal r (" + std::to_string(r_s) + "+" +
                              std::to_string(r_p) + " != " + std::to_string(r) + ")");
        }
    }
}

namespace {

Matrix sparse_fly_a(const LoraConfig& cfg, std::uint64_t seed) {
    const int nnz = std::max(1, static_cast<int>(std::ceil(cfg.fly_density * cfg.d_in)));
    const double mag = 1.0 / std::sqrt(static_cast<double>(nnz));
    SplitMix64 rng(seed);
    Matrix a(cfg.r, cfg.d_in);
    std::vector<int> cols(cfg.d_in);
    for (int i = 0; i < cfg.r; ++i) {
        std::iota(cols.begin(), cols.end(), 0);
        // Partial Fisher-Yates: first nnz entries are a uniform sample
        // without replacement.
        for (int j = 0; j < nnz; ++j) {
            const int pick = j + static_cast<int>(rng.next_below(cols.size() - j));
            std::swap(cols[j], cols[pick]);
            a(i, cols[j]) = rng.next_double() < 0.5 ? -mag : mag;
        }
    }
    return a;
}

void require_variant(const AdapterBank& bank, Variant want, const char* op) {
    if (bank.variant != want) {
        throw ContractError(std::string(op) + ": bank holds " + to_string(bank.variant) +
                            ", expected " + to_string(want));
    }
}

const Matrix& lang_matrix(const std::map<std::string, Matrix>& m, const std::string& lang,
                          const char* field) {
    auto it = m.find(lang);
    if (it == m.end()) {
        throw KeyError(std::string(field) + ": unknown language \"" + lang + "\"");
    }
    return it->second;
}

} // namespace

AdapterBank make_bank(Variant v, const LoraConfig& cfg,
                      const std::vector<std::string>& languages, std::uint64_t seed) {
    cfg.validate(v);
    AdapterBank bank;
    bank.variant = v;
    bank.cfg = cfg;
    const double a_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_in));
    switch (v) {
        case Variant::Vanilla: {
            SplitMix64 rng(derive_seed(seed, "A"));
            bank.A = Matrix::gaussian(cfg.r, cfg.d_in, rng, a_std);
            bank.B_shared = Matrix(cfg.d_out, cfg.r);
            break;
        }
        case Variant::Independent: {
            for (const std::string& lang : languages) {
                SplitMix64 rng(derive_seed(seed, "A_spec." + lang));
                bank.A_spec[lang] = Matrix::gaussian(cfg.r, cfg.d_in, rng, a_std);
                bank.B_spec[lang] = Matrix(cfg.d_out, cfg.r);
            }
            break;
        }
        case Variant::FlyLoRA: {
            bank.A = sparse_fly_a(cfg, derive_seed(seed, "fly_A"));
            bank.B_shared = Matrix(cfg.d_out, cfg.r);
            bank.fly_bias = Matrix(cfg.r, 1);
            break;
        }
        case Variant::ZipperStatic: {
            SplitMix64 rng(derive_seed(seed, "A"));
            bank.A = Matrix::gaussian(cfg.r, cfg.d_in, rng, a_std);
            bank.B_shared = Matrix(cfg.d_out, cfg.r_s);
            for (const std::string& lang : languages) {
                bank.B_spec[lang] = Matrix(cfg.d_out, cfg.r_p);
            }
            break;
        }
        case Variant::ZipperHard:
        case Variant::ZipperSoft: {
            SplitMix64 rng(derive_seed(seed, "A"));
            bank.A = Matrix::gaussian(cfg.r, cfg.d_in, rng, a_std);
            bank.B_shared = Matrix(cfg.d_out, cfg.r);
            for (const std::string& lang : languages) {
                bank.B_spec[lang] = Matrix(cfg.d_out, cfg.r);
            }
            break;
        }
    }
    return bank;
}

nlohmann::json bank_to_json(const AdapterBank& bank) {
    nlohmann::json j;
    j["variant"] = to_string(bank.variant);
    nlohmann::json cfg;
    cfg["r"] = bank.cfg.r;
    cfg["alpha"] = bank.cfg.alpha;
    cfg["d_in"] = bank.cfg.d_in;
    cfg["d_out"] = bank.cfg.d_out;
    cfg["tau"] = bank.cfg.tau;
    cfg["k"] = bank.cfg.k;
    cfg["r_s"] = bank.cfg.r_s;
    cfg["r_p"] = bank.cfg.r_p;
    cfg["fly_density"] = bank.cfg.fly_density;
    cfg["hard_polarity"] = to_string(bank.cfg.hard_polarity);
    j["config"] = cfg;
    switch (bank.variant) {
        case Variant::Vanilla:
            j["A"] = matrix_to_json(bank.A);
            j["B_shared"] = matrix_to_json(bank.B_shared);
            break;
        case Variant::Independent: {
            nlohmann::json bs, as;
            for (const auto& [lang, m] : bank.B_spec) {
                bs[lang] = matrix_to_json(m);
            }
            for (const auto& [lang, m] : bank.A_spec) {
                as[lang] = matrix_to_json(m);
            }
            j["B_spec"] = bs;
            j["A_spec"] = as;
            break;
        }
        case Variant::FlyLoRA:
            j["A"] = matrix_to_json(bank.A);
            j["B_shared"] = matrix_to_json(bank.B_shared);
            j["fly_bias"] = matrix_to_json(bank.fly_bias);
            break;
        case Variant::ZipperStatic:
        case Variant::ZipperHard:
        case Variant::ZipperSoft: {
            j["A"] = matrix_to_json(bank.A);
            j["B_shared"] = matrix_to_json(bank.B_shared);
            nlohmann::json bs;
            for (const auto& [lang, m] : bank.B_spec) {
                bs[lang] = matrix_to_json(m);
            }
            j["B_spec"] = bs;
            break;
        }
    }
    return j;
}

AdapterBank bank_from_json(const nlohmann::json& j) {
    AdapterBank bank;
    bank.variant = variant_from_string(j.at("variant").get<std::string>());
    const nlohmann::json& cfg = j.at("config");
    bank.cfg.r = cfg.at("r").get<int>();
    bank.cfg.alpha = cfg.at("alpha").get<double>();
    bank.cfg.d_in = cfg.at("d_in").get<int>();
    bank.cfg.d_out = cfg.at("d_out").get<int>();
    bank.cfg.tau = cfg.at("tau").get<double>();
    bank.cfg.k = cfg.at("k").get<int>();
    bank.cfg.r_s = cfg.at("r_s").get<int>();
    bank.cfg.r_p = cfg.at("r_p").get<int>();
    bank.cfg.fly_density = cfg.at("fly_density").get<double>();
    bank.cfg.hard_polarity = polarity_from_string(cfg.at("hard_polarity").get<std::string>());
    if (j.contains("A")) {
        bank.A = matrix_from_json(j.at("A"));
    }
    if (j.contains("B_shared")) {
        bank.B_shared = matrix_from_json(j.at("B_shared"));
    }
    if (j.contains("fly_bias")) {
        bank.fly_bias = matrix_from_json(j.at("fly_bias"));
    }
    if (j.contains("B_spec")) {
        for (const auto& [lang, m] : j.at("B_spec").items()) {
            bank.B_spec[lang] = matrix_from_json(m);
        }
    }
    if (j.contains("A_spec")) {
        for (const auto& [lang, m] : j.at("A_spec").items()) {
            bank.A_spec[lang] = matrix_from_json(m);
        }
    }
    bank.cfg.validate(bank.variant);
    return bank;
}

MergedDelta vanilla_delta(const AdapterBank& bank) {
    require_variant(bank, Variant::Vanilla, "vanilla_delta");
    return {scale(matmul(bank.B_shared, bank.A), bank.cfg.prefactor()), "", {}};
}

MergedDelta independent_delta(const AdapterBank& bank, const std::string& lang) {
    require_variant(bank, Variant::Independent, "independent_delta");
    const Matrix& b = lang_matrix(bank.B_spec, lang, "independent_delta");
    const Matrix& a = lang_matrix(bank.A_spec, lang, "independent_delta");
    return {scale(matmul(b, a), bank.cfg.prefactor()), lang, {}};
}

std::vector<int> top_k_indices(const std::vector<double>& scores, int k) {
    if (k < 1 || k > static_cast<int>(scores.size())) {
        throw ConfigError("top_k_indices: k=" + std::to_string(k) + " out of range for " +
                          std::to_string(scores.size()) + " scores");
    }
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    // Stable on equal scores, so ties resolve to the lowest index.
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

MergedDelta flylora_delta(const AdapterBank& bank, const Matrix& x_col) {
    require_variant(bank, Variant::FlyLoRA, "flylora_delta");
    if (x_col.cols() != 1 || x_col.rows() != bank.cfg.d_in) {
        throw ShapeError("flylora_delta: expected single column of height " +
                         std::to_string(bank.cfg.d_in) + ", got " + x_col.shape_str());
    }
    const Matrix y = add(matmul(bank.A, x_col), bank.fly_bias);
    std::vector<double> scores(y.vec());
    const std::vector<int> active = top_k_indices(scores, bank.cfg.k);
    Matrix delta(bank.cfg.d_out, bank.cfg.d_in);
    for (int i : active) {
        for (int p = 0; p < bank.cfg.d_out; ++p) {
            const double bv = bank.B_shared(p, i);
            if (bv == 0.0) {
                continue;
            }
            for (int q = 0; q < bank.cfg.d_in; ++q) {
                delta(p, q) += bv * bank.A(i, q);
            }
        }
    }
    std::vector<double> mask(static_cast<std::size_t>(bank.cfg.r), 0.0);
    for (int i : active) {
        mask[static_cast<std::size_t>(i)] = 1.0;
    }
    return {scale(delta, bank.cfg.prefactor()), "", std::move(mask)};
}

Matrix zipper_static_merge(const AdapterBank& bank, const std::string& lang) {
    require_variant(bank, Variant::ZipperStatic, "zipper_static_merge");
    return concat_cols(bank.B_shared, lang_matrix(bank.B_spec, lang, "zipper_static_merge"));
}

std::vector<double> zipper_hard_mask(const std::vector<double>& p, double tau) {
    std::vector<double> s(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        s[i] = p[i] >= tau ? 1.0 : 0.0;
    }
    return s;
}

Matrix zip_columns(const Matrix& b_shared, const Matrix& b_spec, const std::vector<double>& s,
                   HardPolarity polarity) {
    if (!b_shared.same_shape(b_spec) || static_cast<int>(s.size()) != b_shared.cols()) {
        throw ShapeError("zip_columns: banks " + b_shared.shape_str() + "/" + b_spec.shape_str() +
                         " with mask length " + std::to_string(s.size()));
    }
    Matrix out(b_shared.rows(), b_shared.cols());
    for (int j = 0; j < out.cols(); ++j) {
        const bool on = s[static_cast<std::size_t>(j)] != 0.0;
        const bool take_spec = (polarity == HardPolarity::SpecOnOne) == on;
        const Matrix& src = take_spec ? b_spec : b_shared;
        for (int i = 0; i < out.rows(); ++i) {
            out(i, j) = src(i, j);
        }
    }
    return out;
}

Matrix zipper_soft_merge(const Matrix& b_shared, const Matrix& b_spec,
                         const std::vector<double>& p) {
    if (!b_shared.same_shape(b_spec) || static_cast<int>(p.size()) != b_shared.cols()) {
        throw ShapeError("zipper_soft_merge: banks " + b_shared.shape_str() + "/" +
                         b_spec.shape_str() + " with weight length " + std::to_string(p.size()));
    }
    Matrix out(b_shared.rows(), b_shared.cols());
    for (int j = 0; j < out.cols(); ++j) {
        const double w = p[static_cast<std::size_t>(j)];
        for (int i = 0; i < out.rows(); ++i) {
            out(i, j) = b_shared(i, j) * (1.0 - w) + b_spec(i, j) * w;
        }
    }
    return out;
}

MergedDelta zipper_delta(const Matrix& b_merged, const Matrix& a, const LoraConfig& cfg,
                         std::string language, std::vector<double> mixing) {
    return {scale(matmul(b_merged, a), cfg.prefactor()), std::move(language), std::move(mixing)};
}

long long count_trainable_params(Variant v, const LoraConfig& cfg, int num_languages, int d_lid) {
    const long long r = cfg.r, din = cfg.d_in, dout = cfg.d_out, L = num_languages;
    switch (v) {
        case Variant::Vanilla:
            return r * din + dout * r;
        case Variant::Independent:
            return L * (r * din + dout * r);
        case Variant::FlyLoRA:
            return dout * r + r;
        case Variant::ZipperStatic:
            return r * din + dout * cfg.r_s + L * dout * cfg.r_p;
        case Variant::ZipperHard:
        case Variant::ZipperSoft:
            return r * din + dout * r + L * dout * r +
                   (r * static_cast<long long>(d_lid) + r + 2LL * d_lid);
    }
    return 0;
}

namespace {

bool needs_router(Variant v) {
    return v == Variant::ZipperHard || v == Variant::ZipperSoft;
}

Matrix merged_delta_for(const AdapterBank& bank, const std::string& lang,
                        const Matrix* router_p) {
    switch (bank.variant) {
        case Variant::Vanilla:
            return vanilla_delta(bank).delta;
        case Variant::Independent:
            return independent_delta(bank, lang).delta;
        case Variant::ZipperStatic:
            return zipper_delta(zipper_static_merge(bank, lang), bank.A, bank.cfg, lang, {})
                .delta;
        case Variant::ZipperHard: {
            const std::vector<double> s =
                zipper_hard_mask(router_p->vec(), bank.cfg.tau);
            Matrix bm = zip_columns(bank.B_shared,
                                    lang_matrix(bank.B_spec, lang, "adapted_forward"), s,
                                    bank.cfg.hard_polarity);
            return zipper_delta(bm, bank.A, bank.cfg, lang, s).delta;
        }
        case Variant::ZipperSoft: {
            Matrix bm = zipper_soft_merge(
                bank.B_shared, lang_matrix(bank.B_spec, lang, "adapted_forward"),
                router_p->vec());
            return zipper_delta(bm, bank.A, bank.cfg, lang, router_p->vec()).delta;
        }
        case Variant::FlyLoRA:
            throw ContractError("merged_delta_for: FlyLoRA delta is per input column");
    }
    throw ContractError("merged_delta_for: unreachable");
}

} // namespace

Matrix adapted_forward(const Matrix& w0, const AdapterBank& bank, const std::string& lang,
                       const Matrix& x, const Matrix* router_p) {
    if (needs_router(bank.variant) && router_p == nullptr) {
        throw ContractError("adapted_forward: " + to_string(bank.variant) +
                            " requires routing weights");
    }
    if (!needs_router(bank.variant) && router_p != nullptr) {
        throw ContractError("adapted_forward: " + to_string(bank.variant) +
                            " does not take routing weights");
    }
    const Matrix base = matmul(w0, x);
    if (bank.variant == Variant::FlyLoRA) {
        Matrix out = base;
        for (int j = 0; j < x.cols(); ++j) {
            const Matrix col = select_cols(x, j, 1);
            const Matrix dx = matmul(flylora_delta(bank, col).delta, col);
            for (int i = 0; i < out.rows(); ++i) {
                out(i, j) += dx(i, 0);
            }
        }
        return out;
    }
    return add(base, matmul(merged_delta_for(bank, lang, router_p), x));
}

BankTapeIds stage_bank(Tape& t, const AdapterBank& bank, const std::string& lang,
                       std::map<std::string, NodeId>* registry, const std::string& prefix) {
    BankTapeIds ids;
    auto put = [&](const char* field, const Matrix& m) {
        NodeId id = t.leaf(m);
        if (registry) {
            (*registry)[prefix + "." + field] = id;
        }
        return id;
    };
    switch (bank.variant) {
        case Variant::Vanilla:
        case Variant::FlyLoRA:
            ids.A = put("A", bank.A);
            ids.B_shared = put("B_shared", bank.B_shared);
            if (bank.variant == Variant::FlyLoRA) {
                ids.fly_bias = put("fly_bias", bank.fly_bias);
            }
            break;
        case Variant::Independent:
            ids.A_spec = put(("A_spec." + lang).c_str(),
                             lang_matrix(bank.A_spec, lang, "stage_bank"));
            ids.B_spec = put(("B_spec." + lang).c_str(),
                             lang_matrix(bank.B_spec, lang, "stage_bank"));
            break;
        case Variant::ZipperStatic:
        case Variant::ZipperHard:
        case Variant::ZipperSoft:
            ids.A = put("A", bank.A);
            ids.B_shared = put("B_shared", bank.B_shared);
            ids.B_spec = put(("B_spec." + lang).c_str(),
                             lang_matrix(bank.B_spec, lang, "stage_bank"));
            break;
    }
    return ids;
}

NodeId adapted_apply(Tape& t, BankTapeIds& ids, const AdapterBank& bank, const std::string& lang,
                     NodeId w0, NodeId x, std::optional<NodeId> router_p) {
    if (needs_router(bank.variant) && !router_p) {
        throw ContractError("adapted_apply: " + to_string(bank.variant) +
                            " requires routing weights");
    }
    if (!needs_router(bank.variant) && router_p) {
        throw ContractError("adapted_apply: " + to_string(bank.variant) +
                            " does not take routing weights");
    }
    const NodeId base = t.matmul(w0, x);

    if (bank.variant == Variant::FlyLoRA) {
        // Scores and the resulting mask stay out of the gradient path; the
        // selection is a constant of the step.
        const NodeId ax = t.matmul(ids.A, x);
        const Matrix& scores = t.value(ax);
        Matrix mask(scores.rows(), scores.cols());
        for (int j = 0; j < scores.cols(); ++j) {
            std::vector<double> col(static_cast<std::size_t>(scores.rows()));
            for (int i = 0; i < scores.rows(); ++i) {
                col[static_cast<std::size_t>(i)] = scores(i, j) + bank.fly_bias(i, 0);
            }
            for (int i : top_k_indices(col, bank.cfg.k)) {
                mask(i, j) = 1.0;
            }
        }
        const NodeId masked = t.hadamard(ax, t.leaf(mask));
        return t.add(base, t.scale(t.matmul(ids.B_shared, masked), bank.cfg.prefactor()));
    }

    if (ids.delta < 0) {
        switch (bank.variant) {
            case Variant::Vanilla:
                ids.delta = t.scale(t.matmul(ids.B_shared, ids.A), bank.cfg.prefactor());
                break;
            case Variant::Independent:
                ids.delta = t.scale(t.matmul(ids.B_spec, ids.A_spec), bank.cfg.prefactor());
                break;
            case Variant::ZipperStatic: {
                const NodeId merged = t.concat_cols({ids.B_shared, ids.B_spec});
                ids.delta = t.scale(t.matmul(merged, ids.A), bank.cfg.prefactor());
                break;
            }
            case Variant::ZipperHard:
            case Variant::ZipperSoft: {
                NodeId gate = *router_p;
                if (bank.variant == Variant::ZipperHard) {
                    gate = t.ste_threshold(gate, bank.cfg.tau);
                }
                const NodeId ones = t.leaf(Matrix::filled(bank.cfg.r, 1, 1.0));
                NodeId w_spec = gate;
                NodeId w_shared = t.sub(ones, gate);
                if (bank.cfg.hard_polarity == HardPolarity::SharedOnOne &&
                    bank.variant == Variant::ZipperHard) {
                    std::swap(w_spec, w_shared);
                }
                const NodeId merged = t.add(t.diag_scale_cols(ids.B_shared, w_shared),
                                            t.diag_scale_cols(ids.B_spec, w_spec));
                ids.delta = t.scale(t.matmul(merged, ids.A), bank.cfg.prefactor());
                break;
            }
            case Variant::FlyLoRA:
                break;
        }
    }
    (void)lang;
    return t.add(base, t.matmul(ids.delta, x));
}

} // namespace zlora
