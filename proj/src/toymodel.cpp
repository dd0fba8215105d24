// SPDX-License-Identifier: Apache-2.0

#include "zlora/toymodel.hpp"

#include <cmath>

#include "zlora/errors.hpp"
#include "zlora/rng.hpp"
#include "zlora/serialize.hpp"

namespace zlora {

void ModelConfig::validate() const {
    if (width < 1 || depth < 1 || seq_len < 1 || stack_factor < 1 || target_dim < 1 ||
        d_lid < 1) {
        throw ConfigError("model dimensions must all be >= 1");
    }
    if (languages.empty()) {
        throw ConfigError("model.languages must be non-empty");
    }
    for (int c : chunk_lengths) {
        if (c <= 0) {
            throw ConfigError("model.chunk_lengths entries must be positive");
        }
    }
    std::set<std::string> uniq(languages.begin(), languages.end());
    if (uniq.size() != languages.size()) {
        throw ConfigError("model.languages contains duplicates");
    }
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
    j["width"] = width;
    j["depth"] = depth;
    j["seq_len"] = seq_len;
    j["stack_factor"] = stack_factor;
    j["target_dim"] = target_dim;
    j["d_lid"] = d_lid;
    j["chunk_lengths"] = chunk_lengths;
    j["languages"] = languages;
    nlohmann::json lj;
    lj["r"] = lora.r;
    lj["alpha"] = lora.alpha;
    lj["tau"] = lora.tau;
    lj["k"] = lora.k;
    lj["r_s"] = lora.r_s;
    lj["r_p"] = lora.r_p;
    lj["fly_density"] = lora.fly_density;
    lj["hard_polarity"] = to_string(lora.hard_polarity);
    j["lora"] = lj;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.width = j.at("width").get<int>();
    c.depth = j.at("depth").get<int>();
    c.seq_len = j.at("seq_len").get<int>();
    c.stack_factor = j.at("stack_factor").get<int>();
    c.target_dim = j.at("target_dim").get<int>();
    c.d_lid = j.at("d_lid").get<int>();
    c.chunk_lengths = j.at("chunk_lengths").get<std::vector<int>>();
    c.languages = j.at("languages").get<std::vector<std::string>>();
    const nlohmann::json& lj = j.at("lora");
    c.lora.r = lj.at("r").get<int>();
    c.lora.alpha = lj.at("alpha").get<double>();
    c.lora.tau = lj.at("tau").get<double>();
    c.lora.k = lj.at("k").get<int>();
    c.lora.r_s = lj.at("r_s").get<int>();
    c.lora.r_p = lj.at("r_p").get<int>();
    c.lora.fly_density = lj.at("fly_density").get<double>();
    c.lora.hard_polarity = polarity_from_string(lj.at("hard_polarity").get<std::string>());
    c.validate();
    return c;
}

std::vector<std::pair<int, int>> chunk_split(int t, int chunk_len) {
    if (t < 1 || chunk_len < 1) {
        throw ConfigError("chunk_split: T and chunk_len must be >= 1");
    }
    std::vector<std::pair<int, int>> out;
    for (int start = 0; start < t; start += chunk_len) {
        out.emplace_back(start, std::min(chunk_len, t - start));
    }
    return out;
}

namespace {

Matrix init_linear(int d_out, int d_in, std::uint64_t seed) {
    SplitMix64 rng(seed);
    return Matrix::gaussian(d_out, d_in, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
}

struct LayerShape {
    int d_out;
    int d_in;
};

} // namespace

ToyModel::ToyModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int d = cfg_.width;
    for (int b = 0; b < cfg_.depth; ++b) {
        const std::string p = "enc." + std::to_string(b) + ".";
        EncoderBlockParams blk;
        blk.q = init_linear(d, d, derive_seed(seed, p + "q"));
        blk.k = init_linear(d, d, derive_seed(seed, p + "k"));
        blk.v = init_linear(d, d, derive_seed(seed, p + "v"));
        blk.o = init_linear(d, d, derive_seed(seed, p + "o"));
        blk.ffn1 = init_linear(2 * d, d, derive_seed(seed, p + "ffn1"));
        blk.ffn2 = init_linear(d, 2 * d, derive_seed(seed, p + "ffn2"));
        blocks_.push_back(std::move(blk));
    }
    const int fd = cfg_.stack_factor * d;
    proj_.gate = init_linear(d, fd, derive_seed(seed, "proj.gate"));
    proj_.gate_b = Matrix(d, 1);
    proj_.up = init_linear(d, fd, derive_seed(seed, "proj.up"));
    proj_.up_b = Matrix(d, 1);
    proj_.out = init_linear(d, d, derive_seed(seed, "proj.out"));
    proj_.out_b = Matrix(d, 1);
    proj_.ln_gamma = Matrix::filled(d, 1, 1.0);
    proj_.ln_beta = Matrix(d, 1);
    for (const std::string& lang : cfg_.languages) {
        SplitMix64 rng(derive_seed(seed, "prompt." + lang));
        prompts_[lang] = Matrix::gaussian(d, 1, rng, 1.0);
    }
    head_ = init_linear(cfg_.target_dim, d, derive_seed(seed, "head"));
    LoraConfig hc = cfg_.lora;
    hc.d_in = d;
    hc.d_out = cfg_.target_dim;
    head_adapter_ = make_bank(Variant::Vanilla, hc, {}, derive_seed(seed, "head_adapter"));
}

void ToyModel::set_lid_embeddings(std::map<std::string, Matrix> lid) {
    for (const std::string& lang : cfg_.languages) {
        auto it = lid.find(lang);
        if (it == lid.end()) {
            throw KeyError("lid embeddings missing language \"" + lang + "\"");
        }
        if (it->second.rows() != cfg_.d_lid || it->second.cols() != 1) {
            throw ShapeError("lid embedding for \"" + lang + "\" is " +
                             it->second.shape_str() + ", expected (" +
                             std::to_string(cfg_.d_lid) + "x1)");
        }
    }
    lid_ = std::move(lid);
}

std::vector<std::string> ToyModel::adapted_layer_names() const {
    std::vector<std::string> names;
    for (int b = 0; b < cfg_.depth; ++b) {
        const std::string p = "enc." + std::to_string(b) + ".";
        for (const char* s : {"q", "k", "v", "o", "ffn1", "ffn2"}) {
            names.push_back(p + s);
        }
    }
    return names;
}

namespace {

LayerShape layer_shape(const std::string& name, int d) {
    const std::string leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "ffn1") {
        return {2 * d, d};
    }
    if (leaf == "ffn2") {
        return {d, 2 * d};
    }
    return {d, d};
}

} // namespace

void ToyModel::attach_adapters(Variant v, std::uint64_t seed) {
    const bool routed = v == Variant::ZipperHard || v == Variant::ZipperSoft;
    if (routed && lid_.empty()) {
        throw ContractError("attach_adapters: routed variant requires LID embeddings");
    }
    enc_adapters_.clear();
    routers_.clear();
    for (const std::string& name : adapted_layer_names()) {
        LoraConfig lc = cfg_.lora;
        const LayerShape sh = layer_shape(name, cfg_.width);
        lc.d_in = sh.d_in;
        lc.d_out = sh.d_out;
        enc_adapters_.emplace(name,
                              make_bank(v, lc, cfg_.languages, derive_seed(seed, "adapters." + name)));
        if (routed) {
            routers_.emplace(name,
                             make_router(lc.r, cfg_.d_lid, derive_seed(seed, "routers." + name)));
        }
    }
    variant_ = v;
}

void ToyModel::detach_adapters() {
    enc_adapters_.clear();
    routers_.clear();
    variant_.reset();
}

void ToyModel::reinit_head_adapter(std::uint64_t seed) {
    LoraConfig hc = cfg_.lora;
    hc.d_in = cfg_.width;
    hc.d_out = cfg_.target_dim;
    head_adapter_ = make_bank(Variant::Vanilla, hc, {}, derive_seed(seed, "head_adapter"));
}

std::map<std::string, Matrix*> ToyModel::named_params() {
    std::map<std::string, Matrix*> out;
    for (int b = 0; b < cfg_.depth; ++b) {
        const std::string p = "enc." + std::to_string(b) + ".";
        EncoderBlockParams& blk = blocks_[static_cast<std::size_t>(b)];
        out[p + "q"] = &blk.q;
        out[p + "k"] = &blk.k;
        out[p + "v"] = &blk.v;
        out[p + "o"] = &blk.o;
        out[p + "ffn1"] = &blk.ffn1;
        out[p + "ffn2"] = &blk.ffn2;
    }
    out["proj.gate"] = &proj_.gate;
    out["proj.gate_b"] = &proj_.gate_b;
    out["proj.up"] = &proj_.up;
    out["proj.up_b"] = &proj_.up_b;
    out["proj.out"] = &proj_.out;
    out["proj.out_b"] = &proj_.out_b;
    out["proj.ln_gamma"] = &proj_.ln_gamma;
    out["proj.ln_beta"] = &proj_.ln_beta;
    for (auto& [lang, m] : prompts_) {
        out["prompt." + lang] = &m;
    }
    out["head"] = &head_;
    out["adapters.head.A"] = &head_adapter_.A;
    out["adapters.head.B_shared"] = &head_adapter_.B_shared;
    for (auto& [layer, bank] : enc_adapters_) {
        const std::string p = "adapters." + layer + ".";
        switch (bank.variant) {
            case Variant::Vanilla:
            case Variant::FlyLoRA:
                out[p + "A"] = &bank.A;
                out[p + "B_shared"] = &bank.B_shared;
                if (bank.variant == Variant::FlyLoRA) {
                    out[p + "fly_bias"] = &bank.fly_bias;
                }
                break;
            case Variant::Independent:
                for (auto& [lang, m] : bank.A_spec) {
                    out[p + "A_spec." + lang] = &m;
                }
                for (auto& [lang, m] : bank.B_spec) {
                    out[p + "B_spec." + lang] = &m;
                }
                break;
            case Variant::ZipperStatic:
            case Variant::ZipperHard:
            case Variant::ZipperSoft:
                out[p + "A"] = &bank.A;
                out[p + "B_shared"] = &bank.B_shared;
                for (auto& [lang, m] : bank.B_spec) {
                    out[p + "B_spec." + lang] = &m;
                }
                break;
        }
    }
    for (auto& [layer, rp] : routers_) {
        const std::string p = layer + ".router.";
        out[p + "W"] = &rp.W;
        out[p + "b"] = &rp.b;
        out[p + "gamma"] = &rp.gamma;
        out[p + "beta"] = &rp.beta;
    }
    for (auto& [lang, m] : lid_) {
        out["lid." + lang] = &m;
    }
    return out;
}

std::map<std::string, const Matrix*> ToyModel::named_params() const {
    std::map<std::string, const Matrix*> out;
    for (auto& [name, m] : const_cast<ToyModel*>(this)->named_params()) {
        out[name] = m;
    }
    return out;
}

std::set<std::string> ToyModel::trainable_names(int stage, bool adapters_only,
                                                bool train_lid) const {
    std::set<std::string> out;
    if (stage == 1) {
        if (variant_) {
            throw ConfigError("stage 1 must run without encoder adapters attached");
        }
        for (const std::string& name : adapted_layer_names()) {
            out.insert(name);
        }
    } else if (stage == 2) {
        if (!variant_) {
            throw ConfigError("stage 2 requires encoder adapters");
        }
        for (const auto& [layer, bank] : enc_adapters_) {
            const std::string p = "adapters." + layer + ".";
            switch (bank.variant) {
                case Variant::Vanilla:
                    out.insert(p + "A");
                    out.insert(p + "B_shared");
                    break;
                case Variant::FlyLoRA:
                    // A stays frozen; the load-balancing bias is nominally
                    // trainable even though the hard selection blocks its
                    // gradient.
                    out.insert(p + "B_shared");
                    out.insert(p + "fly_bias");
                    break;
                case Variant::Independent:
                    for (const auto& [lang, m] : bank.A_spec) {
                        (void)m;
                        out.insert(p + "A_spec." + lang);
                    }
                    for (const auto& [lang, m] : bank.B_spec) {
                        (void)m;
                        out.insert(p + "B_spec." + lang);
                    }
                    break;
                case Variant::ZipperStatic:
                case Variant::ZipperHard:
                case Variant::ZipperSoft:
                    out.insert(p + "A");
                    out.insert(p + "B_shared");
                    for (const auto& [lang, m] : bank.B_spec) {
                        (void)m;
                        out.insert(p + "B_spec." + lang);
                    }
                    break;
            }
        }
        for (const auto& [layer, rp] : routers_) {
            (void)rp;
            out.insert(layer + ".router.W");
            out.insert(layer + ".router.b");
            out.insert(layer + ".router.gamma");
            out.insert(layer + ".router.beta");
        }
        if (train_lid) {
            for (const auto& [lang, m] : lid_) {
                (void)m;
                out.insert("lid." + lang);
            }
        }
    } else {
        throw ConfigError("stage must be 1 or 2, got " + std::to_string(stage));
    }
    if (!adapters_only) {
        out.insert({"proj.gate", "proj.gate_b", "proj.up", "proj.up_b", "proj.out",
                    "proj.out_b", "proj.ln_gamma", "proj.ln_beta"});
        out.insert("adapters.head.A");
        out.insert("adapters.head.B_shared");
        for (const auto& [lang, m] : prompts_) {
            (void)m;
            out.insert("prompt." + lang);
        }
    } else if (stage == 1) {
        throw ConfigError("adapters_only is a stage-2 setting");
    }
    return out;
}

struct ToyModel::Fwd {
    Tape* t = nullptr;
    std::map<std::string, NodeId>* staged = nullptr;
    std::string lang;
    std::map<std::string, BankTapeIds> banks;
    std::map<std::string, NodeId> routed_p;
    BankTapeIds head_ids;
    bool head_staged = false;
};

NodeId ToyModel::stage_named(Fwd& f, const std::string& name, const Matrix& m) const {
    auto it = f.staged->find(name);
    if (it != f.staged->end()) {
        return it->second;
    }
    const NodeId id = f.t->leaf(m);
    (*f.staged)[name] = id;
    return id;
}

const Matrix& ToyModel::base_weight(const std::string& layer) const {
    const std::size_t dot1 = layer.find('.');
    const std::size_t dot2 = layer.find('.', dot1 + 1);
    const int b = std::stoi(layer.substr(dot1 + 1, dot2 - dot1 - 1));
    const std::string leaf = layer.substr(dot2 + 1);
    const EncoderBlockParams& blk = blocks_.at(static_cast<std::size_t>(b));
    if (leaf == "q") return blk.q;
    if (leaf == "k") return blk.k;
    if (leaf == "v") return blk.v;
    if (leaf == "o") return blk.o;
    if (leaf == "ffn1") return blk.ffn1;
    if (leaf == "ffn2") return blk.ffn2;
    throw KeyError("unknown encoder layer \"" + layer + "\"");
}

NodeId ToyModel::adapted_linear(Fwd& f, const std::string& layer, NodeId x) const {
    const NodeId w0n = stage_named(f, layer, base_weight(layer));
    auto bit = enc_adapters_.find(layer);
    if (bit == enc_adapters_.end()) {
        return f.t->matmul(w0n, x);
    }
    const AdapterBank& bank = bit->second;
    auto ids_it = f.banks.find(layer);
    if (ids_it == f.banks.end()) {
        BankTapeIds ids =
            stage_bank(*f.t, bank, f.lang, f.staged, "adapters." + layer);
        ids_it = f.banks.emplace(layer, ids).first;
    }
    std::optional<NodeId> p;
    if (bank.variant == Variant::ZipperHard || bank.variant == Variant::ZipperSoft) {
        auto pit = f.routed_p.find(layer);
        if (pit == f.routed_p.end()) {
            const RouterParams& rp = routers_.at(layer);
            RouterTapeIds rids;
            rids.W = stage_named(f, layer + ".router.W", rp.W);
            rids.b = stage_named(f, layer + ".router.b", rp.b);
            rids.gamma = stage_named(f, layer + ".router.gamma", rp.gamma);
            rids.beta = stage_named(f, layer + ".router.beta", rp.beta);
            auto lit = lid_.find(f.lang);
            if (lit == lid_.end()) {
                throw KeyError("no LID embedding for language \"" + f.lang + "\"");
            }
            const NodeId e = stage_named(f, "lid." + f.lang, lit->second);
            pit = f.routed_p.emplace(layer, route_on_tape(*f.t, rids, e, rp.eps)).first;
        }
        p = pit->second;
    }
    return adapted_apply(*f.t, ids_it->second, bank, f.lang, w0n, x, p);
}

NodeId ToyModel::encoder_segment(Fwd& f, NodeId h) const {
    Tape& t = *f.t;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.width));
    for (int b = 0; b < cfg_.depth; ++b) {
        const std::string p = "enc." + std::to_string(b) + ".";
        const NodeId q = adapted_linear(f, p + "q", h);
        const NodeId k = adapted_linear(f, p + "k", h);
        const NodeId v = adapted_linear(f, p + "v", h);
        const NodeId scores = t.scale(t.matmul(t.transpose(q), k), inv_sqrt_d);
        const NodeId attn = t.softmax_rows(scores);
        const NodeId mixed = t.matmul(v, t.transpose(attn));
        const NodeId o = adapted_linear(f, p + "o", mixed);
        h = t.add(h, o);
        const NodeId f1 = t.silu(adapted_linear(f, p + "ffn1", h));
        const NodeId f2 = adapted_linear(f, p + "ffn2", f1);
        h = t.add(h, f2);
    }
    return h;
}

NodeId ToyModel::encode_on_tape(Fwd& f, const Matrix& x, std::optional<int> chunk_len) const {
    if (x.rows() != cfg_.seq_len || x.cols() != cfg_.width) {
        throw ShapeError("encode: input " + x.shape_str() + ", expected (" +
                         std::to_string(cfg_.seq_len) + "x" + std::to_string(cfg_.width) + ")");
    }
    if (!x.all_finite()) {
        throw ContractError("encode: non-finite input");
    }
    Tape& t = *f.t;
    const NodeId h0 = t.leaf(transpose(x)); // width x T, columns are frames
    if (!chunk_len) {
        return encoder_segment(f, h0);
    }
    if (*chunk_len <= 0) {
        throw ConfigError("encode: chunk_len must be positive");
    }
    const auto segments = chunk_split(cfg_.seq_len, *chunk_len);
    if (segments.size() == 1) {
        return encoder_segment(f, h0);
    }
    std::vector<NodeId> parts;
    parts.reserve(segments.size());
    for (const auto& [start, len] : segments) {
        parts.push_back(encoder_segment(f, t.select_cols(h0, start, len)));
    }
    return t.concat_cols(parts);
}

NodeId ToyModel::project_on_tape(Fwd& f, NodeId h_enc) const {
    Tape& t = *f.t;
    const NodeId stacked = t.stack_cols(h_enc, cfg_.stack_factor);
    const NodeId gate_w = stage_named(f, "proj.gate", proj_.gate);
    const NodeId gate_b = stage_named(f, "proj.gate_b", proj_.gate_b);
    const NodeId up_w = stage_named(f, "proj.up", proj_.up);
    const NodeId up_b = stage_named(f, "proj.up_b", proj_.up_b);
    const NodeId out_w = stage_named(f, "proj.out", proj_.out);
    const NodeId out_b = stage_named(f, "proj.out_b", proj_.out_b);
    const NodeId ln_g = stage_named(f, "proj.ln_gamma", proj_.ln_gamma);
    const NodeId ln_b = stage_named(f, "proj.ln_beta", proj_.ln_beta);
    const NodeId gate = t.silu(t.add_bias_cols(t.matmul(gate_w, stacked), gate_b));
    const NodeId up = t.add_bias_cols(t.matmul(up_w, stacked), up_b);
    const NodeId fused = t.hadamard(gate, up);
    const NodeId mixed = t.add_bias_cols(t.matmul(out_w, fused), out_b);
    // Post-norm residual: normalize after adding the output map back in.
    return t.layernorm_cols(t.add(fused, mixed), ln_g, ln_b, 1e-5);
}

NodeId ToyModel::forward_on_tape(Fwd& f, const Matrix& x, std::optional<int> chunk_len) const {
    Tape& t = *f.t;
    const NodeId henc = encode_on_tape(f, x, chunk_len);
    const NodeId hproj = project_on_tape(f, henc);

    auto pit = prompts_.find(f.lang);
    if (pit == prompts_.end()) {
        throw KeyError("no prompt for language \"" + f.lang + "\"");
    }
    const NodeId prompt = stage_named(f, "prompt." + f.lang, pit->second);
    const NodeId z = t.concat_cols({prompt, hproj});

    const NodeId pooled = t.mean_cols(z);
    const NodeId head_w = stage_named(f, "head", head_);
    if (!f.head_staged) {
        f.head_ids = stage_bank(t, head_adapter_, "", f.staged, "adapters.head");
        f.head_staged = true;
    }
    return adapted_apply(t, f.head_ids, head_adapter_, "", head_w, pooled, std::nullopt);
}

Matrix ToyModel::encode(const Matrix& x, const std::string& lang,
                        std::optional<int> chunk_len) const {
    Tape t;
    std::map<std::string, NodeId> staged;
    Fwd f;
    f.t = &t;
    f.staged = &staged;
    f.lang = lang;
    return t.value(encode_on_tape(f, x, chunk_len));
}

Matrix ToyModel::project(const Matrix& h_enc) const {
    if (h_enc.rows() != cfg_.width || h_enc.cols() < 1) {
        throw ShapeError("project: input " + h_enc.shape_str() + ", expected (" +
                         std::to_string(cfg_.width) + " x >=1)");
    }
    Tape t;
    std::map<std::string, NodeId> staged;
    Fwd f;
    f.t = &t;
    f.staged = &staged;
    return t.value(project_on_tape(f, t.leaf(h_enc)));
}

Matrix ToyModel::prepend_prompt(const Matrix& h_proj, const std::string& lang) const {
    auto it = prompts_.find(lang);
    if (it == prompts_.end()) {
        throw KeyError("no prompt for language \"" + lang + "\"");
    }
    return concat_cols(it->second, h_proj);
}

Matrix ToyModel::forward(const Matrix& x, const std::string& lang,
                         std::optional<int> chunk_len) const {
    Tape t;
    std::map<std::string, NodeId> staged;
    Fwd f;
    f.t = &t;
    f.staged = &staged;
    f.lang = lang;
    return t.value(forward_on_tape(f, x, chunk_len));
}

ToyModel::LossBuild ToyModel::build_loss(
    const std::vector<std::pair<const Matrix*, const Matrix*>>& batch, const std::string& lang,
    std::optional<int> chunk_len) const {
    if (batch.empty()) {
        throw ContractError("build_loss: empty batch");
    }
    LossBuild lb;
    Fwd f;
    f.t = &lb.tape;
    f.staged = &lb.staged;
    f.lang = lang;
    Tape& t = lb.tape;
    NodeId total = -1;
    for (const auto& [x, y] : batch) {
        const NodeId yhat = forward_on_tape(f, *x, chunk_len);
        if (y->rows() != cfg_.target_dim || y->cols() != 1) {
            throw ShapeError("build_loss: target " + y->shape_str() + ", expected (" +
                             std::to_string(cfg_.target_dim) + "x1)");
        }
        const NodeId diff = t.sub(yhat, t.leaf(*y));
        const NodeId se = t.sum(t.hadamard(diff, diff));
        total = total < 0 ? se : t.add(total, se);
    }
    lb.loss = t.scale(total, 1.0 / (static_cast<double>(batch.size()) * cfg_.target_dim));
    if (!f.routed_p.empty()) {
        double acc = 0.0;
        std::size_t n = 0;
        for (const auto& [layer, pid] : f.routed_p) {
            const Matrix& p = t.value(pid);
            for (double v : p.vec()) {
                acc += v;
            }
            n += p.size();
        }
        lb.mean_p = acc / static_cast<double>(n);
    }
    return lb;
}

std::vector<double> ToyModel::routing_profile(const std::string& lang) const {
    if (!variant_ || (*variant_ != Variant::ZipperHard && *variant_ != Variant::ZipperSoft)) {
        return {};
    }
    auto lit = lid_.find(lang);
    if (lit == lid_.end()) {
        throw KeyError("routing_profile: no LID embedding for \"" + lang + "\"");
    }
    std::vector<double> acc(static_cast<std::size_t>(cfg_.lora.r), 0.0);
    for (const auto& [layer, rp] : routers_) {
        const Matrix p = route(rp, lit->second);
        for (int i = 0; i < p.rows(); ++i) {
            acc[static_cast<std::size_t>(i)] += p(i, 0);
        }
    }
    for (double& v : acc) {
        v /= static_cast<double>(routers_.size());
    }
    return acc;
}

nlohmann::json ToyModel::to_json(int stage) const {
    nlohmann::json j;
    j["stage"] = stage;
    j["config"] = cfg_.to_json();
    nlohmann::json params;
    for (const auto& [name, m] : named_params()) {
        if (name.rfind("adapters.", 0) == 0 && name != "adapters.head.A" &&
            name != "adapters.head.B_shared") {
            continue; // encoder banks serialize as structured banks below
        }
        params[name] = matrix_to_json(*m);
    }
    j["params"] = params;
    if (variant_) {
        j["variant"] = to_string(*variant_);
        nlohmann::json banks;
        for (const auto& [layer, bank] : enc_adapters_) {
            banks[layer] = bank_to_json(bank);
        }
        j["adapter_banks"] = banks;
    }
    return j;
}

ToyModel ToyModel::from_json(const nlohmann::json& j) {
    ToyModel m(ModelConfig::from_json(j.at("config")), 0);
    std::map<std::string, Matrix> lid;
    for (const auto& [key, val] : j.at("params").items()) {
        if (key.rfind("lid.", 0) == 0) {
            lid[key.substr(4)] = matrix_from_json(val);
        }
    }
    if (!lid.empty()) {
        m.set_lid_embeddings(std::move(lid));
    }
    if (j.contains("variant")) {
        m.attach_adapters(variant_from_string(j.at("variant").get<std::string>()), 0);
        for (const auto& [layer, bj] : j.at("adapter_banks").items()) {
            auto it = m.enc_adapters_.find(layer);
            if (it == m.enc_adapters_.end()) {
                throw CompatibilityError("checkpoint bank for unknown layer \"" + layer + "\"");
            }
            it->second = bank_from_json(bj);
        }
    }
    auto params = m.named_params();
    for (const auto& [key, val] : j.at("params").items()) {
        if (key.rfind("lid.", 0) == 0) {
            continue;
        }
        auto it = params.find(key);
        if (it == params.end()) {
            throw CompatibilityError("checkpoint parameter \"" + key +
                                     "\" does not exist in this configuration");
        }
        Matrix loaded = matrix_from_json(val);
        if (!loaded.same_shape(*it->second)) {
            throw CompatibilityError("checkpoint parameter \"" + key + "\" has shape " +
                                     loaded.shape_str() + ", expected " +
                                     it->second->shape_str());
        }
        *it->second = std::move(loaded);
    }
    return m;
}

std::uint64_t ToyModel::params_hash(const std::set<std::string>& names) const {
    auto params = named_params();
    std::uint64_t h = 1469598103934665603ull;
    auto mix_bytes = [&h](const void* data, std::size_t len) {
        const unsigned char* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const std::string& name : names) {
        auto it = params.find(name);
        if (it == params.end()) {
            throw KeyError("params_hash: unknown parameter \"" + name + "\"");
        }
        mix_bytes(name.data(), name.size());
        mix_bytes(it->second->data(), it->second->size() * sizeof(double));
    }
    return h;
}

} // namespace zlora
