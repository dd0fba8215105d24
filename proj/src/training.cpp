// SPDX-License-Identifier: Apache-2.0

#include "zlora/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

#include "zlora/errors.hpp"
#include "zlora/rng.hpp"
#include "zlora/serialize.hpp"

namespace zlora {

namespace {

bool warm_selected(const std::string& name, const WarmStartFlags& f) {
    const bool enc_bank = name.rfind("adapters.enc.", 0) == 0;
    if (f.load_b_shared && enc_bank && name.size() >= 9 &&
        name.compare(name.size() - 9, 9, ".B_shared") == 0) {
        return true;
    }
    if (f.load_b_spec && enc_bank && name.find(".B_spec.") != std::string::npos) {
        return true;
    }
    if (f.load_router && name.find(".router.") != std::string::npos) {
        return true;
    }
    return false;
}

}  // namespace

double lr_at(int step, int total_steps, double base_lr, double warmup_ratio) {
    if (total_steps < 1) {
        throw ContractError("lr_at: total_steps must be >= 1");
    }
    if (step < 0 || step > total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
    }
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) {
        throw ContractError("lr_at: warmup_ratio outside [0, 1]");
    }
    const double w = warmup_ratio * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (s < w) {
        return base_lr * s / w;
    }
    if (static_cast<double>(total_steps) == w) {
        return base_lr;
    }
    const double progress = (s - w) / (static_cast<double>(total_steps) - w);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamState::step(const std::map<std::string, Matrix*>& params,
                     const std::map<std::string, Matrix>& grads, double lr) {
    for (const auto& [name, g] : grads) {
        const auto it = params.find(name);
        if (it == params.end()) {
            throw KeyError("optim step: unknown parameter " + name);
        }
        Matrix& p = *it->second;
        if (!p.same_shape(g)) {
            throw ShapeError("optim step: gradient " + g.shape_str() + " does not match " +
                             p.shape_str() + " for " + name);
        }
        if (max_abs(g) == 0.0) {
            continue;
        }
        Slot& slot = slots_[name];
        if (slot.m.empty()) {
            slot.m = Matrix(p.rows(), p.cols());
            slot.v = Matrix(p.rows(), p.cols());
        }
        slot.t += 1;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(slot.t));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(slot.t));
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g.vec()[i];
            double& m = slot.m.vec()[i];
            double& v = slot.v.vec()[i];
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gi;
            v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gi * gi;
            p.vec()[i] -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
        }
    }
}

nlohmann::json AdamState::to_json() const {
    nlohmann::json j;
    j["beta1"] = cfg_.beta1;
    j["beta2"] = cfg_.beta2;
    j["eps"] = cfg_.eps;
    nlohmann::json slots = nlohmann::json::object();
    for (const auto& [name, slot] : slots_) {
        slots[name] = {{"m", matrix_to_json(slot.m)},
                       {"v", matrix_to_json(slot.v)},
                       {"t", slot.t}};
    }
    j["slots"] = std::move(slots);
    return j;
}

AdamState AdamState::from_json(const nlohmann::json& j) {
    AdamConfig cfg;
    cfg.beta1 = j.at("beta1").get<double>();
    cfg.beta2 = j.at("beta2").get<double>();
    cfg.eps = j.at("eps").get<double>();
    AdamState state(cfg);
    for (const auto& [name, s] : j.at("slots").items()) {
        Slot slot;
        slot.m = matrix_from_json(s.at("m"));
        slot.v = matrix_from_json(s.at("v"));
        slot.t = s.at("t").get<std::int64_t>();
        state.slots_.emplace(name, std::move(slot));
    }
    return state;
}

void StageConfig::validate() const {
    if (stage != 1 && stage != 2) {
        throw ConfigError("train.stage must be 1 or 2, got " + std::to_string(stage));
    }
    if (steps < 1) {
        throw ConfigError("train.steps must be >= 1");
    }
    if (batch_size < 1) {
        throw ConfigError("train.batch_size must be >= 1");
    }
    if (!(base_lr > 0.0)) {
        throw ConfigError("train.base_lr must be positive");
    }
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) {
        throw ConfigError("train.warmup_ratio must lie in [0, 1]");
    }
    if (schedule != "cosine" && schedule != "constant") {
        throw ConfigError("train.schedule must be \"cosine\" or \"constant\", got \"" + schedule +
                          "\"");
    }
}

std::string metrics_csv_header() {
    return "step,stage,variant,language,mse,normalized_error,lr,mean_p";
}

std::string metric_row_csv(const MetricRow& r) {
    std::string out = std::to_string(r.step) + "," + std::to_string(r.stage) + "," + r.variant +
                      "," + r.language + "," + csv_double(r.mse) + "," +
                      csv_double(r.normalized_error) + "," + csv_double(r.lr) + ",";
    if (r.mean_p) {
        out += csv_double(*r.mean_p);
    }
    return out;
}

TrainHistory run_training(ToyModel& model, AdamState& optim,
                          const std::map<std::string, std::vector<Sample>>& train,
                          const std::map<std::string, std::vector<Sample>>& eval,
                          const std::map<std::string, double>& base_mse, const StageConfig& cfg,
                          std::uint64_t seed) {
    cfg.validate();
    if (train.empty()) {
        throw ConfigError("run_training: no training languages");
    }
    if (eval.empty()) {
        throw ConfigError("run_training: no evaluation languages");
    }
    const auto& langs = model.config().languages;
    auto known = [&](const std::string& l) {
        return std::find(langs.begin(), langs.end(), l) != langs.end();
    };
    for (const auto& [lang, samples] : train) {
        if (!known(lang)) {
            throw ConfigError("run_training: training language " + lang + " not in the model");
        }
        if (samples.empty()) {
            throw ConfigError("run_training: empty training split for " + lang);
        }
    }
    for (const auto& [lang, samples] : eval) {
        if (!known(lang)) {
            throw ConfigError("run_training: eval language " + lang + " not in the model");
        }
        if (samples.empty()) {
            throw ConfigError("run_training: empty eval split for " + lang);
        }
        const auto it = base_mse.find(lang);
        if (it == base_mse.end()) {
            throw ConfigError("run_training: no base mse for " + lang);
        }
        if (!(it->second > 0.0)) {
            throw ContractError("run_training: base mse for " + lang + " must be positive");
        }
    }
    for (const auto& skip : cfg.skip_languages) {
        if (train.find(skip) == train.end()) {
            throw ConfigError("run_training: skip language " + skip + " has no training split");
        }
    }

    const auto trainable = model.trainable_names(cfg.stage, cfg.adapters_only, cfg.train_lid);
    if (trainable.empty()) {
        throw ConfigError("run_training: the stage selector matches nothing");
    }

    // Per-name digests so a frozen-parameter drift names its culprit.
    std::map<std::string, std::uint64_t> frozen_hash;
    for (const auto& [name, m] : static_cast<const ToyModel&>(model).named_params()) {
        (void)m;
        if (trainable.count(name) == 0) {
            frozen_hash[name] = model.params_hash({name});
        }
    }

    const std::string variant_str =
        model.adapter_variant() ? to_string(*model.adapter_variant()) : "none";
    const int eval_every = std::max(1, cfg.steps / 20);
    std::optional<int> eval_chunk;
    if (cfg.chunked) {
        eval_chunk = *std::max_element(model.config().chunk_lengths.begin(),
                                       model.config().chunk_lengths.end());
    }

    std::vector<std::string> train_langs;
    std::vector<long long> cumulative;
    long long total = 0;
    for (const auto& [lang, samples] : train) {
        train_langs.push_back(lang);
        total += static_cast<long long>(samples.size());
        cumulative.push_back(total);
    }

    SplitMix64 lang_rng(derive_seed(seed, "batches"));
    SplitMix64 chunk_rng(derive_seed(seed, "chunks"));
    std::map<std::string, SplitMix64> order_rng;
    for (const auto& lang : train_langs) {
        order_rng.emplace(lang, SplitMix64(derive_seed(seed, "order." + lang)));
    }
    const std::set<std::string> skip(cfg.skip_languages.begin(), cfg.skip_languages.end());

    TrainHistory history;
    auto eval_pass = [&](int step_no, double lr_now) {
        for (const auto& [name, digest] : frozen_hash) {
            if (model.params_hash({name}) != digest) {
                throw ContractError("run_training: frozen parameter " + name +
                                    " changed during training");
            }
        }
        for (const auto& [lang, samples] : eval) {
            MetricRow row;
            row.step = step_no;
            row.stage = cfg.stage;
            row.variant = variant_str;
            row.language = lang;
            row.mse = eval_mse(model, samples, lang, eval_chunk);
            row.normalized_error = row.mse / base_mse.at(lang);
            row.lr = lr_now;
            const std::vector<double> profile = model.routing_profile(lang);
            if (!profile.empty()) {
                double acc = 0.0;
                for (double p : profile) acc += p;
                row.mean_p = acc / static_cast<double>(profile.size());
            }
            history.rows.push_back(std::move(row));
        }
    };

    auto lr_of = [&](int s) {
        return cfg.schedule == "cosine" ? lr_at(s, cfg.steps, cfg.base_lr, cfg.warmup_ratio)
                                        : cfg.base_lr;
    };

    eval_pass(0, lr_of(0));

    for (int s = 0; s < cfg.steps; ++s) {
        const double lr = lr_of(s);

        const long long u = static_cast<long long>(lang_rng.next_below(
            static_cast<std::uint64_t>(total)));
        std::size_t li = 0;
        while (u >= cumulative[li]) ++li;
        const std::string& lang = train_langs[li];

        const auto& pool = train.at(lang);
        std::vector<std::pair<const Matrix*, const Matrix*>> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        SplitMix64& ord = order_rng.at(lang);
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto idx = static_cast<std::size_t>(
                ord.next_below(static_cast<std::uint64_t>(pool.size())));
            batch.emplace_back(&pool[idx].x, &pool[idx].y);
        }

        std::optional<int> chunk;
        if (cfg.chunked) {
            const auto& lens = model.config().chunk_lengths;
            chunk = lens[static_cast<std::size_t>(
                chunk_rng.next_below(static_cast<std::uint64_t>(lens.size())))];
        }

        if (skip.count(lang) == 0) {
            ToyModel::LossBuild lb = model.build_loss(batch, lang, chunk);
            lb.tape.backward(lb.loss);
            std::map<std::string, Matrix> grads;
            for (const auto& [name, node] : lb.staged) {
                if (trainable.count(name)) {
                    grads.emplace(name, lb.tape.grad(node));
                }
            }
            const auto params = model.named_params();
            optim.step(params, grads, lr);
        }

        history.batch_languages.push_back(lang);
        history.batch_chunks.push_back(chunk ? *chunk : -1);

        if ((s + 1) % eval_every == 0 || s + 1 == cfg.steps) {
            eval_pass(s + 1, lr);
        }
    }

    // Final metrics: mean over the last two eval intervals (or the only one).
    std::vector<int> eval_steps;
    for (const auto& row : history.rows) {
        if (row.step > 0 && (eval_steps.empty() || eval_steps.back() != row.step)) {
            eval_steps.push_back(row.step);
        }
    }
    const std::size_t take = std::min<std::size_t>(2, eval_steps.size());
    const std::set<int> last(eval_steps.end() - static_cast<std::ptrdiff_t>(take),
                             eval_steps.end());
    std::map<std::string, std::pair<double, double>> acc;  // lang -> (sum_mse, sum_norm)
    std::map<std::string, int> cnt;
    for (const auto& row : history.rows) {
        if (last.count(row.step)) {
            acc[row.language].first += row.mse;
            acc[row.language].second += row.normalized_error;
            cnt[row.language] += 1;
        }
    }
    for (const auto& [lang, sums] : acc) {
        history.final_mse[lang] = sums.first / cnt.at(lang);
        history.final_normalized[lang] = sums.second / cnt.at(lang);
    }
    return history;
}

void initial_b_warmstart(ToyModel& target, const ToyModel& source, const WarmStartFlags& flags) {
    auto tgt = target.named_params();
    const auto src = static_cast<const ToyModel&>(source).named_params();
    std::vector<std::string> problems;
    for (const auto& [name, p] : tgt) {
        if (!warm_selected(name, flags)) continue;
        const auto it = src.find(name);
        if (it == src.end()) {
            problems.push_back("missing in source: " + name);
        } else if (!p->same_shape(*it->second)) {
            problems.push_back("shape mismatch for " + name + ": source " +
                               it->second->shape_str() + ", target " + p->shape_str());
        }
    }
    for (const auto& [name, p] : src) {
        (void)p;
        if (warm_selected(name, flags) && tgt.find(name) == tgt.end()) {
            problems.push_back("missing in target: " + name);
        }
    }
    if (!problems.empty()) {
        std::string msg = "warm start incompatible:";
        for (const auto& p : problems) msg += " [" + p + "]";
        throw CompatibilityError(msg);
    }
    for (auto& [name, p] : tgt) {
        if (warm_selected(name, flags)) {
            *p = *src.at(name);
        }
    }
}

nlohmann::json training_checkpoint_json(const ToyModel& model, const AdamState& optim,
                                        int stage) {
    nlohmann::json j;
    j["model"] = model.to_json(stage);
    j["optim"] = optim.to_json();
    return j;
}

}  // namespace zlora
