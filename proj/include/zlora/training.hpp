// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training: stage 1 fits the encoder base, projector, head
// adapter and prompts on a source-language subset; stage 2 freezes the
// encoder base and trains the attached adapter banks (plus projector,
// head adapter and prompts unless adapters_only). Warm starting copies
// converged up-projection banks into a freshly attached model.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zlora/matrix.hpp"
#include "zlora/synthdata.hpp"
#include "zlora/toymodel.hpp"

namespace zlora {

/// Linear ramp 0 -> base_lr over the first warmup_ratio * total_steps
/// steps, then cosine decay to 0 at total_steps. Continuous at the
/// boundary; the warmup endpoint is exactly base_lr.
double lr_at(int step, int total_steps, double base_lr, double warmup_ratio);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction and per-parameter moment slots. Parameters
/// whose gradient is entirely zero are skipped outright: their moments and
/// step counters do not advance, so a parameter's update history depends
/// only on the steps that actually touched it.
class AdamState {
public:
    explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }

    void step(const std::map<std::string, Matrix*>& params,
              const std::map<std::string, Matrix>& grads, double lr);

    nlohmann::json to_json() const;
    static AdamState from_json(const nlohmann::json& j);

private:
    struct Slot {
        Matrix m, v;
        std::int64_t t = 0;
    };
    AdamConfig cfg_;
    std::map<std::string, Slot> slots_;
};

struct StageConfig {
    int stage = 1;
    int steps = 100;
    int batch_size = 8;
    double base_lr = 1e-3;
    double warmup_ratio = 0.1;
    std::string schedule = "cosine";  // or "constant"
    bool adapters_only = false;       // stage 2: restrict to banks and routers
    bool train_lid = false;
    bool chunked = false;  // sample a chunk length per batch; eval at the largest
    // Batches for these languages are still drawn (keeping every stream
    // aligned) but their updates are not applied.
    std::vector<std::string> skip_languages;

    void validate() const;
};

struct MetricRow {
    int step = 0;
    int stage = 0;
    std::string variant;  // "none" before adapters exist
    std::string language;
    double mse = 0.0;
    double normalized_error = 0.0;
    double lr = 0.0;
    std::optional<double> mean_p;  // mean routing weight; empty when unrouted
};

std::string metrics_csv_header();
std::string metric_row_csv(const MetricRow& r);

struct TrainHistory {
    std::vector<MetricRow> rows;
    std::vector<std::string> batch_languages;   // language drawn at each step
    std::vector<int> batch_chunks;              // chunk length per step; -1 = full
    std::map<std::string, double> final_mse;    // mean of the last two eval intervals
    std::map<std::string, double> final_normalized;
};

/// Runs one stage. Languages are drawn per step proportionally to their
/// train counts; each batch is single-language with replacement. Evaluates
/// every 5% of steps (and at the end) against `eval`, normalizing by
/// base_mse. Frozen parameters are hash-checked at every eval; any drift
/// raises ContractError.
TrainHistory run_training(ToyModel& model, AdamState& optim,
                          const std::map<std::string, std::vector<Sample>>& train,
                          const std::map<std::string, std::vector<Sample>>& eval,
                          const std::map<std::string, double>& base_mse, const StageConfig& cfg,
                          std::uint64_t seed);

struct WarmStartFlags {
    bool load_b_shared = true;
    bool load_b_spec = true;
    bool load_router = true;
};

/// Copies the encoder-side shared and per-language up-projection banks
/// (and router parameters when load_router) from a converged source model
/// into a freshly attached target. Everything else keeps the target's own
/// initialization. Mismatched shapes or bank layouts raise
/// CompatibilityError listing every offending parameter.
void initial_b_warmstart(ToyModel& target, const ToyModel& source, const WarmStartFlags& flags);

/// Model, optimizer and stage bundled for resumable checkpoints.
nlohmann::json training_checkpoint_json(const ToyModel& model, const AdamState& optim, int stage);

}  // namespace zlora
