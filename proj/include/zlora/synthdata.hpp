// SPDX-License-Identifier: Apache-2.0
//
// Synthetic teacher-student corpus generation.
//
// A frozen base model plus low-rank per-language weight perturbations acts
// as a family of teachers. Each language's perturbation splits into a part
// every language shares and a language-specific part whose pairwise
// Frobenius cosines reproduce a similarity target. Datasets are Gaussian
// inputs labeled by the matching teacher, with optional target noise.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zlora/matrix.hpp"
#include "zlora/router.hpp"
#include "zlora/toymodel.hpp"

namespace zlora {

/// Training-set sizes per tier. Defaults give a 1000:1 head-to-tail ratio.
struct LongTailProfile {
    int high = 2000;
    int mid = 500;
    int low = 2;
};

/// Expands a tier assignment ("high" | "mid" | "low" per language) into
/// per-language training counts.
std::map<std::string, int> long_tail_sizes(const LongTailProfile& profile,
                                           const std::map<std::string, std::string>& tier_of);

/// The teacher family. `base` is the unperturbed model; `folded` holds one
/// copy per language with c_sh * shared + c_sp * specific already added
/// into the adapted encoder weights. `specific` keeps the unscaled
/// language-specific components for structure audits.
struct TeacherSpec {
    ModelConfig cfg;
    double c_sh = 1.0;
    double c_sp = 1.0;
    int teacher_rank = 0;
    std::uint64_t seed = 0;
    ToyModel base;
    std::map<std::string, Matrix> shared;                           // layer -> delta
    std::map<std::string, std::map<std::string, Matrix>> specific;  // layer -> lang -> delta
    std::map<std::string, ToyModel> folded;                         // lang -> teacher
};

/// Builds the teacher family. `sim` must cover exactly cfg.languages.
/// Shared and specific components are mutually orthogonal under the
/// Frobenius inner product, each with unit norm, so c_sh and c_sp set
/// their contributions independently. teacher_rank <= 0 means cfg.lora.r.
TeacherSpec make_teachers(const ModelConfig& cfg, const SimilarityTarget& sim, double c_sh,
                          double c_sp, int teacher_rank, std::uint64_t seed);

/// Teacher output for one utterance, always full-context.
Matrix teacher_forward(const TeacherSpec& spec, const Matrix& x, const std::string& lang);

/// Pairwise Frobenius cosines of the flattened language-specific deltas,
/// concatenated over layers. Row/column order follows `order`.
Matrix teacher_delta_cosines(const TeacherSpec& spec, const std::vector<std::string>& order);

/// Digest over every folded teacher's parameters. Changes if any teacher
/// weight changes; sampling datasets must leave it fixed.
std::uint64_t teacher_hash(const TeacherSpec& spec);

struct Sample {
    Matrix x;  // seq_len x width
    Matrix y;  // target_dim x 1
};

struct Dataset {
    std::map<std::string, std::vector<Sample>> train;
    std::map<std::string, std::vector<Sample>> eval;
    // Populated only when DataOptions::domain_mismatch is set: an extra
    // first-stage split whose input features are rescaled column-wise so
    // the two stages see different input covariance.
    std::map<std::string, std::vector<Sample>> stage1_train;
};

struct DataOptions {
    int eval_count = 32;
    double noise_ratio = 0.01;  // target noise sigma as a fraction of clean target std
    bool domain_mismatch = false;
};

/// Draws train/eval splits for every language in the teacher family.
/// Streams are keyed by (seed, purpose, language) so per-language draws
/// are independent and reproducible. Noise sigma is noise_ratio times the
/// std of that language's clean targets across both splits.
Dataset sample_dataset(const TeacherSpec& teachers, const std::map<std::string, int>& train_counts,
                       const DataOptions& opts, std::uint64_t seed);

/// Mean squared error per target entry over a sample list.
double eval_mse(const ToyModel& model, const std::vector<Sample>& samples, const std::string& lang,
                std::optional<int> chunk_len);

struct EvalMetrics {
    double mse = 0.0;
    double normalized_error = 0.0;  // mse / base_mse
};

EvalMetrics eval_metrics(const ToyModel& model, const std::vector<Sample>& samples,
                         const std::string& lang, std::optional<int> chunk_len, double base_mse);

/// Content digest of one sample (inputs and targets).
std::uint64_t sample_hash(const Sample& s);

nlohmann::json dataset_manifest(const TeacherSpec& spec, const std::map<std::string, int>& counts,
                                const DataOptions& opts, std::uint64_t seed);

/// Writes one JSON file per (split, language) plus the manifest into dir.
void export_dataset(const Dataset& ds, const nlohmann::json& manifest, const std::string& dir);

}  // namespace zlora
