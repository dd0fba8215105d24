// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zlora/matrix.hpp"
#include "zlora/tape.hpp"

namespace zlora {

enum class Variant { Vanilla, Independent, FlyLoRA, ZipperStatic, ZipperHard, ZipperSoft };

/// Which bank a hard-gate value of 1 selects. SpecOnOne matches the soft
/// merge's semantics (gate = share of the language-specific column);
/// SharedOnOne is the opposite reading, kept selectable because both are
/// defensible.
enum class HardPolarity { SpecOnOne, SharedOnOne };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
std::string to_string(HardPolarity p);
HardPolarity polarity_from_string(const std::string& s);

/// All variants in a fixed canonical order.
const std::vector<Variant>& all_variants();

struct LoraConfig {
    int r = 8;
    double alpha = 16.0;
    int d_in = 0;
    int d_out = 0;
    double tau = 0.5;    // hard-gate threshold
    int k = 2;           // FlyLoRA active ranks
    int r_s = 4;         // static split, shared ranks
    int r_p = 4;         // static split, per-language ranks
    double fly_density = 0.1;
    HardPolarity hard_polarity = HardPolarity::SpecOnOne;

    double prefactor() const { return alpha / r; }
    /// Throws ConfigError naming the offending field.
    void validate(Variant v) const;
};

/// Parameter container for one adapted linear layer. Only the fields the
/// variant uses are populated; the rest stay 0x0 / empty.
struct AdapterBank {
    Variant variant = Variant::Vanilla;
    LoraConfig cfg;
    Matrix A;                            // r x d_in down-projection (frozen for FlyLoRA)
    Matrix B_shared;                     // d_out x r, or d_out x r_s for ZipperStatic
    std::map<std::string, Matrix> B_spec; // language -> d_out x r (r_p for ZipperStatic)
    std::map<std::string, Matrix> A_spec; // language -> r x d_in, Independent only
    Matrix fly_bias;                     // r x 1, FlyLoRA only
};

/// Fresh bank: A entries Gaussian with std 1/sqrt(d_in), B banks zero, so the
/// initial weight update is exactly zero. Per-language streams are keyed by
/// language name, never by position, so permuting the list changes nothing.
AdapterBank make_bank(Variant v, const LoraConfig& cfg,
                      const std::vector<std::string>& languages, std::uint64_t seed);

nlohmann::json bank_to_json(const AdapterBank& bank);
AdapterBank bank_from_json(const nlohmann::json& j);

struct MergedDelta {
    Matrix delta;               // d_out x d_in
    std::string language;
    std::vector<double> mixing; // p, s, or FlyLoRA selection mask; empty otherwise
};

MergedDelta vanilla_delta(const AdapterBank& bank);
MergedDelta independent_delta(const AdapterBank& bank, const std::string& lang);

/// Indices of the k largest scores; ties go to the lowest index.
std::vector<int> top_k_indices(const std::vector<double>& scores, int k);

/// Input-conditioned delta for a single column x: scores A x + d pick the
/// active ranks, the delta sums their outer products.
MergedDelta flylora_delta(const AdapterBank& bank, const Matrix& x_col);

/// [B_shared | B_spec(lang)] with r_s + r_p columns.
Matrix zipper_static_merge(const AdapterBank& bank, const std::string& lang);

/// s_i = 1 iff p_i >= tau (inclusive).
std::vector<double> zipper_hard_mask(const std::vector<double>& p, double tau);

/// Literal column selection between the two banks according to binary s.
Matrix zip_columns(const Matrix& b_shared, const Matrix& b_spec, const std::vector<double>& s,
                   HardPolarity polarity);

/// B_shared diag(1-p) + B_spec diag(p).
Matrix zipper_soft_merge(const Matrix& b_shared, const Matrix& b_spec,
                         const std::vector<double>& p);

MergedDelta zipper_delta(const Matrix& b_merged, const Matrix& a, const LoraConfig& cfg,
                         std::string language, std::vector<double> mixing);

/// Exact trainable-parameter count for one adapted layer. d_lid only matters
/// for the routed variants, whose per-layer router is included.
long long count_trainable_params(Variant v, const LoraConfig& cfg, int num_languages, int d_lid);

/// W0 x + DeltaW x, eagerly. router_p (r x 1) is required for ZipperHard and
/// ZipperSoft and rejected for everything else; FlyLoRA routes internally per
/// input column.
Matrix adapted_forward(const Matrix& w0, const AdapterBank& bank, const std::string& lang,
                       const Matrix& x, const Matrix* router_p);

/// Leaf ids of one bank staged on a tape, plus the cached merged-delta node.
struct BankTapeIds {
    NodeId A = -1;
    NodeId B_shared = -1;
    NodeId B_spec = -1;
    NodeId A_spec = -1;
    NodeId fly_bias = -1;
    NodeId delta = -1; // lazily built; FlyLoRA never caches (input-dependent)
};

/// Stages the parameters the variant uses for this language as tape leaves.
/// If registry is given, each leaf is recorded under prefix-qualified names
/// ("<prefix>.A", "<prefix>.B_spec.<lang>", ...) for gradient collection.
BankTapeIds stage_bank(Tape& t, const AdapterBank& bank, const std::string& lang,
                       std::map<std::string, NodeId>* registry, const std::string& prefix);

/// Tape counterpart of adapted_forward. The merged delta is built once per
/// (tape, language) and cached in ids. router_p must be an r x 1 node for the
/// routed variants.
NodeId adapted_apply(Tape& t, BankTapeIds& ids, const AdapterBank& bank, const std::string& lang,
                     NodeId w0, NodeId x, std::optional<NodeId> router_p);

} // namespace zlora
