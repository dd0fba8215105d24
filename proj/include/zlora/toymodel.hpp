// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "zlora/adapters.hpp"
#include "zlora/matrix.hpp"
#include "zlora/router.hpp"
#include "zlora/tape.hpp"

namespace zlora {

struct ModelConfig {
    int width = 32;       // hidden size d, also the input feature size
    int depth = 2;        // encoder blocks
    int seq_len = 16;     // frames per sample
    int stack_factor = 4; // projector frame grouping
    int target_dim = 16;
    int d_lid = 16;
    std::vector<int> chunk_lengths = {2, 4, 8, 16};
    std::vector<std::string> languages;
    LoraConfig lora; // d_in/d_out are filled per layer at attach time

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Contiguous non-overlapping segments covering [0, T); every segment has
/// length chunk_len except possibly the last.
std::vector<std::pair<int, int>> chunk_split(int t, int chunk_len);

struct EncoderBlockParams {
    Matrix q, k, v, o, ffn1, ffn2;
};

struct ProjectorParams {
    Matrix gate, gate_b, up, up_b, out, out_b, ln_gamma, ln_beta;
};

/// Frozen-encoder sequence regressor with adapter slots on every encoder
/// linear layer: single-head self-attention blocks with SiLU feed-forward,
/// a frame-stacking SiLU-gated projector, one learned prompt vector per
/// language prepended to the projected sequence, and a mean-pool linear head
/// whose base is frozen but carries a Vanilla adapter in both stages.
class ToyModel {
public:
    ToyModel(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::optional<Variant> adapter_variant() const { return variant_; }

    void set_lid_embeddings(std::map<std::string, Matrix> lid);
    const std::map<std::string, Matrix>& lid_embeddings() const { return lid_; }

    /// Creates fresh per-layer banks (and routers for the gated variants).
    /// The routed variants require LID embeddings to be set first.
    void attach_adapters(Variant v, std::uint64_t seed);
    void detach_adapters();

    /// Replaces the head-side adapter with a fresh zero-delta bank, for
    /// configs that do not carry it across stages.
    void reinit_head_adapter(std::uint64_t seed);

    /// Encoder linear layer names in forward order ("enc.0.q", ...).
    std::vector<std::string> adapted_layer_names() const;

    /// Attached encoder banks keyed by layer name; empty before attach.
    /// Per-layer configs carry the filled d_in/d_out for parameter audits.
    const std::map<std::string, AdapterBank>& encoder_banks() const { return enc_adapters_; }

    std::map<std::string, Matrix*> named_params();
    std::map<std::string, const Matrix*> named_params() const;

    /// Canonical trainable-name set for a stage. Stage 1 trains the encoder
    /// base, projector, head adapter, and prompts; encoder adapters must not
    /// be attached. Stage 2 trains encoder adapters, projector, head adapter,
    /// and prompts; adapters_only restricts to the adapter banks and routers.
    std::set<std::string> trainable_names(int stage, bool adapters_only, bool train_lid) const;

    /// Encoder output, width x T. Chunked mode encodes each segment with no
    /// cross-segment attention and concatenates in order.
    Matrix encode(const Matrix& x, const std::string& lang,
                  std::optional<int> chunk_len) const;

    /// Frame-stacking SiLU-gated projector with post-norm residual:
    /// width x T -> width x ceil(T / stack_factor).
    Matrix project(const Matrix& h_enc) const;

    /// Prompt vector prepended as frame 0.
    Matrix prepend_prompt(const Matrix& h_proj, const std::string& lang) const;

    /// encode -> project -> prepend prompt -> mean-pool head; target_dim x 1.
    Matrix forward(const Matrix& x, const std::string& lang,
                   std::optional<int> chunk_len) const;

    struct LossBuild {
        Tape tape;
        std::map<std::string, NodeId> staged;
        NodeId loss = -1;
        double mean_p = -1.0; // mean routing weight over layers/ranks; -1 if unrouted
    };
    /// Mean per-sample MSE over a single-language batch of (x, y) pairs,
    /// recorded on a fresh tape with every touched parameter staged by name.
    LossBuild build_loss(const std::vector<std::pair<const Matrix*, const Matrix*>>& batch,
                         const std::string& lang, std::optional<int> chunk_len) const;

    /// Mean routing weights per rank for one language, averaged over layers.
    /// Only meaningful for the routed variants.
    std::vector<double> routing_profile(const std::string& lang) const;

    nlohmann::json to_json(int stage) const;
    static ToyModel from_json(const nlohmann::json& j);

    /// FNV hash over the exact bytes of the named parameters, for
    /// frozen-set invariance checks.
    std::uint64_t params_hash(const std::set<std::string>& names) const;

private:
    ModelConfig cfg_;
    std::vector<EncoderBlockParams> blocks_;
    ProjectorParams proj_;
    std::map<std::string, Matrix> prompts_;
    Matrix head_;
    AdapterBank head_adapter_;
    std::optional<Variant> variant_;
    std::map<std::string, AdapterBank> enc_adapters_; // keyed by layer name
    std::map<std::string, RouterParams> routers_;     // keyed by layer name
    std::map<std::string, Matrix> lid_;

    struct Fwd;
    const Matrix& base_weight(const std::string& layer) const;
    NodeId stage_named(Fwd& f, const std::string& name, const Matrix& m) const;
    NodeId encoder_segment(Fwd& f, NodeId h) const;
    NodeId encode_on_tape(Fwd& f, const Matrix& x, std::optional<int> chunk_len) const;
    NodeId project_on_tape(Fwd& f, NodeId h_enc) const;
    NodeId forward_on_tape(Fwd& f, const Matrix& x, std::optional<int> chunk_len) const;
    NodeId adapted_linear(Fwd& f, const std::string& layer, NodeId x) const;
};

} // namespace zlora
