// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "zlora/matrix.hpp"
#include "zlora/tape.hpp"

namespace zlora {

/// Per-layer gate producing rank-wise mixing weights from a language
/// embedding: p = sigmoid(W LayerNorm(e) + b).
struct RouterParams {
    Matrix W;     // r x d_lid
    Matrix b;     // r x 1
    Matrix gamma; // d_lid x 1
    Matrix beta;  // d_lid x 1
    // Guards the variance division only. Kept far below any real embedding
    // variance so positive rescaling of e cancels to within 1e-12.
    double eps = 1e-30;
};

/// W Gaussian with std 1/sqrt(d_lid), zero bias, identity affine, so the
/// initial gate sits near 0.5 for every rank.
RouterParams make_router(int r, int d_lid, std::uint64_t seed);

/// Eager gate evaluation; e is a d_lid x 1 column. Output entries are
/// strictly inside (0,1).
Matrix route(const RouterParams& rp, const Matrix& e);

struct RouterTapeIds {
    NodeId W = -1;
    NodeId b = -1;
    NodeId gamma = -1;
    NodeId beta = -1;
};

/// Stages the router parameters as leaves, registering them as
/// "<prefix>.router.W" etc. when a registry is given.
RouterTapeIds stage_router(Tape& t, const RouterParams& rp,
                           std::map<std::string, NodeId>* registry, const std::string& prefix);

NodeId route_on_tape(Tape& t, const RouterTapeIds& ids, NodeId e, double eps);

/// Target pairwise-cosine structure over a named language set.
struct SimilarityTarget {
    std::vector<std::string> languages;
    Matrix s; // L x L, symmetric, unit diagonal
};

SimilarityTarget similarity_from_json(const nlohmann::json& j);
nlohmann::json similarity_to_json(const SimilarityTarget& t);

/// Built-in 12-language target: 0.41 for the (ja,ko) and (th,vi) anchor
/// pairs, 0.15 inside the Romance block {es,fr,it,pt} and for (de,en),
/// 0.05 everywhere else. Verified PSD.
SimilarityTarget default_similarity();

/// Length-L coordinate vector per language whose pairwise dot products equal
/// the (eigenvalue-clipped) target similarity. Computed over the sorted
/// language list, so the result is independent of listing order. Throws
/// StructureError when more than 0.05 of eigenvalue mass must be clipped to
/// reach PSD.
std::map<std::string, std::vector<double>> similarity_coordinates(const SimilarityTarget& target);

/// Unit-norm embeddings in d_lid dims whose pairwise cosines reproduce the
/// target, built from similarity_coordinates rotated by a seeded random
/// orthogonal basis.
std::map<std::string, Matrix> synth_lid_embeddings(const SimilarityTarget& target, int d_lid,
                                                   std::uint64_t seed);

/// Pairwise cosines in the given language order. Zero vectors are an error.
Matrix cosine_similarity_matrix(const std::map<std::string, Matrix>& embeddings,
                                const std::vector<std::string>& order);

} // namespace zlora
