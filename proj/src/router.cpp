// SPDX-License-Identifier: Apache-2.0

#include "zlora/router.hpp"

#include <algorithm>
#include <cmath>

#include "zlora/errors.hpp"
#include "zlora/rng.hpp"
#include "zlora/serialize.hpp"

namespace zlora {

RouterParams make_router(int r, int d_lid, std::uint64_t seed) {
    if (r < 1 || d_lid < 1) {
        throw ConfigError("make_router: r and d_lid must be >= 1");
    }
    RouterParams rp;
    SplitMix64 rng(derive_seed(seed, "router.W"));
    rp.W = Matrix::gaussian(r, d_lid, rng, 1.0 / std::sqrt(static_cast<double>(d_lid)));
    rp.b = Matrix(r, 1);
    rp.gamma = Matrix::filled(d_lid, 1, 1.0);
    rp.beta = Matrix(d_lid, 1);
    return rp;
}

Matrix route(const RouterParams& rp, const Matrix& e) {
    if (e.cols() != 1 || e.rows() != rp.W.cols()) {
        throw ShapeError("route: embedding " + e.shape_str() + " does not match gate " +
                         rp.W.shape_str());
    }
    const Matrix normed = layernorm_cols(e, rp.gamma, rp.beta, rp.eps);
    return sigmoid(add(matmul(rp.W, normed), rp.b));
}

RouterTapeIds stage_router(Tape& t, const RouterParams& rp,
                           std::map<std::string, NodeId>* registry, const std::string& prefix) {
    RouterTapeIds ids;
    auto put = [&](const char* field, const Matrix& m) {
        NodeId id = t.leaf(m);
        if (registry) {
            (*registry)[prefix + ".router." + field] = id;
        }
        return id;
    };
    ids.W = put("W", rp.W);
    ids.b = put("b", rp.b);
    ids.gamma = put("gamma", rp.gamma);
    ids.beta = put("beta", rp.beta);
    return ids;
}

NodeId route_on_tape(Tape& t, const RouterTapeIds& ids, NodeId e, double eps) {
    const NodeId normed = t.layernorm_cols(e, ids.gamma, ids.beta, eps);
    return t.sigmoid(t.add(t.matmul(ids.W, normed), ids.b));
}

SimilarityTarget similarity_from_json(const nlohmann::json& j) {
    SimilarityTarget t;
    t.languages = j.at("languages").get<std::vector<std::string>>();
    t.s = matrix_from_json(j.at("matrix"));
    const int L = static_cast<int>(t.languages.size());
    if (t.s.rows() != L || t.s.cols() != L) {
        throw StructureError("similarity matrix " + t.s.shape_str() + " does not match " +
                             std::to_string(L) + " languages");
    }
    for (int i = 0; i < L; ++i) {
        if (t.s(i, i) != 1.0) {
            throw StructureError("similarity diagonal must be 1.0 (row " + std::to_string(i) +
                                 ")");
        }
        for (int jc = 0; jc < L; ++jc) {
            if (std::abs(t.s(i, jc) - t.s(jc, i)) > 1e-12) {
                throw StructureError("similarity matrix is not symmetric at (" +
                                     std::to_string(i) + "," + std::to_string(jc) + ")");
            }
            if (t.s(i, jc) < -1.0 || t.s(i, jc) > 1.0) {
                throw StructureError("similarity entries must lie in [-1,1]");
            }
        }
    }
    return t;
}

nlohmann::json similarity_to_json(const SimilarityTarget& t) {
    nlohmann::json j;
    j["languages"] = t.languages;
    j["matrix"] = matrix_to_json(t.s);
    return j;
}

SimilarityTarget default_similarity() {
    SimilarityTarget t;
    t.languages = {"ar", "de", "en", "es", "fr", "it", "ja", "ko", "nl", "pt", "th", "vi"};
    const int L = static_cast<int>(t.languages.size());
    t.s = Matrix::filled(L, L, 0.05);
    auto idx = [&](const std::string& lang) {
        for (int i = 0; i < L; ++i) {
            if (t.languages[static_cast<std::size_t>(i)] == lang) return i;
        }
        throw KeyError("default_similarity: unknown language " + lang);
    };
    auto set_pair = [&](const std::string& a, const std::string& b, double v) {
        t.s(idx(a), idx(b)) = v;
        t.s(idx(b), idx(a)) = v;
    };
    set_pair("ja", "ko", 0.41);
    set_pair("th", "vi", 0.41);
    set_pair("de", "en", 0.15);
    const std::vector<std::string> romance = {"es", "fr", "it", "pt"};
    for (std::size_t i = 0; i < romance.size(); ++i) {
        for (std::size_t j = i + 1; j < romance.size(); ++j) {
            set_pair(romance[i], romance[j], 0.15);
        }
    }
    for (int i = 0; i < L; ++i) t.s(i, i) = 1.0;
    return t;
}

std::map<std::string, std::vector<double>> similarity_coordinates(const SimilarityTarget& target) {
    const int L = static_cast<int>(target.languages.size());
    if (L < 1) {
        throw StructureError("similarity_coordinates: empty language set");
    }

    // Canonical sorted order makes the per-language vectors independent of
    // how the config lists the languages.
    std::vector<int> order(L);
    for (int i = 0; i < L; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return target.languages[static_cast<std::size_t>(a)] <
               target.languages[static_cast<std::size_t>(b)];
    });
    Matrix s(L, L);
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
            s(i, j) = target.s(order[static_cast<std::size_t>(i)],
                               order[static_cast<std::size_t>(j)]);
        }
    }

    std::vector<double> eig;
    Matrix vecs;
    sym_eigen(s, eig, vecs);
    double clipped = 0.0;
    for (double& lam : eig) {
        if (lam < 0.0) {
            clipped += -lam;
            lam = 0.0;
        }
    }
    if (clipped > 0.05) {
        throw StructureError("similarity target is not realizable: clipped eigenvalue mass " +
                             std::to_string(clipped) + " exceeds 0.05");
    }

    // Rows of V sqrt(Lambda) have Gram matrix equal to the clipped target.
    std::map<std::string, std::vector<double>> out;
    for (int row = 0; row < L; ++row) {
        std::vector<double> coords(static_cast<std::size_t>(L));
        for (int j = 0; j < L; ++j) {
            coords[static_cast<std::size_t>(j)] =
                vecs(row, j) * std::sqrt(eig[static_cast<std::size_t>(j)]);
        }
        out[target.languages[static_cast<std::size_t>(order[static_cast<std::size_t>(row)])]] =
            std::move(coords);
    }
    return out;
}

std::map<std::string, Matrix> synth_lid_embeddings(const SimilarityTarget& target, int d_lid,
                                                   std::uint64_t seed) {
    const int L = static_cast<int>(target.languages.size());
    if (d_lid < L) {
        throw StructureError("synth_lid_embeddings: d_lid " + std::to_string(d_lid) +
                             " smaller than language count " + std::to_string(L));
    }
    std::map<std::string, std::vector<double>> coords = similarity_coordinates(target);

    // Random orthogonal basis for the ambient space via modified
    // Gram-Schmidt on a seeded Gaussian matrix.
    SplitMix64 rng(derive_seed(seed, "lid.rotation"));
    Matrix q = Matrix::gaussian(d_lid, d_lid, rng, 1.0);
    for (int j = 0; j < d_lid; ++j) {
        for (int prev = 0; prev < j; ++prev) {
            double dot = 0.0;
            for (int i = 0; i < d_lid; ++i) {
                dot += q(i, j) * q(i, prev);
            }
            for (int i = 0; i < d_lid; ++i) {
                q(i, j) -= dot * q(i, prev);
            }
        }
        double norm = 0.0;
        for (int i = 0; i < d_lid; ++i) {
            norm += q(i, j) * q(i, j);
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            throw StructureError("synth_lid_embeddings: degenerate rotation draw");
        }
        for (int i = 0; i < d_lid; ++i) {
            q(i, j) /= norm;
        }
    }

    std::map<std::string, Matrix> out;
    for (const auto& [lang, f] : coords) {
        double norm = 0.0;
        for (double c : f) {
            norm += c * c;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-9) {
            throw StructureError("synth_lid_embeddings: zero-norm embedding for \"" + lang + "\"");
        }
        // e = Q (f / |f| padded with zeros): only the first L basis columns
        // contribute.
        Matrix e(d_lid, 1);
        for (int i = 0; i < d_lid; ++i) {
            double acc = 0.0;
            for (int j = 0; j < L; ++j) {
                acc += q(i, j) * f[static_cast<std::size_t>(j)] / norm;
            }
            e(i, 0) = acc;
        }
        out[lang] = std::move(e);
    }
    return out;
}

Matrix cosine_similarity_matrix(const std::map<std::string, Matrix>& embeddings,
                                const std::vector<std::string>& order) {
    const int L = static_cast<int>(order.size());
    std::vector<const Matrix*> vs;
    std::vector<double> norms;
    vs.reserve(static_cast<std::size_t>(L));
    for (const std::string& lang : order) {
        auto it = embeddings.find(lang);
        if (it == embeddings.end()) {
            throw KeyError("cosine_similarity_matrix: missing language \"" + lang + "\"");
        }
        const double n = frobenius_norm(it->second);
        if (n == 0.0) {
            throw ContractError("cosine_similarity_matrix: zero vector for \"" + lang + "\"");
        }
        vs.push_back(&it->second);
        norms.push_back(n);
    }
    Matrix out(L, L);
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
            out(i, j) = frobenius_inner(*vs[static_cast<std::size_t>(i)],
                                        *vs[static_cast<std::size_t>(j)]) /
                        (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
        }
    }
    return out;
}

} // namespace zlora
