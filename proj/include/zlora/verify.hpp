// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zlora/adapters.hpp"

namespace zlora {

/// One named numerical check. max_err is the worst error observed across the
/// check's draws; pass applies the tolerance baked into the producing suite.
struct CheckResult {
    std::string name;
    double max_err = 0.0;
    bool pass = false;
    std::string detail;
};

/// Algebraic identities between the adapter variants, each evaluated on
/// fresh random draws for n_seeds seeds at tolerance 1e-12:
///   - the soft merge at weights 0 / 1 returns the shared / specific bank
///   - the hard zip on binary weights equals the soft merge (this one is
///     polarity-sensitive: it holds for spec_on_one and is expected to fail
///     if the zip side reads the gate with the opposite polarity)
///   - the static split equals a soft merge of zero-padded banks with a
///     frozen block gate
///   - the input-routed variant with k = r equals the plain update
std::vector<CheckResult> equiv_suite(int n_seeds, HardPolarity zip_polarity);

/// Finite-difference gradient verification, h = 1e-5, tolerance 1e-4 in
/// relative error. scope picks the layer under test:
///   "ops"      every tape op on a small dedicated graph; the hard gate is
///              checked against its exact pass-through contract instead of
///              finite differences
///   "adapters" each variant's merged-delta path through stage_bank and
///              adapted_apply, the hard gate against a surrogate graph with
///              the mask as a leaf, and the selection bias's blocked gradient
///   "router"   the embedding -> layernorm -> sigmoid path, all parameters
///              plus the embedding itself
///   "model"    end-to-end loss of a tiny model per variant over every
///              staged trainable parameter (smooth subset for the hard and
///              input-routed variants)
///   "all"      all of the above
/// Throws ConfigError for an unknown scope.
std::vector<CheckResult> gradcheck_suite(const std::string& scope, std::uint64_t seed);

bool all_pass(const std::vector<CheckResult>& results);

/// One line per result: "PASS <name> (max_err=...)" or
/// "FAIL <name> (max_err=...): <detail>".
std::string format_results(const std::vector<CheckResult>& results);

} // namespace zlora
