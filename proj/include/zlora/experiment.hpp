// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner: executes a RunConfig end to end and reads the run
// directory back for reporting. Layout under out_dir:
//
//   config.json                              the normalized config + hash
//   base_mse.json                            per-stage normalization floors
//   stage1/metrics.csv, stage1/checkpoint.json
//   stage2/<variant-token>/seed<k>/metrics.csv, checkpoint.json
//   manifest.json                            artifact list, hashes, complete flag
//   report/*.csv                             aggregate views (cmd_report)
//   embeddings.csv                           cmd_export_embeddings
//   datasets/                                optional raw-sample export
//
// Every CSV starts with "# config_hash <hex>"; every JSON artifact carries
// a "config_hash" field. Loaders reject artifacts whose hash does not match
// the run's config.

#pragma once

#include <string>
#include <vector>

#include "zlora/runconfig.hpp"

namespace zlora {

/// Relative paths of everything a completed run must contain (report files
/// excluded; they are derived views).
std::vector<std::string> declared_artifacts(const RunConfig& rc);

/// Stage 1 once, stage 2 per (variant token, seed), then the report.
/// Warm-started cells with source "auto" read the plain ZipperSoft cell of
/// the first seed, which therefore must be part of the run.
void cmd_run(const RunConfig& rc);

/// Re-reads a completed run directory and writes report/comparison.csv,
/// relative_vs_vanilla.csv (when a Vanilla cell exists), radar_data.csv,
/// params.csv, routing.csv, and per_seed.csv. Throws IncompleteRunError
/// listing the missing files if the run is not complete.
void cmd_report(const std::string& run_dir);

/// Mean-pooled encoder outputs for every eval utterance under every cell's
/// checkpoint, written to embeddings.csv. The datasets are regenerated
/// deterministically from the stored config.
void cmd_export_embeddings(const std::string& run_dir);

/// The config stored in a run directory (unwrapped and hash-checked).
RunConfig load_run_config(const std::string& run_dir);

} // namespace zlora
