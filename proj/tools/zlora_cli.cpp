// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 1 failed verification
// checks, 2 invalid configuration, 3 runtime invariant violation,
// 4 incomplete run directory.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "zlora/errors.hpp"
#include "zlora/experiment.hpp"
#include "zlora/tape.hpp"
#include "zlora/verify.hpp"

namespace {

zlora::Op op_from_name(const std::string& name) {
    using zlora::Op;
    static const Op all[] = {
        Op::MatMul,       Op::Add,         Op::Sub,          Op::Hadamard,   Op::ScaleConst,
        Op::Sigmoid,      Op::Silu,        Op::Relu,         Op::ConcatCols, Op::SelectCols,
        Op::DiagScaleCols, Op::LayerNormCols, Op::SoftmaxRows, Op::Transpose, Op::Sum,
        Op::MeanCols,     Op::AddBiasCols, Op::StackCols,    Op::SteThreshold};
    for (Op op : all) {
        if (name == zlora::op_name(op)) {
            return op;
        }
    }
    throw zlora::ConfigError("unknown op name for --fault: \"" + name + "\"");
}

int report_checks(const std::vector<zlora::CheckResult>& results) {
    std::fputs(zlora::format_results(results).c_str(), stdout);
    return zlora::all_pass(results) ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rank-composable low-rank adapter experiments"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    bool paper_hparams = false;
    std::string hard_polarity = "spec_on_one";
    bool chunked = false;
    std::string out_dir;
    auto* seed_opt = app.add_option("--seed", seed, "Override the config's seed list");
    app.add_flag("--paper-hparams", paper_hparams,
                 "Use the published hyperparameters (r=32, alpha=64, k=8, lr=2e-5)");
    auto* polarity_opt =
        app.add_option("--hard-polarity", hard_polarity, "Hard-gate reading of a 1")
            ->check(CLI::IsMember({"spec_on_one", "shared_on_one"}));
    auto* chunk_opt =
        app.add_flag("--chunked,!--no-chunked", chunked, "Train and evaluate on chunked inputs");
    auto* out_opt = app.add_option("--out", out_dir, "Override the config's output directory");

    std::string config_path;
    auto* run = app.add_subcommand("run", "Execute a configured experiment end to end");
    run->add_option("config", config_path, "JSON run configuration")->required();
    run->fallthrough();

    std::string scope = "all";
    std::string fault;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    gradcheck->add_option("--scope", scope, "ops|adapters|router|model|all")
        ->check(CLI::IsMember({"ops", "adapters", "router", "model", "all"}));
    gradcheck->add_option("--fault", fault,
                          "Corrupt one op's backward rule first (negative control)");
    gradcheck->fallthrough();

    auto* equiv = app.add_subcommand("equiv", "Cross-variant algebraic identity suite");
    equiv->fallthrough();

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Rebuild the report files of a finished run");
    report->add_option("dir", report_dir, "Run directory")->required();
    report->fallthrough();

    std::string export_dir;
    auto* export_emb =
        app.add_subcommand("export-embeddings", "Pooled encoder outputs per eval utterance");
    export_emb->add_option("dir", export_dir, "Run directory")->required();
    export_emb->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            zlora::RunConfig rc = zlora::RunConfig::from_file(config_path);
            if (seed_opt->count() > 0) {
                rc.seeds = {seed};
            }
            if (paper_hparams) {
                rc.model.lora.r = 32;
                rc.model.lora.alpha = 64.0;
                rc.model.lora.k = 8;
                rc.model.lora.r_s = 16;
                rc.model.lora.r_p = 16;
                rc.stage1.base_lr = 2e-5;
                rc.stage2.base_lr = 2e-5;
            }
            if (polarity_opt->count() > 0) {
                rc.model.lora.hard_polarity = zlora::polarity_from_string(hard_polarity);
            }
            if (chunk_opt->count() > 0) {
                rc.chunked = chunked;
            }
            if (out_opt->count() > 0) {
                rc.out_dir = out_dir;
            }
            zlora::cmd_run(rc);
            std::printf("run complete: %s\n", rc.out_dir.c_str());
            return 0;
        }
        if (gradcheck->parsed()) {
            if (!fault.empty()) {
                zlora::Tape::set_backward_fault(op_from_name(fault));
            }
            const auto results = zlora::gradcheck_suite(scope, seed);
            zlora::Tape::set_backward_fault(std::nullopt);
            return report_checks(results);
        }
        if (equiv->parsed()) {
            return report_checks(
                zlora::equiv_suite(50, zlora::polarity_from_string(hard_polarity)));
        }
        if (report->parsed()) {
            zlora::cmd_report(report_dir);
            std::printf("report written: %s/report\n", report_dir.c_str());
            return 0;
        }
        if (export_emb->parsed()) {
            zlora::cmd_export_embeddings(export_dir);
            std::printf("embeddings written: %s/embeddings.csv\n", export_dir.c_str());
            return 0;
        }
    } catch (const zlora::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const zlora::IncompleteRunError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 4;
    } catch (const zlora::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
