#pragma once

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vig/commands.hpp"
#include "vig/core.hpp"

namespace vig::cli {

/// Builds the CLI grammar and dispatches one command. Exit codes: 0 success,
/// 1 runtime/data error, 2 usage/config error.
inline int run(int argc, const char* const* argv) {
    CLI::App app{"Dynamic-graph pyramid classifier for multispectral image tiles"};
    app.require_subcommand(1);

    TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "Train a model from a run config");
    train->add_option("config", train_args.config_path, "Run configuration file");
    std::uint64_t seed_opt = 0;
    std::string out_opt;
    CLI::Option* seed_flag = train->add_option("--seed", seed_opt, "Override [train] seed");
    CLI::Option* out_flag = train->add_option("--out", out_opt, "Override [output] dir");
    train->add_option("--aggregate", train_args.aggregate_dirs,
                      "Aggregate metrics across finished run directories (mean +- std)");

    EvaluateArgs eval_args;
    CLI::App* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset split");
    evaluate->add_option("checkpoint", eval_args.checkpoint_path, "Checkpoint file")->required();
    evaluate->add_option("manifest", eval_args.manifest_path, "Dataset manifest")->required();
    evaluate->add_option("--split", eval_args.split, "Split to evaluate: train|val|test|all");
    std::string eval_out;
    CLI::Option* eval_out_flag = evaluate->add_option("--out", eval_out, "Report directory");
    evaluate->add_option("--batch", eval_args.batch_size, "Evaluation batch size");

    InspectGraphArgs graph_args;
    CLI::App* inspect = app.add_subcommand(
        "inspect-graph", "Dump the dynamic KNN wiring of one stage for one sample");
    inspect->add_option("checkpoint", graph_args.checkpoint_path, "Checkpoint file")->required();
    inspect->add_option("sample", graph_args.sample_path, "Sample container file")->required();
    inspect->add_option("--stage", graph_args.stage, "Encoder stage (1..3)");
    inspect->add_option("--out", graph_args.out_file, "Edge list output file")->required();

    SynthArgs synth_args;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--classes", synth_args.classes, "Number of classes");
    synth->add_option("--per-class", synth_args.per_class, "Samples per class");
    synth->add_option("--c", synth_args.channels, "Channels (bands)");
    synth->add_option("--hw", synth_args.hw, "Square image extent");
    synth->add_option("--task", synth_args.task, "multiclass|multilabel");
    synth->add_option("--seed", synth_args.seed, "Generator seed");
    synth->add_option("--out", synth_args.out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) {
            if (train_args.aggregate_dirs.empty() && train_args.config_path.empty())
                throw ConfigError("train: a config file (or --aggregate) is required");
            if (*seed_flag) train_args.seed = seed_opt;
            if (*out_flag) train_args.out = out_opt;
            return cmd_train(train_args);
        }
        if (evaluate->parsed()) {
            if (*eval_out_flag) eval_args.out = eval_out;
            return cmd_evaluate(eval_args);
        }
        if (inspect->parsed()) return cmd_inspect_graph(graph_args);
        if (synth->parsed()) return cmd_synth(synth_args);
        throw ConfigError("no command given");
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

/// Test-friendly entry point ("vig" is prepended as argv[0]).
inline int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("vig");
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace vig::cli
