#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vig/checkpoint.hpp"
#include "vig/core.hpp"
#include "vig/io.hpp"
#include "vig/metrics.hpp"
#include "vig/model.hpp"
#include "vig/runconfig.hpp"
#include "vig/train.hpp"

namespace vig::cli {

namespace fs = std::filesystem;

inline void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
    f << text;
    if (!f) throw DataError("write failed for '" + path.string() + "'");
}

template <class Real>
std::string history_text(const FitResult<Real>& fit) {
    std::string out = "# epoch train_loss val_loss lr\n";
    char line[128];
    for (const EpochRecord& r : fit.history) {
        std::snprintf(line, sizeof(line), "%zu %.9e %.9e %.9e\n", r.epoch, r.train_loss,
                      r.val_loss, r.lr);
        out += line;
    }
    return out;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> aggregate_dirs;
};

namespace detail {

/// Pulls every numeric key out of a run directory: metrics.kv entries when
/// present, plus best_val_loss from history.txt.
inline std::map<std::string, double> run_dir_metrics(const fs::path& dir) {
    std::map<std::string, double> out;
    const fs::path kv = dir / "metrics.kv";
    if (fs::exists(kv)) {
        std::ifstream f(kv);
        std::string line;
        while (std::getline(f, line)) {
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            try {
                out[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
            } catch (const std::exception&) {
                // non-numeric value (e.g. task=multiclass)
            }
        }
    }
    const fs::path hist = dir / "history.txt";
    if (fs::exists(hist)) {
        std::ifstream f(hist);
        std::string line;
        double best = std::numeric_limits<double>::infinity();
        while (std::getline(f, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::istringstream is(line);
            double epoch, train_loss, val_loss;
            if (is >> epoch >> train_loss >> val_loss) best = std::min(best, val_loss);
        }
        if (std::isfinite(best)) out["best_val_loss"] = best;
    }
    if (out.empty())
        throw DataError("run directory '" + dir.string() +
                        "' has no metrics.kv or history.txt to aggregate");
    return out;
}

}  // namespace detail

/// Mean and population std per metric across run directories.
inline int aggregate_runs(const std::vector<std::string>& dirs, std::ostream& os) {
    if (dirs.empty()) throw ConfigError("--aggregate requires at least one run directory");
    std::map<std::string, std::vector<double>> values;
    for (const std::string& d : dirs)
        for (const auto& [k, v] : detail::run_dir_metrics(d)) values[k].push_back(v);
    for (const auto& [key, vals] : values) {
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0;
        for (double v : vals) var += (v - mean) * (v - mean);
        var /= static_cast<double>(vals.size());
        char line[160];
        std::snprintf(line, sizeof(line), "%s = %.6f +- %.6f (n=%zu)\n", key.c_str(), mean,
                      std::sqrt(var), vals.size());
        os << line;
    }
    return 0;
}

inline int cmd_train(const TrainArgs& args) {
    if (!args.aggregate_dirs.empty()) return aggregate_runs(args.aggregate_dirs, std::cout);

    RunConfig rc = parse_run_config_file(args.config_path);
    if (args.seed) rc.train.seed = *args.seed;
    if (args.out) rc.output.dir = *args.out;
    if (rc.output.dir.empty())
        throw ConfigError("no output directory: set [output] dir or pass --out");
    if (rc.data.manifest.empty()) throw ConfigError("no dataset: set [data] manifest");
    rc.model.validate();
    rc.train.validate();

    const Dataset ds = load_dataset(rc.data.manifest, rc.data.bands);
    const DatasetSplits splits = split_dataset(ds, rc.data.fractions, rc.data.split_seed);

    VigModel<float> model = build_model<float>(rc.model, rc.train.seed);
    const FitResult<float> fit_result = fit(model, splits.train, splits.val, rc.train);

    const fs::path out_dir(rc.output.dir);
    fs::create_directories(out_dir);
    const std::string resolved = resolved_config_text(rc);
    write_text_file(out_dir / "config.resolved", resolved);
    write_text_file(out_dir / "history.txt", history_text(fit_result));

    CheckpointMeta meta;
    meta.epoch = fit_result.best_epoch;
    meta.best_val_loss = fit_result.best_val_loss;
    meta.config_text = resolved;
    save_checkpoint(model, &fit_result.opt, meta, out_dir / "checkpoint.vigt");

    std::cout << "trained " << fit_result.history.size() << " epochs (best epoch "
              << fit_result.best_epoch << ", val loss " << fit_result.best_val_loss << ")\n"
              << "outputs in " << out_dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string checkpoint_path;
    std::string manifest_path;
    std::string split = "test";  // train|val|test|all
    std::optional<std::string> out;
    std::size_t batch_size = 16;
};

template <class Real>
Tensor<Real> predict_probs(VigModel<Real>& model, const Dataset& ds, std::size_t batch_size) {
    Tensor<Real> probs({ds.samples.size(), model.cfg.num_classes});
    const auto ranges = vig::detail::batch_ranges(ds.samples.size(), batch_size, false);
    std::size_t row = 0;
    for (const auto& [lo, hi] : ranges) {
        std::vector<const Sample*> batch;
        for (std::size_t i = lo; i < hi; ++i) batch.push_back(&ds.samples[i]);
        Tape<Real> tape;
        Var<Real> logits =
            forward(tape, model, vig::detail::assemble_batch<Real>(batch, model.cfg), Mode::Eval);
        Var<Real> p = model.cfg.task == Task::Multiclass ? softmax(logits) : sigmoid(logits);
        const Tensor<Real>& pv = tape.val(p);
        for (std::size_t i = 0; i < pv.size(); ++i)
            probs.data[row * model.cfg.num_classes + i] = pv.data[i];
        row += hi - lo;
    }
    return probs;
}

inline MetricReport evaluate_dataset(VigModel<float>& model, const Dataset& ds,
                                     std::size_t batch_size) {
    vig::detail::check_dataset_model<float>(ds, model.cfg, "evaluation");
    const Tensor<float> probs = predict_probs(model, ds, batch_size);
    const auto pred = decide_labels(probs, model.cfg.task, 0.5);
    std::vector<std::vector<std::size_t>> truth;
    truth.reserve(ds.samples.size());
    for (const Sample& s : ds.samples) truth.push_back(s.label_list);
    return build_report(confusion_counts(pred, truth, model.cfg.num_classes), model.cfg.task);
}

inline int cmd_evaluate(const EvaluateArgs& args) {
    LoadedCheckpoint ckpt = load_checkpoint(args.checkpoint_path);
    const Dataset ds = load_dataset(args.manifest_path, ckpt.run_config.data.bands);

    Dataset chosen;
    if (args.split == "all") {
        chosen = ds;
    } else {
        DatasetSplits splits =
            split_dataset(ds, ckpt.run_config.data.fractions, ckpt.run_config.data.split_seed);
        if (args.split == "train") chosen = std::move(splits.train);
        else if (args.split == "val") chosen = std::move(splits.val);
        else if (args.split == "test") chosen = std::move(splits.test);
        else throw ConfigError("unknown split '" + args.split + "' (train|val|test|all)");
    }
    if (chosen.samples.empty()) throw DataError("selected split '" + args.split + "' is empty");

    const MetricReport report = evaluate_dataset(ckpt.model, chosen, args.batch_size);
    const fs::path out_dir =
        args.out ? fs::path(*args.out) : fs::path(args.checkpoint_path).parent_path();
    fs::create_directories(out_dir);
    write_text_file(out_dir / "metrics.txt", report.human());
    write_text_file(out_dir / "metrics.kv", report.kv());

    // Headline follows the task: macro suite for (balanced) multiclass, micro
    // for multilabel.
    const AggregateScores& s =
        report.task == Task::Multiclass ? report.macro : report.micro;
    const char* avg = report.task == Task::Multiclass ? "macro" : "micro";
    char line[256];
    std::snprintf(line, sizeof(line),
                  "%s on %zu samples: %s F1 %.4f, precision %.4f, recall %.4f, accuracy %.4f\n",
                  args.split.c_str(), static_cast<std::size_t>(report.samples), avg, s.f1,
                  s.precision, s.recall, s.accuracy);
    std::cout << line << "report written to " << (out_dir / "metrics.txt").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// inspect-graph
// ---------------------------------------------------------------------------

struct InspectGraphArgs {
    std::string checkpoint_path;
    std::string sample_path;
    int stage = 1;  // 1-based
    std::string out_file;
};

inline int cmd_inspect_graph(const InspectGraphArgs& args) {
    if (args.stage < 1 || args.stage > 3)
        throw ConfigError("invalid --stage " + std::to_string(args.stage) + " (expected 1..3)");
    LoadedCheckpoint ckpt = load_checkpoint(args.checkpoint_path);
    const ModelConfig& mc = ckpt.run_config.model;

    const TensorFile tf = TensorFile::read(args.sample_path);
    std::vector<const TensorFileEntry*> bands;
    if (ckpt.run_config.data.bands.empty()) {
        for (const TensorFileEntry& e : tf.entries())
            if (e.dtype == kDtypeF32) bands.push_back(&e);
    } else {
        for (const std::string& name : ckpt.run_config.data.bands) bands.push_back(&tf.require(name));
    }
    if (bands.size() != mc.in_channels)
        throw DataError("sample '" + args.sample_path + "' has " + std::to_string(bands.size()) +
                        " bands vs model channels " + std::to_string(mc.in_channels));
    Tensor<float> x({1, mc.in_channels, mc.input_h, mc.input_w});
    for (std::size_t c = 0; c < bands.size(); ++c) {
        const Tensor<float> band =
            resize_band(Tensor<float>(bands[c]->shape, bands[c]->f32), mc.input_h, mc.input_w);
        std::copy_n(band.data.data(), band.size(), x.data.data() + c * mc.input_h * mc.input_w);
    }

    Tape<float> tape;
    ForwardStats<float> stats;
    stats.capture_stage = args.stage - 1;
    forward(tape, ckpt.model, x, Mode::Eval, nullptr, &stats);
    if (!stats.captured) throw TrainingError("graph capture failed for stage " +
                                             std::to_string(args.stage));

    const PatchGraph& g = stats.captured_graph;
    std::string out;
    char line[96];
    for (std::size_t i = 0; i < g.num_nodes; ++i)
        for (std::size_t r = 0; r < g.k; ++r) {
            std::snprintf(line, sizeof(line), "%d %zu %u %zu %.8e\n", args.stage, i,
                          g.neighbor(i, r), r, static_cast<double>(stats.captured_dist.at2(i, r)));
            out += line;
        }
    write_text_file(args.out_file, out);
    std::cout << "wrote " << g.num_nodes * g.k << " edges (stage " << args.stage << ", "
              << g.num_nodes << " patches, k=" << g.k << ") to " << args.out_file << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::size_t classes = 8;
    std::size_t per_class = 32;
    std::size_t channels = 3;
    std::size_t hw = 32;
    std::string task = "multiclass";
    std::uint64_t seed = 1;
    std::string out_dir;
};

inline int cmd_synth(const SynthArgs& args) {
    if (args.out_dir.empty()) throw ConfigError("synth: --out directory required");
    SynthSpec spec;
    spec.num_classes = args.classes;
    spec.samples_per_class = args.per_class;
    spec.channels = args.channels;
    spec.height = spec.width = args.hw;
    spec.task = task_from_string(args.task);
    spec.seed = args.seed;
    const fs::path manifest = synthesize_dataset(spec, args.out_dir);
    std::cout << manifest.string() << "\n";
    return 0;
}

}  // namespace vig::cli
