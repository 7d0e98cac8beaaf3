#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vig/io.hpp"
#include "vig/model.hpp"
#include "vig/runconfig.hpp"
#include "vig/train.hpp"

namespace vig {

// ---------------------------------------------------------------------------
// Checkpoints reuse the tensor container with section-tagged names:
//   param/<name>                  trainable tensors and running stats
//   opt/<name>.m, opt/<name>.v    AdamW moments
//   meta/...                      epoch, best val loss, step count, config echo
// A round trip reproduces forward outputs bit for bit.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    std::size_t epoch = 0;
    double best_val_loss = 0;
    std::string config_text;  // resolved run configuration
};

inline void save_checkpoint(VigModel<float>& model, const OptimizerState<float>* opt,
                            const CheckpointMeta& meta, const std::filesystem::path& path) {
    TensorFile tf;
    model.visit_params([&](Parameter<float>& p) { tf.add("param/" + p.name, p.value); });
    model.visit_stats([&](const std::string& name, RunningStats<float>& st) {
        tf.add("param/" + name + ".running_mean", st.mean);
        tf.add("param/" + name + ".running_var", st.var);
    });
    if (opt) {
        std::vector<Parameter<float>*> params = model.parameters();
        if (opt->m.size() != params.size() || opt->v.size() != params.size())
            throw ConfigError("checkpoint: optimizer state does not match parameter count");
        for (std::size_t i = 0; i < params.size(); ++i) {
            tf.add("opt/" + params[i]->name + ".m", opt->m[i]);
            tf.add("opt/" + params[i]->name + ".v", opt->v[i]);
        }
        Tensor<float> step({1});
        step.data[0] = static_cast<float>(opt->step);
        tf.add("meta/opt_step", step);
    }
    Tensor<float> epoch({1});
    epoch.data[0] = static_cast<float>(meta.epoch);
    tf.add("meta/epoch", epoch);
    Tensor<float> best({1});
    best.data[0] = static_cast<float>(meta.best_val_loss);
    tf.add("meta/best_val_loss", best);
    tf.add_bytes("meta/config", meta.config_text);
    tf.write(path);
}

struct LoadedCheckpoint {
    VigModel<float> model;
    RunConfig run_config;
    CheckpointMeta meta;
    bool has_optimizer_state = false;
    OptimizerState<float> opt;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const TensorFile tf = TensorFile::read(path);
    LoadedCheckpoint out;
    out.meta.config_text = tf.bytes("meta/config");
    out.run_config = parse_run_config_text(out.meta.config_text);
    out.meta.epoch = static_cast<std::size_t>(tf.tensor("meta/epoch").data[0]);
    out.meta.best_val_loss = static_cast<double>(tf.tensor("meta/best_val_loss").data[0]);

    out.model = build_model<float>(out.run_config.model, 0);
    out.model.visit_params([&](Parameter<float>& p) {
        const Tensor<float> t = tf.tensor("param/" + p.name);
        if (t.shape != p.value.shape)
            throw FormatError("checkpoint tensor 'param/" + p.name + "' has shape " +
                              shape_str(t.shape) + ", model expects " +
                              shape_str(p.value.shape));
        p.value = t;
    });
    out.model.visit_stats([&](const std::string& name, RunningStats<float>& st) {
        st.mean = tf.tensor("param/" + name + ".running_mean");
        st.var = tf.tensor("param/" + name + ".running_var");
    });

    if (tf.find("meta/opt_step")) {
        out.has_optimizer_state = true;
        out.opt.step = static_cast<std::int64_t>(tf.tensor("meta/opt_step").data[0]);
        out.model.visit_params([&](Parameter<float>& p) {
            out.opt.m.push_back(tf.tensor("opt/" + p.name + ".m"));
            out.opt.v.push_back(tf.tensor("opt/" + p.name + ".v"));
        });
    }
    return out;
}

}  // namespace vig
