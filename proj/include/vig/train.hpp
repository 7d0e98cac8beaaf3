#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "vig/autograd.hpp"
#include "vig/core.hpp"
#include "vig/io.hpp"
#include "vig/model.hpp"
#include "vig/ops.hpp"

namespace vig {

struct TrainConfig {
    std::size_t max_epochs = 100;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t es_patience = 10;      // epochs
    double es_tolerance = 1e-3;
    std::size_t plateau_patience = 5;  // epochs
    double plateau_factor = 10.0;      // divisor
    std::size_t batch_size = 16;
    std::uint64_t seed = 1;

    void validate() const {
        if (max_epochs == 0 || batch_size == 0 || es_patience == 0 || plateau_patience == 0)
            throw ConfigError("train config: counts must be positive");
        if (lr <= 0 || weight_decay < 0 || eps <= 0 || es_tolerance <= 0)
            throw ConfigError("train config: rates must be positive");
        if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
            throw ConfigError("train config: betas must lie in (0,1)");
        if (plateau_factor <= 1.0)
            throw ConfigError("train config: plateau_factor must be > 1");
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy against class indices.
template <class Real>
Var<Real> loss_multiclass(Var<Real> logits, const std::vector<std::size_t>& targets) {
    return softmax_cross_entropy(logits, targets);
}

/// Mean per-class sigmoid binary cross-entropy against multi-hot targets.
template <class Real>
Var<Real> loss_multilabel(Var<Real> logits, const Tensor<Real>& multi_hot) {
    return bce_with_logits(logits, multi_hot);
}

/// Batch loss for dataset samples under either task.
template <class Real>
Var<Real> batch_loss(Task task, Var<Real> logits, const std::vector<const Sample*>& batch) {
    const Tensor<Real>& zv = logits.tape->val(logits);
    if (zv.rank() != 2 || zv.shape[0] != batch.size())
        throw DimensionError("batch_loss: logits " + shape_str(zv.shape) + " vs batch of " +
                             std::to_string(batch.size()));
    const std::size_t nc = zv.shape[1];
    if (task == Task::Multiclass) {
        std::vector<std::size_t> idx;
        idx.reserve(batch.size());
        for (const Sample* s : batch) {
            if (s->label_list.size() != 1)
                throw DataError("multiclass sample '" + s->path + "' has " +
                                std::to_string(s->label_list.size()) + " labels");
            idx.push_back(s->label_list[0]);
        }
        return loss_multiclass(logits, idx);
    }
    Tensor<Real> targets({batch.size(), nc});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b]->labels.size() != nc)
            throw DimensionError("batch_loss: sample '" + batch[b]->path + "' has " +
                                 std::to_string(batch[b]->labels.size()) + " classes vs logits " +
                                 std::to_string(nc));
        for (std::size_t c = 0; c < nc; ++c)
            targets.at2(b, c) = static_cast<Real>(batch[b]->labels.data[c]);
    }
    return loss_multilabel(logits, targets);
}

// ---------------------------------------------------------------------------
// AdamW: decoupled weight decay, bias-corrected moments.
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
// ---------------------------------------------------------------------------

/// First/second moments plus the step counter, aligned with the model's
/// parameter registration order. Lives in checkpoints alongside parameters.
template <class Real>
struct OptimizerState {
    std::vector<Tensor<Real>> m, v;
    std::int64_t step = 0;
};

template <class Real>
struct AdamW {
    double lr;
    double beta1, beta2, eps, weight_decay;
    std::int64_t step_count = 0;
    std::vector<Tensor<Real>> m, v;

    AdamW(const std::vector<Parameter<Real>*>& params, const TrainConfig& cfg)
        : lr(cfg.lr), beta1(cfg.beta1), beta2(cfg.beta2), eps(cfg.eps),
          weight_decay(cfg.weight_decay) {
        for (Parameter<Real>* p : params) {
            m.emplace_back(p->value.shape);
            v.emplace_back(p->value.shape);
        }
    }

    OptimizerState<Real> state() const { return OptimizerState<Real>{m, v, step_count}; }

    void restore(const OptimizerState<Real>& st) {
        m = st.m;
        v = st.v;
        step_count = st.step;
    }

    void step(const std::vector<Parameter<Real>*>& params) {
        if (params.size() != m.size()) throw ConfigError("adamw: parameter set changed");
        ++step_count;
        const Real bc1 = Real(1) - static_cast<Real>(std::pow(beta1, step_count));
        const Real bc2 = Real(1) - static_cast<Real>(std::pow(beta2, step_count));
        const Real b1 = static_cast<Real>(beta1), b2 = static_cast<Real>(beta2);
        const Real lr_r = static_cast<Real>(lr), eps_r = static_cast<Real>(eps);
        const Real wd = static_cast<Real>(weight_decay);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Parameter<Real>& p = *params[i];
            if (!p.trainable) continue;
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const Real g = p.grad.data[j];
                m[i].data[j] = b1 * m[i].data[j] + (Real(1) - b1) * g;
                v[i].data[j] = b2 * v[i].data[j] + (Real(1) - b2) * g * g;
                const Real m_hat = m[i].data[j] / bc1;
                const Real v_hat = v[i].data[j] / bc2;
                p.value.data[j] -= lr_r * m_hat / (std::sqrt(v_hat) + eps_r) +
                                   lr_r * wd * p.value.data[j];
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Epoch-level schedules. Both treat "improvement" as
//   val_loss < best - tolerance
// and keep independent counters; an LR reduction does not reset the
// early-stop counter.
// ---------------------------------------------------------------------------

struct PlateauState {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
};

/// Returns the (possibly reduced) learning rate for the next epoch. The rate
/// drops by `factor` once more than `patience` consecutive epochs fail to
/// improve, after which the counter restarts.
inline double lr_plateau_update(PlateauState& st, double val_loss, double lr, double tolerance,
                                std::size_t patience, double factor) {
    if (val_loss < st.best - tolerance) {
        st.best = val_loss;
        st.bad_epochs = 0;
        return lr;
    }
    ++st.bad_epochs;
    if (st.bad_epochs > patience) {
        st.bad_epochs = 0;
        return lr / factor;
    }
    return lr;
}

struct EarlyStopState {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
};

/// True once `patience` consecutive epochs show no improvement over the best.
inline bool early_stop_check(EarlyStopState& st, double val_loss, double tolerance,
                             std::size_t patience) {
    if (val_loss < st.best - tolerance) {
        st.best = val_loss;
        st.bad_epochs = 0;
        return false;
    }
    ++st.bad_epochs;
    return st.bad_epochs >= patience;
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;       // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double lr = 0;               // rate in effect during this epoch
};

template <class Real>
struct FitResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool early_stopped = false;
    OptimizerState<Real> opt;  // optimizer state at the best epoch
};

namespace detail {

template <class Real>
void check_dataset_model(const Dataset& ds, const ModelConfig& cfg, const char* which) {
    if (ds.samples.empty()) throw DataError(std::string(which) + " dataset is empty");
    if (ds.channels != cfg.in_channels || ds.height != cfg.input_h || ds.width != cfg.input_w)
        throw DataError(std::string(which) + " dataset [" + std::to_string(ds.channels) + "," +
                        std::to_string(ds.height) + "," + std::to_string(ds.width) +
                        "] does not match model input [" + std::to_string(cfg.in_channels) + "," +
                        std::to_string(cfg.input_h) + "," + std::to_string(cfg.input_w) + "]");
    if (ds.classes != cfg.num_classes)
        throw DataError(std::string(which) + " dataset has " + std::to_string(ds.classes) +
                        " classes vs model " + std::to_string(cfg.num_classes));
    if (ds.task != cfg.task)
        throw DataError(std::string(which) + " dataset task does not match model task");
}

template <class Real>
Tensor<Real> assemble_batch(const std::vector<const Sample*>& batch, const ModelConfig& cfg) {
    Tensor<Real> x({batch.size(), cfg.in_channels, cfg.input_h, cfg.input_w});
    const std::size_t per = cfg.in_channels * cfg.input_h * cfg.input_w;
    for (std::size_t b = 0; b < batch.size(); ++b)
        for (std::size_t i = 0; i < per; ++i)
            x.data[b * per + i] = static_cast<Real>(batch[b]->image.data[i]);
    return x;
}

/// Contiguous batch index ranges; a trailing single sample is merged into the
/// previous batch when `merge_singleton` (train-mode batch norm needs B >= 2).
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n,
                                                                     std::size_t batch_size,
                                                                     bool merge_singleton) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t lo = 0; lo < n; lo += batch_size)
        out.emplace_back(lo, std::min(lo + batch_size, n));
    if (merge_singleton && out.size() >= 2 && out.back().second - out.back().first == 1) {
        out[out.size() - 2].second = out.back().second;
        out.pop_back();
    }
    return out;
}

}  // namespace detail

/// Mean loss over a dataset in eval mode.
template <class Real>
double evaluate_loss(VigModel<Real>& model, const Dataset& ds, std::size_t batch_size) {
    detail::check_dataset_model<Real>(ds, model.cfg, "eval");
    double total = 0;
    const auto ranges = detail::batch_ranges(ds.samples.size(), batch_size, false);
    for (const auto& [lo, hi] : ranges) {
        std::vector<const Sample*> batch;
        for (std::size_t i = lo; i < hi; ++i) batch.push_back(&ds.samples[i]);
        Tape<Real> tape;
        Var<Real> logits = forward(tape, model, detail::assemble_batch<Real>(batch, model.cfg),
                                   Mode::Eval);
        Var<Real> l = batch_loss(model.cfg.task, logits, batch);
        total += static_cast<double>(tape.val(l).data[0]) * static_cast<double>(hi - lo);
    }
    return total / static_cast<double>(ds.samples.size());
}

/// Epoch loop: seeded shuffle, forward/loss/backward/AdamW per batch, then
/// validation loss, plateau LR update and early-stop check. The parameters,
/// running stats and optimizer state of the best-validation epoch are
/// restored into the model before returning.
template <class Real>
FitResult<Real> fit(VigModel<Real>& model, const Dataset& train_set, const Dataset& val_set,
                    const TrainConfig& cfg) {
    cfg.validate();
    detail::check_dataset_model<Real>(train_set, model.cfg, "train");
    detail::check_dataset_model<Real>(val_set, model.cfg, "val");
    if (train_set.samples.size() < 2)
        throw DataError("training requires at least 2 samples (batch-norm batches)");

    std::vector<Parameter<Real>*> params = model.parameters();
    AdamW<Real> opt(params, cfg);
    Rng dropout_rng(mix_seed(cfg.seed, 0xd509));
    PlateauState plateau;
    EarlyStopState stopper;
    FitResult<Real> result;
    double lr = cfg.lr;

    struct Snapshot {
        std::vector<Tensor<Real>> params;
        std::vector<std::pair<Tensor<Real>, Tensor<Real>>> stats;
        OptimizerState<Real> opt;
    } best;
    auto take_snapshot = [&]() {
        best.params.clear();
        best.stats.clear();
        for (Parameter<Real>* p : params) best.params.push_back(p->value);
        model.visit_stats([&](const std::string&, RunningStats<Real>& st) {
            best.stats.emplace_back(st.mean, st.var);
        });
        best.opt = opt.state();
    };
    take_snapshot();

    const std::size_t n = train_set.samples.size();
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(cfg.seed, epoch));
        shuffle_rng.shuffle(order);

        double train_loss_sum = 0;
        const auto ranges = detail::batch_ranges(n, cfg.batch_size, true);
        for (std::size_t bi = 0; bi < ranges.size(); ++bi) {
            std::vector<const Sample*> batch;
            for (std::size_t i = ranges[bi].first; i < ranges[bi].second; ++i)
                batch.push_back(&train_set.samples[order[i]]);
            model.zero_grads();
            Tape<Real> tape;
            double batch_loss_v;
            Var<Real> l;
            try {
                Var<Real> logits = forward(tape, model,
                                           detail::assemble_batch<Real>(batch, model.cfg),
                                           Mode::Train, &dropout_rng);
                l = batch_loss(model.cfg.task, logits, batch);
                batch_loss_v = static_cast<double>(tape.val(l).data[0]);
            } catch (const TrainingError& e) {
                throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(bi) + ", lr " +
                                    std::to_string(lr));
            }
            if (!std::isfinite(batch_loss_v))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(bi) + ", lr " +
                                    std::to_string(lr));
            tape.backward(l);
            opt.lr = lr;
            opt.step(params);
            train_loss_sum += batch_loss_v * static_cast<double>(batch.size());
        }

        const double train_loss = train_loss_sum / static_cast<double>(n);
        const double val_loss = evaluate_loss(model, val_set, cfg.batch_size);
        result.history.push_back(EpochRecord{epoch, train_loss, val_loss, lr});

        if (val_loss < result.best_val_loss) {
            result.best_val_loss = val_loss;
            result.best_epoch = epoch;
            take_snapshot();
        }
        lr = lr_plateau_update(plateau, val_loss, lr, cfg.es_tolerance, cfg.plateau_patience,
                               cfg.plateau_factor);
        if (early_stop_check(stopper, val_loss, cfg.es_tolerance, cfg.es_patience)) {
            result.early_stopped = true;
            break;
        }
    }

    // Restore the best-validation snapshot.
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best.params[i];
    std::size_t si = 0;
    model.visit_stats([&](const std::string&, RunningStats<Real>& st) {
        st.mean = best.stats[si].first;
        st.var = best.stats[si].second;
        ++si;
    });
    result.opt = std::move(best.opt);
    return result;
}

}  // namespace vig
