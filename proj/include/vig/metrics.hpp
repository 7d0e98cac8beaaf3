#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "vig/core.hpp"

namespace vig {

// ---------------------------------------------------------------------------
// Decision rules
// ---------------------------------------------------------------------------

/// Argmax with ties to the lowest index.
template <class Real>
std::vector<std::size_t> decide_multiclass(const Tensor<Real>& probs) {
    if (probs.rank() != 2) throw DimensionError("decide_multiclass expects [B,N]");
    const std::size_t bsz = probs.shape[0], n = probs.shape[1];
    std::vector<std::size_t> out(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
        const Real* row = probs.data.data() + b * n;
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (row[j] > row[best]) best = j;  // strict >: ties keep the lower index
        out[b] = best;
    }
    return out;
}

/// Per-sample label sets. Multilabel keeps classes with probability strictly
/// above the threshold (an empty set is allowed); multiclass yields the
/// argmax singleton.
template <class Real>
std::vector<std::vector<std::size_t>> decide_labels(const Tensor<Real>& probs, Task task,
                                                    double threshold = 0.5) {
    if (probs.rank() != 2) throw DimensionError("decide_labels expects [B,N]");
    const std::size_t bsz = probs.shape[0], n = probs.shape[1];
    std::vector<std::vector<std::size_t>> out(bsz);
    if (task == Task::Multiclass) {
        std::vector<std::size_t> idx = decide_multiclass(probs);
        for (std::size_t b = 0; b < bsz; ++b) out[b] = {idx[b]};
        return out;
    }
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t j = 0; j < n; ++j)
            if (static_cast<double>(probs.at2(b, j)) > threshold) out[b].push_back(j);
    return out;
}

// ---------------------------------------------------------------------------
// Confusion counting
// ---------------------------------------------------------------------------

/// One-vs-rest counts per class. Counts merge associatively across shards.
struct ConfusionCounts {
    std::size_t num_classes = 0;
    std::uint64_t samples = 0;
    std::vector<std::uint64_t> tp, fp, fn, tn;

    explicit ConfusionCounts(std::size_t nc = 0)
        : num_classes(nc), tp(nc, 0), fp(nc, 0), fn(nc, 0), tn(nc, 0) {}

    void merge(const ConfusionCounts& o) {
        if (o.num_classes != num_classes) throw DimensionError("confusion merge: class count");
        samples += o.samples;
        for (std::size_t c = 0; c < num_classes; ++c) {
            tp[c] += o.tp[c];
            fp[c] += o.fp[c];
            fn[c] += o.fn[c];
            tn[c] += o.tn[c];
        }
    }
};

/// Tallies per-class one-vs-rest counts from predicted and true label sets
/// (multiclass samples are singleton sets).
inline ConfusionCounts confusion_counts(const std::vector<std::vector<std::size_t>>& pred,
                                        const std::vector<std::vector<std::size_t>>& truth,
                                        std::size_t num_classes) {
    if (pred.size() != truth.size())
        throw DimensionError("confusion_counts: " + std::to_string(pred.size()) +
                             " predictions vs " + std::to_string(truth.size()) + " truths");
    ConfusionCounts cc(num_classes);
    cc.samples = pred.size();
    std::vector<char> p(num_classes), t(num_classes);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        std::fill(p.begin(), p.end(), 0);
        std::fill(t.begin(), t.end(), 0);
        for (std::size_t c : pred[i]) {
            if (c >= num_classes)
                throw DataError("predicted label " + std::to_string(c) + " out of range [0," +
                                std::to_string(num_classes) + ")");
            p[c] = 1;
        }
        for (std::size_t c : truth[i]) {
            if (c >= num_classes)
                throw DataError("true label " + std::to_string(c) + " out of range [0," +
                                std::to_string(num_classes) + ")");
            t[c] = 1;
        }
        for (std::size_t c = 0; c < num_classes; ++c) {
            if (p[c] && t[c])
                ++cc.tp[c];
            else if (p[c])
                ++cc.fp[c];
            else if (t[c])
                ++cc.fn[c];
            else
                ++cc.tn[c];
        }
    }
    return cc;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

enum class Averaging { Micro, Macro };

struct PRF {
    double precision = 0, recall = 0, f1 = 0;
};

namespace detail {

// 0/0 convention: a class with no positive decisions (or no positive truths)
// scores 0, which feeds the Min columns.
inline double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

inline PRF prf_from(double tp, double fp, double fn) {
    PRF s;
    s.precision = safe_div(tp, tp + fp);
    s.recall = safe_div(tp, tp + fn);
    s.f1 = safe_div(2 * s.precision * s.recall, s.precision + s.recall);
    return s;
}

}  // namespace detail

inline PRF class_scores(const ConfusionCounts& cc, std::size_t c) {
    return detail::prf_from(static_cast<double>(cc.tp[c]), static_cast<double>(cc.fp[c]),
                            static_cast<double>(cc.fn[c]));
}

struct AggregateScores {
    double precision = 0, recall = 0, f1 = 0, accuracy = 0;
};

/// Micro pools counts across classes before applying the P/R/F1 formulas;
/// macro averages the per-class values. Accuracy is the fraction of correct
/// samples for multiclass and the pooled (tp+tn)/decisions for multilabel.
inline AggregateScores aggregate(const ConfusionCounts& cc, Averaging mode, Task task) {
    if (cc.num_classes == 0) throw ConfigError("aggregate: no classes");
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t c = 0; c < cc.num_classes; ++c) {
        tp += static_cast<double>(cc.tp[c]);
        fp += static_cast<double>(cc.fp[c]);
        fn += static_cast<double>(cc.fn[c]);
        tn += static_cast<double>(cc.tn[c]);
    }
    AggregateScores out;
    const double total = tp + fp + fn + tn;
    if (task == Task::Multiclass)
        out.accuracy = detail::safe_div(tp, static_cast<double>(cc.samples));
    else
        out.accuracy = detail::safe_div(tp + tn, total);
    if (mode == Averaging::Micro) {
        const PRF s = detail::prf_from(tp, fp, fn);
        out.precision = s.precision;
        out.recall = s.recall;
        out.f1 = s.f1;
    } else {
        double sp = 0, sr = 0, sf = 0;
        for (std::size_t c = 0; c < cc.num_classes; ++c) {
            const PRF s = class_scores(cc, c);
            sp += s.precision;
            sr += s.recall;
            sf += s.f1;
        }
        const double n = static_cast<double>(cc.num_classes);
        out.precision = sp / n;
        out.recall = sr / n;
        out.f1 = sf / n;
    }
    return out;
}

struct ClassExtremes {
    PRF max, min;
};

inline ClassExtremes per_class_extremes(const ConfusionCounts& cc) {
    if (cc.num_classes == 0) throw ConfigError("per_class_extremes: no classes");
    ClassExtremes e;
    PRF first = class_scores(cc, 0);
    e.max = e.min = first;
    for (std::size_t c = 1; c < cc.num_classes; ++c) {
        const PRF s = class_scores(cc, c);
        e.max.precision = std::max(e.max.precision, s.precision);
        e.max.recall = std::max(e.max.recall, s.recall);
        e.max.f1 = std::max(e.max.f1, s.f1);
        e.min.precision = std::min(e.min.precision, s.precision);
        e.min.recall = std::min(e.min.recall, s.recall);
        e.min.f1 = std::min(e.min.f1, s.f1);
    }
    return e;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricReport {
    Task task = Task::Multiclass;
    std::size_t num_classes = 0;
    std::uint64_t samples = 0;
    AggregateScores micro, macro;
    std::vector<PRF> per_class;
    ClassExtremes extremes;

    std::string human() const;
    std::string kv() const;
};

inline MetricReport build_report(const ConfusionCounts& cc, Task task) {
    MetricReport r;
    r.task = task;
    r.num_classes = cc.num_classes;
    r.samples = cc.samples;
    r.micro = aggregate(cc, Averaging::Micro, task);
    r.macro = aggregate(cc, Averaging::Macro, task);
    for (std::size_t c = 0; c < cc.num_classes; ++c) r.per_class.push_back(class_scores(cc, c));
    r.extremes = per_class_extremes(cc);
    return r;
}

namespace detail {

inline std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace detail

inline std::string MetricReport::human() const {
    std::string out;
    out += "task=";
    out += task_to_string(task);
    out += " classes=" + std::to_string(num_classes) + " samples=" + std::to_string(samples) +
           "\n\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%-8s %10s %10s %10s %10s\n", "avg", "F1", "Precision",
                  "Recall", "Accuracy");
    out += line;
    auto row = [&](const char* name, const AggregateScores& s) {
        std::snprintf(line, sizeof(line), "%-8s %10.6f %10.6f %10.6f %10.6f\n", name, s.f1,
                      s.precision, s.recall, s.accuracy);
        out += line;
    };
    row("micro", micro);
    row("macro", macro);
    out += "\n";
    std::snprintf(line, sizeof(line), "%8s %8s %8s %8s %8s %8s\n", "MaxF1", "MinF1", "MaxPrec",
                  "MinPrec", "MaxRec", "MinRec");
    out += line;
    std::snprintf(line, sizeof(line), "%8.4f %8.4f %8.4f %8.4f %8.4f %8.4f\n", extremes.max.f1,
                  extremes.min.f1, extremes.max.precision, extremes.min.precision,
                  extremes.max.recall, extremes.min.recall);
    out += line;
    out += "\n";
    std::snprintf(line, sizeof(line), "%-6s %10s %10s %10s\n", "class", "F1", "Precision",
                  "Recall");
    out += line;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        std::snprintf(line, sizeof(line), "%-6zu %10.6f %10.6f %10.6f\n", c, per_class[c].f1,
                      per_class[c].precision, per_class[c].recall);
        out += line;
    }
    return out;
}

inline std::string MetricReport::kv() const {
    std::string out;
    out += std::string("task=") + task_to_string(task) + "\n";
    out += "classes=" + std::to_string(num_classes) + "\n";
    out += "samples=" + std::to_string(samples) + "\n";
    using detail::fmt6;
    out += "micro_f1=" + fmt6(micro.f1) + "\n";
    out += "micro_precision=" + fmt6(micro.precision) + "\n";
    out += "micro_recall=" + fmt6(micro.recall) + "\n";
    out += "macro_f1=" + fmt6(macro.f1) + "\n";
    out += "macro_precision=" + fmt6(macro.precision) + "\n";
    out += "macro_recall=" + fmt6(macro.recall) + "\n";
    out += "accuracy=" + fmt6(micro.accuracy) + "\n";
    out += "max_f1=" + fmt6(extremes.max.f1) + "\n";
    out += "min_f1=" + fmt6(extremes.min.f1) + "\n";
    out += "max_prec=" + fmt6(extremes.max.precision) + "\n";
    out += "min_prec=" + fmt6(extremes.min.precision) + "\n";
    out += "max_rec=" + fmt6(extremes.max.recall) + "\n";
    out += "min_rec=" + fmt6(extremes.min.recall) + "\n";
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        const std::string p = "class_" + std::to_string(c) + "_";
        out += p + "f1=" + fmt6(per_class[c].f1) + "\n";
        out += p + "precision=" + fmt6(per_class[c].precision) + "\n";
        out += p + "recall=" + fmt6(per_class[c].recall) + "\n";
    }
    return out;
}

}  // namespace vig
