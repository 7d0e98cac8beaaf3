#include <gtest/gtest.h>

#include "test_support.hpp"
#include "vig/metrics.hpp"

using namespace vig;

namespace {

using LabelSets = std::vector<std::vector<std::size_t>>;

/// Random multiclass/multilabel instance for oracle comparisons.
void random_instance(Rng& rng, std::size_t max_samples, std::size_t max_classes, bool multilabel,
                     LabelSets& pred, LabelSets& truth, std::size_t& nc) {
    nc = 2 + rng.index(max_classes - 1);
    const std::size_t n = 1 + rng.index(max_samples);
    pred.assign(n, {});
    truth.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
        if (multilabel) {
            for (std::size_t c = 0; c < nc; ++c) {
                if (rng.uniform() < 0.35) pred[i].push_back(c);
                if (rng.uniform() < 0.35) truth[i].push_back(c);
            }
        } else {
            pred[i] = {rng.index(nc)};
            truth[i] = {rng.index(nc)};
        }
    }
}

}  // namespace

TEST(DecideLabels, StrictThreshold) {
    auto probs = Tensor<float>::from_values({1, 3}, {0.7f, 0.5f, 0.2f});
    const auto sets = decide_labels(probs, Task::Multilabel, 0.5);
    EXPECT_EQ(sets[0], (std::vector<std::size_t>{0}));  // 0.5 is NOT > 0.5
}

TEST(DecideLabels, EmptySetAllowed) {
    auto probs = Tensor<float>::from_values({2, 3}, {0.1f, 0.2f, 0.3f, 0.49f, 0.0f, 0.5f});
    const auto sets = decide_labels(probs, Task::Multilabel, 0.5);
    EXPECT_TRUE(sets[0].empty());
    EXPECT_TRUE(sets[1].empty());
}

TEST(DecideLabels, MulticlassArgmaxTieToLowestIndex) {
    auto probs = Tensor<float>::from_values({1, 3}, {0.4f, 0.4f, 0.2f});
    EXPECT_EQ(decide_multiclass(probs)[0], 0u);
    const auto sets = decide_labels(probs, Task::Multiclass);
    EXPECT_EQ(sets[0], (std::vector<std::size_t>{0}));
}

TEST(DecideLabels, ThresholdMonotone) {
    Rng rng(1);
    auto probs = oracle::random_tensor<float>({20, 6}, rng, 0.0, 1.0);
    for (double lo : {0.2, 0.4, 0.6}) {
        const auto a = decide_labels(probs, Task::Multilabel, lo);
        const auto b = decide_labels(probs, Task::Multilabel, lo + 0.15);
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t c : b[i])
                EXPECT_NE(std::find(a[i].begin(), a[i].end(), c), a[i].end())
                    << "raising t added label " << c;
    }
}

TEST(ConfusionCounts, PerfectPrediction) {
    LabelSets pred{{0}, {1}, {2}}, truth{{0}, {1}, {2}};
    const ConfusionCounts cc = confusion_counts(pred, truth, 3);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(cc.fp[c], 0u);
        EXPECT_EQ(cc.fn[c], 0u);
        EXPECT_EQ(cc.tp[c] + cc.tn[c], 3u);
    }
}

TEST(ConfusionCounts, HandEnumeratedMultilabelSample) {
    // truth {1,2}, pred {2,3}, N=4: tp2=1, fn1=1, fp3=1, tn0=1
    const ConfusionCounts cc = confusion_counts({{2, 3}}, {{1, 2}}, 4);
    EXPECT_EQ(cc.tn[0], 1u);
    EXPECT_EQ(cc.fn[1], 1u);
    EXPECT_EQ(cc.tp[2], 1u);
    EXPECT_EQ(cc.fp[3], 1u);
}

TEST(ConfusionCounts, EmptyPredictionIsFalseNegative) {
    const ConfusionCounts cc = confusion_counts({{}}, {{0}}, 2);
    EXPECT_EQ(cc.fn[0], 1u);
    EXPECT_EQ(cc.tn[1], 1u);
}

TEST(ConfusionCounts, InvariantAndErrors) {
    Rng rng(2);
    LabelSets pred, truth;
    std::size_t nc;
    random_instance(rng, 30, 6, true, pred, truth, nc);
    const ConfusionCounts cc = confusion_counts(pred, truth, nc);
    for (std::size_t c = 0; c < nc; ++c)
        EXPECT_EQ(cc.tp[c] + cc.fp[c] + cc.fn[c] + cc.tn[c], pred.size());

    EXPECT_THROW(confusion_counts({{5}}, {{0}}, 3), DataError);
    EXPECT_THROW(confusion_counts({{0}}, {{0}, {1}}, 3), DimensionError);
}

TEST(ConfusionCounts, MergeIsAssociativeAcrossShards) {
    Rng rng(3);
    LabelSets pred, truth;
    std::size_t nc;
    random_instance(rng, 40, 5, true, pred, truth, nc);
    const ConfusionCounts whole = confusion_counts(pred, truth, nc);
    const std::size_t cut = pred.size() / 2;
    ConfusionCounts a = confusion_counts(LabelSets(pred.begin(), pred.begin() + cut),
                                         LabelSets(truth.begin(), truth.begin() + cut), nc);
    const ConfusionCounts b = confusion_counts(LabelSets(pred.begin() + cut, pred.end()),
                                               LabelSets(truth.begin() + cut, truth.end()), nc);
    a.merge(b);
    EXPECT_EQ(a.tp, whole.tp);
    EXPECT_EQ(a.fp, whole.fp);
    EXPECT_EQ(a.fn, whole.fn);
    EXPECT_EQ(a.tn, whole.tn);
}

TEST(Aggregate, PooledFormulaExample) {
    // pooled tp=2, fp=1, fn=1 -> P=R=F1=2/3
    ConfusionCounts cc(2);
    cc.samples = 4;
    cc.tp = {1, 1};
    cc.fp = {1, 0};
    cc.fn = {0, 1};
    cc.tn = {2, 2};
    const AggregateScores s = aggregate(cc, Averaging::Micro, Task::Multilabel);
    EXPECT_DOUBLE_EQ(s.precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.recall, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.f1, 2.0 / 3.0);
}

TEST(Aggregate, AllCorrectGivesOnes) {
    LabelSets pred{{0}, {1}, {2}, {1}}, truth{{0}, {1}, {2}, {1}};
    const ConfusionCounts cc = confusion_counts(pred, truth, 3);
    for (Averaging mode : {Averaging::Micro, Averaging::Macro}) {
        const AggregateScores s = aggregate(cc, mode, Task::Multiclass);
        EXPECT_DOUBLE_EQ(s.precision, 1.0);
        EXPECT_DOUBLE_EQ(s.recall, 1.0);
        EXPECT_DOUBLE_EQ(s.f1, 1.0);
        EXPECT_DOUBLE_EQ(s.accuracy, 1.0);
    }
}

TEST(Aggregate, MacroVsMicroOnUnequalSupport) {
    // 10-sample multilabel toy set, 2 classes with unequal support:
    // class 0 always right (F1 = 1.0), class 1 with tp=fp=fn=1 (F1 = 0.5)
    // -> macro F1 = 0.75, micro F1 from pooled counts differs.
    LabelSets pred, truth;
    for (int i = 0; i < 7; ++i) {
        pred.push_back({0});
        truth.push_back({0});
    }
    pred.push_back({0, 1});
    truth.push_back({0});  // fp for class 1
    pred.push_back({1});
    truth.push_back({1});  // tp for class 1
    pred.push_back({});
    truth.push_back({1});  // fn for class 1
    const ConfusionCounts cc = confusion_counts(pred, truth, 2);
    const PRF c0 = class_scores(cc, 0);
    const PRF c1 = class_scores(cc, 1);
    EXPECT_DOUBLE_EQ(c0.f1, 1.0);
    EXPECT_DOUBLE_EQ(c1.f1, 0.5);
    const AggregateScores macro = aggregate(cc, Averaging::Macro, Task::Multilabel);
    const AggregateScores micro = aggregate(cc, Averaging::Micro, Task::Multilabel);
    EXPECT_DOUBLE_EQ(macro.f1, 0.75);
    EXPECT_NE(macro.f1, micro.f1);
    EXPECT_DOUBLE_EQ(micro.f1, 0.9);  // pooled tp=9, fp=1, fn=1

    const auto brute = oracle::brute_metrics(pred, truth, 2, true);
    EXPECT_DOUBLE_EQ(micro.f1, brute.micro.f1);
    EXPECT_DOUBLE_EQ(macro.f1, brute.macro.f1);
    EXPECT_DOUBLE_EQ(micro.accuracy, brute.accuracy);
}

TEST(Aggregate, ZeroOverZeroConvention) {
    // class 1 never predicted and never true -> precision/recall/F1 all 0
    const ConfusionCounts cc = confusion_counts({{0}, {0}}, {{0}, {0}}, 2);
    const PRF s = class_scores(cc, 1);
    EXPECT_EQ(s.precision, 0.0);
    EXPECT_EQ(s.recall, 0.0);
    EXPECT_EQ(s.f1, 0.0);
    const ClassExtremes e = per_class_extremes(cc);
    EXPECT_EQ(e.min.f1, 0.0);
    EXPECT_EQ(e.max.f1, 1.0);
}

TEST(PerClassExtremes, SingleClassAndPair) {
    const ConfusionCounts one = confusion_counts({{0}, {}}, {{0}, {0}}, 1);
    const ClassExtremes e1 = per_class_extremes(one);
    EXPECT_EQ(e1.max.f1, e1.min.f1);

    LabelSets pred{{0}, {1}, {1}}, truth{{0}, {1}, {0}};
    // class 0: tp=1 fn=1 -> P=1 R=.5 F1=2/3 ; class 1: tp=1 fp=1 -> P=.5 R=1 F1=2/3
    const ConfusionCounts cc = confusion_counts(pred, truth, 2);
    const ClassExtremes e = per_class_extremes(cc);
    EXPECT_DOUBLE_EQ(e.max.precision, 1.0);
    EXPECT_DOUBLE_EQ(e.min.precision, 0.5);
    EXPECT_DOUBLE_EQ(e.max.recall, 1.0);
    EXPECT_DOUBLE_EQ(e.min.recall, 0.5);
}

TEST(Metrics, AgreeExactlyWithBruteForceOracle) {
    Rng rng(4);
    for (int rep = 0; rep < 100; ++rep) {
        const bool multilabel = rep % 2 == 0;
        LabelSets pred, truth;
        std::size_t nc;
        random_instance(rng, 20, 6, multilabel, pred, truth, nc);
        const Task task = multilabel ? Task::Multilabel : Task::Multiclass;
        const ConfusionCounts cc = confusion_counts(pred, truth, nc);
        const auto brute = oracle::brute_metrics(pred, truth, nc, multilabel);

        const AggregateScores micro = aggregate(cc, Averaging::Micro, task);
        const AggregateScores macro = aggregate(cc, Averaging::Macro, task);
        EXPECT_DOUBLE_EQ(micro.precision, brute.micro.precision);
        EXPECT_DOUBLE_EQ(micro.recall, brute.micro.recall);
        EXPECT_DOUBLE_EQ(micro.f1, brute.micro.f1);
        EXPECT_NEAR(macro.precision, brute.macro.precision, 1e-12);
        EXPECT_NEAR(macro.recall, brute.macro.recall, 1e-12);
        EXPECT_NEAR(macro.f1, brute.macro.f1, 1e-12);
        EXPECT_DOUBLE_EQ(micro.accuracy, brute.accuracy);

        const ClassExtremes e = per_class_extremes(cc);
        double maxf = 0, minf = 1;
        for (const auto& s : brute.per_class) {
            maxf = std::max(maxf, s.f1);
            minf = std::min(minf, s.f1);
        }
        EXPECT_DOUBLE_EQ(e.max.f1, maxf);
        EXPECT_DOUBLE_EQ(e.min.f1, minf);

        // ordering invariant: min <= macro <= max for every metric
        EXPECT_LE(e.min.f1, macro.f1 + 1e-12);
        EXPECT_LE(macro.f1, e.max.f1 + 1e-12);
        EXPECT_LE(e.min.precision, macro.precision + 1e-12);
        EXPECT_LE(macro.precision, e.max.precision + 1e-12);
    }
}

TEST(Metrics, MulticlassMicroIdentity) {
    Rng rng(5);
    for (int rep = 0; rep < 30; ++rep) {
        LabelSets pred, truth;
        std::size_t nc;
        random_instance(rng, 25, 6, false, pred, truth, nc);
        const ConfusionCounts cc = confusion_counts(pred, truth, nc);
        // pooled fp == pooled fn for single-label predictions
        std::uint64_t fp = 0, fn = 0;
        for (std::size_t c = 0; c < nc; ++c) {
            fp += cc.fp[c];
            fn += cc.fn[c];
        }
        EXPECT_EQ(fp, fn);
        const AggregateScores micro = aggregate(cc, Averaging::Micro, Task::Multiclass);
        EXPECT_DOUBLE_EQ(micro.precision, micro.recall);
        EXPECT_DOUBLE_EQ(micro.precision, micro.f1);
        EXPECT_DOUBLE_EQ(micro.precision, micro.accuracy);
    }
}

TEST(MetricReport, SerializationsCarryHeadlineNumbers) {
    LabelSets pred{{0}, {1}, {1}}, truth{{0}, {1}, {0}};
    const MetricReport r = build_report(confusion_counts(pred, truth, 2), Task::Multiclass);
    EXPECT_TRUE(r.micro.f1 > 0 && r.micro.f1 < 1);
    const std::string kv = r.kv();
    EXPECT_NE(kv.find("micro_f1="), std::string::npos);
    EXPECT_NE(kv.find("macro_f1="), std::string::npos);
    EXPECT_NE(kv.find("max_f1="), std::string::npos);
    EXPECT_NE(kv.find("min_rec="), std::string::npos);
    EXPECT_NE(kv.find("class_1_recall="), std::string::npos);
    const std::string human = r.human();
    EXPECT_NE(human.find("MaxF1"), std::string::npos);
    EXPECT_NE(human.find("MinPrec"), std::string::npos);
    for (double v : {r.micro.f1, r.macro.f1, r.extremes.max.f1, r.extremes.min.f1}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}
