#include <gtest/gtest.h>

#include "test_support.hpp"
#include "vig/gradcheck.hpp"
#include "vig/model.hpp"

using namespace vig;

namespace {

ModelConfig micro_cfg() {
    ModelConfig cfg;
    cfg.in_channels = 3;
    cfg.input_h = cfg.input_w = 32;
    cfg.stage_dims = {8, 16, 32};
    cfg.stage_depths = {1, 1, 1};
    cfg.heads = 2;
    cfg.k = 2;
    cfg.num_classes = 4;
    cfg.task = Task::Multiclass;
    cfg.head_hidden = 16;
    return cfg;
}

/// Independent parameter-count oracle: sums expected tensor shapes layer by
/// layer from the configuration alone.
std::size_t shape_sum_oracle(const ModelConfig& c) {
    auto conv_bn = [](std::size_t in, std::size_t out) {
        return out * in * 9 + out /*bias*/ + 2 * out /*gamma,beta*/;
    };
    const std::size_t d0 = c.stage_dims[0], d1 = c.stage_dims[1], d2 = c.stage_dims[2];
    std::size_t total = 0;
    total += conv_bn(c.in_channels, d0 / 2) + conv_bn(d0 / 2, d0);          // stem
    total += (c.input_h / 4) * (c.input_w / 4) * d0;                        // positional encoding
    total += conv_bn(d0, d1) + conv_bn(d1, d2);                             // downsamples
    for (std::size_t s = 0; s < 3; ++s) {
        const std::size_t d = c.stage_dims[s];
        const std::size_t grapher = d * d                      // w_nb
                                    + c.heads * (2 * d / c.heads) * (d / c.heads)  // grouped
                                    + d * d + d;               // w_b + bias
        const std::size_t ffn = d * 4 * d + 4 * d * d + d;     // w1, w2, b2
        total += c.stage_depths[s] * (grapher + ffn);
    }
    total += d2 * c.head_hidden + c.head_hidden;                            // head fc1
    total += c.head_hidden * c.num_classes + c.num_classes;                 // head fc2
    return total;
}

}  // namespace

TEST(BuildModel, PositionalEncodingShapes) {
    ModelConfig big;  // defaults: 12ch, 120x120
    auto m = build_model<float>(big, 1);
    EXPECT_EQ(m.pos_enc.value.shape, (Shape{900, 128}));

    ModelConfig rgb;
    rgb.in_channels = 3;
    rgb.input_h = rgb.input_w = 256;
    rgb.num_classes = 45;
    rgb.task = Task::Multiclass;
    auto m2 = build_model<float>(rgb, 1);
    EXPECT_EQ(m2.pos_enc.value.shape, (Shape{4096, 128}));
}

TEST(BuildModel, SameSeedSameBits) {
    ModelConfig cfg = micro_cfg();
    auto a = build_model<float>(cfg, 42);
    auto b = build_model<float>(cfg, 42);
    auto pa = a.parameters();
    auto pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.data, pb[i]->value.data);

    auto c = build_model<float>(cfg, 43);
    bool any_diff = false;
    auto pc = c.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i]->value.data != pc[i]->value.data) any_diff = true;
    EXPECT_TRUE(any_diff);
}

TEST(BuildModel, ConfigValidationNamesConstraint) {
    ModelConfig cfg = micro_cfg();
    cfg.input_h = 30;  // not divisible by 4
    try {
        build_model<float>(cfg, 1);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
    }

    cfg = micro_cfg();
    cfg.heads = 3;
    EXPECT_THROW(build_model<float>(cfg, 1), ConfigError);

    cfg = micro_cfg();
    cfg.stage_dims = {8, 16};
    EXPECT_THROW(build_model<float>(cfg, 1), ConfigError);
}

TEST(Stem, ShapeTraces) {
    ModelConfig big;
    auto m = build_model<float>(big, 1);
    Tape<float> t;
    Tensor<float> x({2, 12, 120, 120}, 0.1f);
    Var<float> y = stem(t, m, t.value(x), Mode::Train);
    EXPECT_EQ(t.val(y).shape, (Shape{2, 128, 30, 30}));

    ModelConfig rgb;
    rgb.in_channels = 3;
    rgb.input_h = rgb.input_w = 256;
    auto m2 = build_model<float>(rgb, 1);
    Tape<float> t2;
    Var<float> y2 = stem(t2, m2, t2.value(Tensor<float>({1, 3, 256, 256})), Mode::Eval);
    EXPECT_EQ(t2.val(y2).shape, (Shape{1, 128, 64, 64}));
}

TEST(Stem, ZeroInputZeroOutput) {
    // zero input, zero bias, beta = 0: normalized zeros stay zero through relu
    ModelConfig cfg = micro_cfg();
    auto m = build_model<float>(cfg, 1);  // biases and betas start at zero
    Tape<float> t;
    Var<float> y = stem(t, m, t.value(Tensor<float>({2, 3, 32, 32})), Mode::Train);
    for (float v : t.val(y).data) EXPECT_EQ(v, 0.0f);
}

TEST(Stem, IndivisibleInputIsConfigError) {
    ModelConfig cfg = micro_cfg();
    auto m = build_model<float>(cfg, 1);
    Tape<float> t;
    EXPECT_THROW(stem(t, m, t.value(Tensor<float>({1, 3, 30, 32})), Mode::Eval), ConfigError);
}

TEST(Downsample, ShapeAndPatchRatio) {
    ModelConfig big;
    auto m = build_model<float>(big, 1);
    Tape<float> t;
    // 128x30x30 -> 256x15x15
    Var<float> y = downsample(t, m.downsamples[0], t.value(Tensor<float>({1, 128, 30, 30})),
                              Mode::Eval);
    EXPECT_EQ(t.val(y).shape, (Shape{1, 256, 15, 15}));
    EXPECT_EQ(30 * 30 / (15 * 15), 4);

    // 256x16x16 -> 512x8x8
    Var<float> z = downsample(t, m.downsamples[1], t.value(Tensor<float>({1, 256, 16, 16})),
                              Mode::Eval);
    EXPECT_EQ(t.val(z).shape, (Shape{1, 512, 8, 8}));

    // odd grid is replication-padded to even before the stride-2 conv
    Var<float> odd = downsample(t, m.downsamples[1], t.value(Tensor<float>({1, 256, 15, 15})),
                                Mode::Eval);
    EXPECT_EQ(t.val(odd).shape, (Shape{1, 512, 8, 8}));
}

TEST(PositionalEncoding, BroadcastAndGradientAccumulation) {
    Tape<float> t;
    Rng rng(3);
    auto tok = oracle::random_tensor<float>({6, 4}, rng);
    Parameter<float> pe("pe", oracle::random_tensor<float>({6, 4}, rng));
    Var<float> pv = t.param(pe);
    // pe = zeros -> identity
    Parameter<float> pe0("pe0", Tensor<float>({6, 4}));
    EXPECT_EQ(t.val(add_positional_encoding(t, t.value(tok), t.param(pe0))).data, tok.data);
    // patches = zeros -> output equals pe
    EXPECT_EQ(t.val(add_positional_encoding(t, t.value(Tensor<float>({6, 4})), pv)).data,
              pe.value.data);
    // gradient sums over the batch: add pe to B=2 token sets
    Var<float> a = add_positional_encoding(t, t.input(tok), pv);
    Var<float> b = add_positional_encoding(t, t.input(tok), pv);
    t.backward(sum(add(a, b)));
    for (float g : pe.grad.data) EXPECT_EQ(g, 2.0f);

    EXPECT_THROW(add_positional_encoding(t, t.value(Tensor<float>({5, 4})), pv), DimensionError);
}

TEST(Forward, LogitShapeAndProbabilityContracts) {
    ModelConfig cfg;
    cfg.in_channels = 3;
    cfg.input_h = cfg.input_w = 64;
    cfg.num_classes = 10;
    cfg.task = Task::Multiclass;
    cfg.stage_depths = {1, 1, 1};
    auto m = build_model<float>(cfg, 7);
    Tape<float> t;
    Rng rng(5);
    auto x = oracle::random_tensor<float>({2, 3, 64, 64}, rng);
    Var<float> logits = forward(t, m, x, Mode::Eval);
    EXPECT_EQ(t.val(logits).shape, (Shape{2, 10}));

    const Tensor<float>& probs = t.val(softmax(logits));
    for (std::size_t b = 0; b < 2; ++b) {
        float s = 0;
        for (std::size_t j = 0; j < 10; ++j) s += probs.at2(b, j);
        EXPECT_NEAR(s, 1.0f, 1e-6f);
    }
    const Tensor<float>& sg = t.val(sigmoid(logits));
    float row0 = 0;
    for (std::size_t j = 0; j < 10; ++j) {
        EXPECT_GE(sg.at2(0, j), 0.0f);
        EXPECT_LE(sg.at2(0, j), 1.0f);
        row0 += sg.at2(0, j);
    }
    // multilabel probabilities need not sum to 1
    EXPECT_GT(std::abs(row0 - 1.0f), 1e-3f);
}

TEST(Forward, ArchitectureShapeTrace) {
    ModelConfig cfg;
    cfg.in_channels = 3;
    cfg.input_h = cfg.input_w = 64;
    cfg.num_classes = 5;
    cfg.stage_depths = {1, 2, 1};
    cfg.task = Task::Multiclass;
    auto m = build_model<float>(cfg, 1);
    EXPECT_EQ(m.downsamples.size(), 2u);

    Tape<float> t;
    ForwardStats<float> stats;
    Rng rng(6);
    auto x = oracle::random_tensor<float>({2, 3, 64, 64}, rng);
    forward(t, m, x, Mode::Eval, nullptr, &stats);
    EXPECT_EQ(stats.stage_patches, (std::vector<std::size_t>{256, 64, 16}));
    EXPECT_EQ(stats.stage_k, (std::vector<std::size_t>{9, 9, 9}));
    EXPECT_EQ(stats.downsamples_applied, 2u);
    // one graph per stage per image
    EXPECT_EQ(stats.graphs_built_total, 3u * 2u);
}

TEST(Forward, PaddedPatchTraceFor120) {
    ModelConfig big;
    big.stage_depths = {1, 1, 1};  // cheap trace
    auto m = build_model<float>(big, 1);
    Tape<float> t;
    ForwardStats<float> stats;
    Tensor<float> x({2, 12, 120, 120}, 0.05f);
    forward(t, m, x, Mode::Eval, nullptr, &stats);
    // 900 -> 225 -> (padded 16x16) -> 64; every stage keeps at least k+1 patches
    EXPECT_EQ(stats.stage_patches, (std::vector<std::size_t>{900, 225, 64}));
    for (std::size_t n : stats.stage_patches) EXPECT_GE(n, big.k + 1);
}

TEST(Forward, EvalBatchOrderIndependence) {
    ModelConfig cfg = micro_cfg();
    auto m = build_model<float>(cfg, 11);
    // push running stats off their init values
    Rng rng(7);
    auto xb = oracle::random_tensor<float>({4, 3, 32, 32}, rng);
    {
        Tape<float> t;
        forward(t, m, xb, Mode::Train);
    }
    Tape<float> t1;
    const Tensor<float> batched = t1.val(forward(t1, m, xb, Mode::Eval));
    for (std::size_t b = 0; b < 4; ++b) {
        Tensor<float> one({1, 3, 32, 32});
        std::copy_n(xb.data.data() + b * 3 * 32 * 32, 3 * 32 * 32, one.data.data());
        Tape<float> t2;
        const Tensor<float> single = t2.val(forward(t2, m, one, Mode::Eval));
        for (std::size_t j = 0; j < cfg.num_classes; ++j)
            EXPECT_NEAR(single.at2(0, j), batched.at2(b, j), 1e-5f);
    }
}

TEST(Forward, ZeroedBlocksReduceToStemDownsampleHead) {
    ModelConfig cfg = micro_cfg();
    cfg.stage_depths = {2, 1, 2};
    auto m = build_model<float>(cfg, 3);
    // fresh models start with a zero positional encoding; zero every block
    for (auto& stage : m.stages)
        for (auto& [gp, fp] : stage) {
            gp.w_nb_in.value.fill(0);
            for (auto& w : gp.w_update) w.value.fill(0);
            gp.w_b_out.value.fill(0);
            gp.b_out.value.fill(0);
            fp.w1.value.fill(0);
            fp.w2.value.fill(0);
            fp.b2.value.fill(0);
        }
    Rng rng(8);
    auto x = oracle::random_tensor<float>({2, 3, 32, 32}, rng);

    Tape<float> t;
    const Tensor<float> got = t.val(forward(t, m, x, Mode::Eval));

    // reference: stem -> downsample -> downsample -> pool -> head, no blocks
    Tape<float> r;
    Var<float> cur = stem(r, m, r.value(x), Mode::Eval);
    cur = downsample(r, m.downsamples[0], cur, Mode::Eval);
    cur = downsample(r, m.downsamples[1], cur, Mode::Eval);
    Var<float> pooled = global_avg_pool(cur);
    Var<float> hidden = relu(linear(pooled, r.param(m.head_w1), r.param(m.head_b1)));
    const Tensor<float> want = r.val(linear(hidden, r.param(m.head_w2), r.param(m.head_b2)));
    EXPECT_EQ(got.data, want.data);
}

TEST(Forward, InputShapeMismatch) {
    ModelConfig cfg = micro_cfg();
    auto m = build_model<float>(cfg, 1);
    Tape<float> t;
    EXPECT_THROW(forward(t, m, Tensor<float>({1, 4, 32, 32}), Mode::Eval), DimensionError);
    EXPECT_THROW(forward(t, m, Tensor<float>({1, 3, 16, 32}), Mode::Eval), DimensionError);
}

TEST(CountParams, LinearLayerDefinition) {
    // single linear D_in -> D_out with bias
    Parameter<float> w("w", Tensor<float>({7, 9}));
    Parameter<float> b("b", Tensor<float>({9}));
    EXPECT_EQ(w.value.size() + b.value.size(), 7u * 9u + 9u);
}

TEST(CountParams, ReferenceTargetsWithinTolerance) {
    ModelConfig big;  // 12 ch, 120x120, defaults
    auto m1 = build_model<float>(big, 1);
    const double c1 = static_cast<double>(count_params(m1));
    EXPECT_EQ(count_params(m1), shape_sum_oracle(big));
    EXPECT_GE(c1, 6.98e6 * 0.8);
    EXPECT_LE(c1, 6.98e6 * 1.2);

    ModelConfig rgb;
    rgb.in_channels = 3;
    rgb.input_h = rgb.input_w = 256;
    rgb.num_classes = 45;
    rgb.task = Task::Multiclass;
    auto m2 = build_model<float>(rgb, 1);
    const double c2 = static_cast<double>(count_params(m2));
    EXPECT_EQ(count_params(m2), shape_sum_oracle(rgb));
    EXPECT_GE(c2, 8.60e6 * 0.8);
    EXPECT_LE(c2, 8.60e6 * 1.2);

    // the config difference is dominated by the positional encoding tensor
    const double diff = c2 - c1;
    const double pe_diff = static_cast<double>(m2.pos_enc.value.size()) -
                           static_cast<double>(m1.pos_enc.value.size());
    EXPECT_GT(pe_diff / diff, 0.5);
}

TEST(Forward, EndToEndGradCheckMicroConfig64) {
    // stage_dims [8,16,32], heads 2, k 2, 16x16 input, 64-bit, tol 1e-3.
    // Central differences over a sampled subset of every parameter tensor,
    // against the gradients the training path produces.
    ModelConfig cfg;
    cfg.in_channels = 2;
    cfg.input_h = cfg.input_w = 16;
    cfg.stage_dims = {8, 16, 32};
    cfg.stage_depths = {1, 1, 1};
    cfg.heads = 2;
    cfg.k = 2;
    cfg.num_classes = 3;
    cfg.task = Task::Multiclass;
    cfg.head_hidden = 8;
    auto model = build_model<double>(cfg, 21);
    Rng rng(22);
    auto x = oracle::random_tensor<double>({2, 2, 16, 16}, rng);
    const std::vector<std::size_t> targets{0, 2};

    auto loss_value = [&]() {
        Tape<double> tape;
        Var<double> logits = forward(tape, model, x, Mode::Train);
        return tape.val(softmax_cross_entropy(logits, targets)).data[0];
    };

    model.zero_grads();
    {
        Tape<double> tape;
        Var<double> logits = forward(tape, model, x, Mode::Train);
        tape.backward(softmax_cross_entropy(logits, targets));
    }

    const double h = 1e-5;
    double max_rel = 0;
    std::string worst;
    for (Parameter<double>* p : model.parameters()) {
        Rng pick(mix_seed(77, std::hash<std::string>{}(p->name)));
        const std::size_t samples = std::min<std::size_t>(10, p->value.size());
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t idx = pick.index(p->value.size());
            const double orig = p->value.data[idx];
            p->value.data[idx] = orig + h;
            const double fp = loss_value();
            p->value.data[idx] = orig - h;
            const double fm = loss_value();
            p->value.data[idx] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double analytic = p->grad.data[idx];
            const double rel = std::abs(analytic - numeric) /
                               std::max(1.0, std::max(std::abs(analytic), std::abs(numeric)));
            if (rel > max_rel) {
                max_rel = rel;
                worst = p->name;
            }
        }
    }
    EXPECT_LE(max_rel, 1e-3) << "worst tensor: " << worst;
}
