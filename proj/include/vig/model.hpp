#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vig/autograd.hpp"
#include "vig/grapher.hpp"
#include "vig/graph.hpp"
#include "vig/ops.hpp"

namespace vig {

// ---------------------------------------------------------------------------
// Three-stage pyramid encoder over dynamic patch graphs: stem, learnable
// positional encoding, (Grapher + FFN) blocks per stage with downsampling
// between stages 1->2 and 2->3, global pooling and an MLP head.
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::size_t in_channels = 12;
    std::size_t input_h = 120;
    std::size_t input_w = 120;
    std::vector<std::size_t> stage_dims = {128, 256, 512};
    // Middle-heavy block allocation; sized to land near the reference
    // parameter budgets for both the 12-channel and RGB configurations.
    std::vector<std::size_t> stage_depths = {1, 4, 1};
    std::size_t heads = 16;
    std::size_t k = 9;
    std::size_t num_classes = 43;
    Task task = Task::Multilabel;
    std::size_t head_hidden = 1024;
    double dropout = 0.0;

    void validate() const {
        if (stage_dims.size() != 3 || stage_depths.size() != 3)
            throw ConfigError("model config: stage_dims and stage_depths must have 3 entries");
        if (input_h % 4 != 0 || input_w % 4 != 0)
            throw ConfigError("model config: input " + std::to_string(input_h) + "x" +
                              std::to_string(input_w) + " not divisible by the stem factor 4");
        for (std::size_t d : stage_dims)
            if ((2 * d) % heads != 0 || d % heads != 0)
                throw ConfigError("model config: stage dim " + std::to_string(d) +
                                  " (and 2*dim) not divisible by heads=" + std::to_string(heads));
        if (in_channels == 0 || num_classes == 0 || k == 0 || heads == 0 || head_hidden == 0)
            throw ConfigError("model config: zero-valued field");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("model config: dropout must be in [0,1)");
        for (std::size_t d : stage_depths)
            if (d == 0) throw ConfigError("model config: stage depth must be >= 1");
    }

    std::size_t patches_h() const { return input_h / 4; }
    std::size_t patches_w() const { return input_w / 4; }
    std::size_t num_patches() const { return patches_h() * patches_w(); }
};

template <class Real>
struct ConvBnParams {
    Parameter<Real> w;      // [O,C,3,3]
    Parameter<Real> b;      // [O]
    Parameter<Real> gamma;  // [O]
    Parameter<Real> beta;   // [O]
    RunningStats<Real> stats;
};

template <class Real>
struct VigModel {
    ModelConfig cfg;
    ConvBnParams<Real> stem1, stem2;
    Parameter<Real> pos_enc;  // [num_patches, stage_dims[0]]
    std::vector<std::vector<std::pair<GrapherParams<Real>, FfnParams<Real>>>> stages;
    std::vector<ConvBnParams<Real>> downsamples;  // exactly 2
    Parameter<Real> head_w1, head_b1, head_w2, head_b2;

    /// Visits every trainable parameter in registration order.
    template <class Fn>
    void visit_params(Fn&& fn) {
        auto conv_bn = [&](ConvBnParams<Real>& c) {
            fn(c.w);
            fn(c.b);
            fn(c.gamma);
            fn(c.beta);
        };
        conv_bn(stem1);
        conv_bn(stem2);
        fn(pos_enc);
        for (std::size_t s = 0; s < stages.size(); ++s) {
            if (s > 0) conv_bn(downsamples[s - 1]);
            for (auto& [gp, fp] : stages[s]) {
                fn(gp.w_nb_in);
                for (Parameter<Real>& w : gp.w_update) fn(w);
                fn(gp.w_b_out);
                fn(gp.b_out);
                fn(fp.w1);
                fn(fp.w2);
                fn(fp.b2);
            }
        }
        fn(head_w1);
        fn(head_b1);
        fn(head_w2);
        fn(head_b2);
    }

    /// Visits every batch-norm running-stat pair (name, stats).
    template <class Fn>
    void visit_stats(Fn&& fn) {
        fn(std::string("stem1"), stem1.stats);
        fn(std::string("stem2"), stem2.stats);
        for (std::size_t i = 0; i < downsamples.size(); ++i)
            fn("down" + std::to_string(i + 1), downsamples[i].stats);
    }

    std::vector<Parameter<Real>*> parameters() {
        std::vector<Parameter<Real>*> out;
        visit_params([&](Parameter<Real>& p) { out.push_back(&p); });
        return out;
    }

    void zero_grads() {
        visit_params([](Parameter<Real>& p) { p.zero_grad(); });
    }
};

/// Total number of trainable scalars.
template <class Real>
std::size_t count_params(VigModel<Real>& model) {
    std::size_t total = 0;
    model.visit_params([&](Parameter<Real>& p) {
        if (p.trainable) total += p.value.size();
    });
    return total;
}

namespace detail {

template <class Real>
ConvBnParams<Real> make_conv_bn(const std::string& prefix, std::size_t in_c, std::size_t out_c,
                                Rng& rng) {
    ConvBnParams<Real> p;
    p.w = Parameter<Real>(prefix + ".w", kaiming_uniform<Real>({out_c, in_c, 3, 3}, in_c * 9, rng));
    p.b = Parameter<Real>(prefix + ".b", Tensor<Real>({out_c}));
    p.gamma = Parameter<Real>(prefix + ".gamma", Tensor<Real>({out_c}, Real(1)));
    p.beta = Parameter<Real>(prefix + ".beta", Tensor<Real>({out_c}));
    p.stats = RunningStats<Real>(out_c);
    return p;
}

}  // namespace detail

/// Builds a model with deterministic seed-driven initialization: weights are
/// Kaiming-uniform (fan-in), biases and the positional encoding start at
/// zero, norm scales at one. Same seed, same bits.
template <class Real>
VigModel<Real> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    VigModel<Real> m;
    m.cfg = cfg;
    const std::size_t d0 = cfg.stage_dims[0];
    m.stem1 = detail::make_conv_bn<Real>("stem1", cfg.in_channels, d0 / 2, rng);
    m.stem2 = detail::make_conv_bn<Real>("stem2", d0 / 2, d0, rng);
    m.pos_enc = Parameter<Real>("pos_enc", Tensor<Real>({cfg.num_patches(), d0}));
    m.stages.resize(3);
    for (std::size_t s = 0; s < 3; ++s) {
        if (s > 0)
            m.downsamples.push_back(detail::make_conv_bn<Real>(
                "down" + std::to_string(s), cfg.stage_dims[s - 1], cfg.stage_dims[s], rng));
        for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
            const std::string prefix =
                "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
            m.stages[s].emplace_back(
                make_grapher_params<Real>(prefix + ".grapher", cfg.stage_dims[s], cfg.heads, rng),
                make_ffn_params<Real>(prefix + ".ffn", cfg.stage_dims[s], rng));
        }
    }
    const std::size_t d2 = cfg.stage_dims[2];
    m.head_w1 = Parameter<Real>("head.w1", kaiming_uniform<Real>({d2, cfg.head_hidden}, d2, rng));
    m.head_b1 = Parameter<Real>("head.b1", Tensor<Real>({cfg.head_hidden}));
    m.head_w2 = Parameter<Real>("head.w2",
                                kaiming_uniform<Real>({cfg.head_hidden, cfg.num_classes},
                                                      cfg.head_hidden, rng));
    m.head_b2 = Parameter<Real>("head.b2", Tensor<Real>({cfg.num_classes}));
    return m;
}

/// Per-forward instrumentation: patch counts, effective k, downsample and
/// graph-build counters, optional wiring capture for one stage of image 0.
template <class Real>
struct ForwardStats {
    std::vector<std::size_t> stage_patches;
    std::vector<std::size_t> stage_k;
    std::size_t downsamples_applied = 0;
    std::size_t graphs_built_total = 0;
    std::size_t images = 0;

    int capture_stage = -1;  // 0-based; captures image 0 of that stage
    PatchGraph captured_graph;
    Tensor<Real> captured_dist;
    bool captured = false;
};

namespace detail {

template <class Real>
Var<Real> stem_conv(Tape<Real>& t, Var<Real> x, ConvBnParams<Real>& p, Mode mode) {
    Var<Real> y = conv2d(x, t.param(p.w), t.param(p.b), 2, 1);
    y = batch_norm(y, t.param(p.gamma), t.param(p.beta), Real(1e-5), mode, &p.stats);
    return relu(y);
}

}  // namespace detail

/// Stem: two stride-2 3x3 conv+norm+relu blocks, C -> D0/2 -> D0. Spatial
/// extents shrink by 4; one output pixel = one patch token.
template <class Real>
Var<Real> stem(Tape<Real>& t, VigModel<Real>& m, Var<Real> x, Mode mode) {
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 4 || xv.shape[1] != m.cfg.in_channels)
        throw DimensionError("stem: input " + shape_str(xv.shape) + " vs " +
                             std::to_string(m.cfg.in_channels) + " channels");
    if (xv.shape[2] % 4 != 0 || xv.shape[3] % 4 != 0)
        throw ConfigError("stem: input extents " + std::to_string(xv.shape[2]) + "x" +
                          std::to_string(xv.shape[3]) + " not divisible by 4");
    Var<Real> y = detail::stem_conv(t, x, m.stem1, mode);
    return detail::stem_conv(t, y, m.stem2, mode);
}

/// Downsample between stages: replication-pad odd grids to even, then a
/// stride-2 3x3 conv + norm. Patch count shrinks by 4 (on the padded grid).
template <class Real>
Var<Real> downsample(Tape<Real>& t, ConvBnParams<Real>& p, Var<Real> x, Mode mode) {
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 4) throw DimensionError("downsample expects [B,D,h,w]");
    const std::size_t h = xv.shape[2], w = xv.shape[3];
    Var<Real> y = x;
    if (h % 2 != 0 || w % 2 != 0) y = pad_replicate(y, h % 2, w % 2);
    y = conv2d(y, t.param(p.w), t.param(p.b), 2, 1);
    return batch_norm(y, t.param(p.gamma), t.param(p.beta), Real(1e-5), mode, &p.stats);
}

template <class Real>
Var<Real> add_positional_encoding(Tape<Real>& t, Var<Real> tokens, Var<Real> pe) {
    require_same_shape(t.val(tokens), t.val(pe), "positional encoding");
    return add(tokens, pe);
}

/// Full forward pass to logits[B, num_classes]. Per image and per stage one
/// KNN graph is wired from the first grapher block's projected features and
/// shared across the stage's blocks; three graphs per image per pass.
template <class Real>
Var<Real> forward(Tape<Real>& t, VigModel<Real>& m, const Tensor<Real>& x, Mode mode,
                  Rng* dropout_rng = nullptr, ForwardStats<Real>* stats = nullptr) {
    if (x.rank() != 4)
        throw DimensionError("forward expects [B,C,H,W], got " + shape_str(x.shape));
    if (x.shape[1] != m.cfg.in_channels || x.shape[2] != m.cfg.input_h ||
        x.shape[3] != m.cfg.input_w)
        throw DimensionError("forward: input " + shape_str(x.shape) + " vs configured [" +
                             std::to_string(m.cfg.in_channels) + "," +
                             std::to_string(m.cfg.input_h) + "," +
                             std::to_string(m.cfg.input_w) + "]");
    const std::size_t bsz = x.shape[0];
    if (stats) stats->images = bsz;

    Var<Real> cur = stem(t, m, t.value(x), mode);
    Var<Real> pe = t.param(m.pos_enc);

    for (std::size_t s = 0; s < 3; ++s) {
        if (s > 0) {
            cur = downsample(t, m.downsamples[s - 1], cur, mode);
            if (stats) ++stats->downsamples_applied;
        }
        const Shape& cs = t.val(cur).shape;
        const std::size_t h = cs[2], w = cs[3], n = h * w;
        const std::size_t k_eff = std::min(m.cfg.k, n - 1);
        if (stats) {
            stats->stage_patches.push_back(n);
            stats->stage_k.push_back(k_eff);
        }
        std::vector<Var<Real>> images;
        images.reserve(bsz);
        for (std::size_t b = 0; b < bsz; ++b) {
            Var<Real> tok = chw_to_tokens(select_image(cur, b));
            if (s == 0) tok = add_positional_encoding(t, tok, pe);
            GraphCache cache;
            cache.capture_distances =
                stats && stats->capture_stage == static_cast<int>(s) && b == 0;
            for (auto& [gp, fp] : m.stages[s]) {
                tok = grapher_block(tok, gp, m.cfg.k, &cache);
                tok = ffn_block(tok, fp);
            }
            if (stats) {
                stats->graphs_built_total += cache.builds;
                if (cache.capture_distances && cache.graph) {
                    stats->captured_graph = *cache.graph;
                    stats->captured_dist = detail::cache_dist_slot<Real>(cache);
                    stats->captured = true;
                }
            }
            images.push_back(tokens_to_chw(tok, h, w));
        }
        cur = stack_images(images);
    }

    Var<Real> pooled = global_avg_pool(cur);
    Var<Real> hidden = relu(linear(pooled, t.param(m.head_w1), t.param(m.head_b1)));
    hidden = dropout(hidden, static_cast<Real>(m.cfg.dropout), mode, dropout_rng);
    return linear(hidden, t.param(m.head_w2), t.param(m.head_b2));
}

}  // namespace vig
