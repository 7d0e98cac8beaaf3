#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vig/autograd.hpp"
#include "vig/graph.hpp"
#include "vig/ops.hpp"

namespace vig {

// ---------------------------------------------------------------------------
// Grapher layer: no-bias projection, dynamic KNN wiring, max-relative
// aggregation, grouped update, ReLU, biased projection, plus the companion
// feed-forward block. Both carry residual connections so a zeroed block is an
// exact identity.
// ---------------------------------------------------------------------------

template <class Real>
struct GrapherParams {
    Parameter<Real> w_nb_in;                  // [D,D], no bias
    std::vector<Parameter<Real>> w_update;    // heads groups, each [2D/h, D/h]
    Parameter<Real> w_b_out;                  // [D,D]
    Parameter<Real> b_out;                    // [D]

    std::size_t dim() const { return w_nb_in.value.shape[0]; }
    std::size_t heads() const { return w_update.size(); }
};

template <class Real>
struct FfnParams {
    Parameter<Real> w1;  // [D,4D], no bias
    Parameter<Real> w2;  // [4D,D]
    Parameter<Real> b2;  // [D]

    std::size_t dim() const { return w1.value.shape[0]; }
};

/// Caches one PatchGraph per encoder stage so that consecutive grapher blocks
/// of the stage share the wiring built by the first one.
struct GraphCache {
    std::optional<PatchGraph> graph;
    Tensor<float> edge_dist_f32;    // populated only when capture is requested
    Tensor<double> edge_dist_f64;
    bool capture_distances = false;
    std::size_t builds = 0;

    void reset() {
        graph.reset();
        builds = 0;
    }
};

namespace detail {

template <class Real>
inline Tensor<Real>& cache_dist_slot(GraphCache& cache);

template <>
inline Tensor<float>& cache_dist_slot<float>(GraphCache& cache) {
    return cache.edge_dist_f32;
}

template <>
inline Tensor<double>& cache_dist_slot<double>(GraphCache& cache) {
    return cache.edge_dist_f64;
}

}  // namespace detail

/// One Grapher block on patch tokens x[N,D], in functional form:
///   y = x * w_nb;  g = knn(y, k);  a = concat(y, max_rel(y, g));
///   out = x + (relu(grouped(a)) * w_b + b).
/// When `cache` is given the stage graph is built once (k clamped to N-1,
/// zero neighbors for a single patch) and reused by later blocks; without a
/// cache the block wires its own graph and k must satisfy 1 <= k < N.
template <class Real>
Var<Real> grapher_block_fn(Var<Real> x, Var<Real> w_nb, const std::vector<Var<Real>>& group_w,
                           Var<Real> w_b, Var<Real> b_b, std::size_t k,
                           GraphCache* cache = nullptr) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 2) throw DimensionError("grapher_block expects [N,D] tokens");
    const std::size_t n = xv.shape[0];

    Var<Real> y = matmul(x, w_nb);
    const PatchGraph* graph = nullptr;
    PatchGraph local;
    if (cache && cache->graph) {
        graph = &*cache->graph;
    } else {
        const std::size_t k_eff = cache ? std::min(k, n - 1) : k;
        if (k_eff == 0) {
            local.num_nodes = n;
            local.k = 0;
        } else {
            local = knn_graph(t.val(y), k_eff,
                              cache && cache->capture_distances
                                  ? &detail::cache_dist_slot<Real>(*cache)
                                  : nullptr);
        }
        if (cache) {
            cache->graph = local;
            ++cache->builds;
            graph = &*cache->graph;
        } else {
            graph = &local;
        }
    }

    Var<Real> a = max_relative_aggregate(y, *graph);
    Var<Real> h = grouped_linear(a, group_w);
    Var<Real> out = linear(relu(h), w_b, b_b);
    return add(x, out);
}

template <class Real>
Var<Real> grapher_block(Var<Real> x, GrapherParams<Real>& p, std::size_t k,
                        GraphCache* cache = nullptr) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() == 2 && xv.shape[1] != p.dim())
        throw DimensionError("grapher_block: token width " + std::to_string(xv.shape[1]) +
                             " vs params dim " + std::to_string(p.dim()));
    std::vector<Var<Real>> group_w;
    group_w.reserve(p.w_update.size());
    for (Parameter<Real>& w : p.w_update) group_w.push_back(t.param(w));
    return grapher_block_fn(x, t.param(p.w_nb_in), group_w, t.param(p.w_b_out),
                            t.param(p.b_out), k, cache);
}

/// Feed-forward block: x + (relu(x * w1) * w2 + b2), hidden width 4D.
template <class Real>
Var<Real> ffn_block_fn(Var<Real> x, Var<Real> w1, Var<Real> w2, Var<Real> b2) {
    Tape<Real>& t = *x.tape;
    if (t.val(x).rank() != 2) throw DimensionError("ffn_block expects [N,D] tokens");
    Var<Real> h = relu(matmul(x, w1));
    return add(x, linear(h, w2, b2));
}

template <class Real>
Var<Real> ffn_block(Var<Real> x, FfnParams<Real>& p) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() == 2 && xv.shape[1] != p.dim())
        throw DimensionError("ffn_block: token width " + std::to_string(xv.shape[1]) +
                             " vs params dim " + std::to_string(p.dim()));
    return ffn_block_fn(x, t.param(p.w1), t.param(p.w2), t.param(p.b2));
}

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<Real> w(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (Real& v : w.data) v = static_cast<Real>(rng.uniform(-bound, bound));
    return w;
}

template <class Real>
GrapherParams<Real> make_grapher_params(const std::string& prefix, std::size_t d,
                                        std::size_t heads, Rng& rng) {
    if ((2 * d) % heads != 0 || d % heads != 0)
        throw ConfigError("grapher params: dim " + std::to_string(d) + " (and 2*dim) must be "
                          "divisible by " + std::to_string(heads) + " heads");
    GrapherParams<Real> p;
    p.w_nb_in = Parameter<Real>(prefix + ".w_nb", kaiming_uniform<Real>({d, d}, d, rng));
    const std::size_t gin = 2 * d / heads, gout = d / heads;
    for (std::size_t g = 0; g < heads; ++g)
        p.w_update.emplace_back(prefix + ".w_update" + std::to_string(g),
                                kaiming_uniform<Real>({gin, gout}, gin, rng));
    p.w_b_out = Parameter<Real>(prefix + ".w_b", kaiming_uniform<Real>({d, d}, d, rng));
    p.b_out = Parameter<Real>(prefix + ".b_b", Tensor<Real>({d}));
    return p;
}

template <class Real>
FfnParams<Real> make_ffn_params(const std::string& prefix, std::size_t d, Rng& rng) {
    FfnParams<Real> p;
    p.w1 = Parameter<Real>(prefix + ".w1", kaiming_uniform<Real>({d, 4 * d}, d, rng));
    p.w2 = Parameter<Real>(prefix + ".w2", kaiming_uniform<Real>({4 * d, d}, 4 * d, rng));
    p.b2 = Parameter<Real>(prefix + ".b2", Tensor<Real>({d}));
    return p;
}

}  // namespace vig
