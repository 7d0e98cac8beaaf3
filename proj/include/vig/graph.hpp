#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "vig/core.hpp"

namespace vig {

// ---------------------------------------------------------------------------
// Dynamic directed KNN graph over patch embeddings. Each node keeps exactly k
// out-neighbors; the wiring is recomputed from the embeddings of each input,
// not fixed by grid position.
// ---------------------------------------------------------------------------

struct PatchGraph {
    std::size_t num_nodes = 0;
    std::size_t k = 0;
    std::vector<std::uint32_t> neighbors;  // [num_nodes * k], row-major

    std::uint32_t neighbor(std::size_t node, std::size_t rank) const {
        return neighbors[node * k + rank];
    }
};

/// Squared Euclidean distances between all rows of X[N,D]. Symmetric with a
/// zero diagonal; computed by the direct sum-of-squared-differences formula so
/// results match a brute-force oracle bit for bit.
template <class Real>
Tensor<Real> pairwise_sq_dist(const Tensor<Real>& x) {
    if (x.rank() != 2) throw DimensionError("pairwise_sq_dist expects [N,D], got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], d = x.shape[1];
    Tensor<Real> out({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        const Real* xi = x.data.data() + i * d;
        for (std::size_t j = i + 1; j < n; ++j) {
            const Real* xj = x.data.data() + j * d;
            Real acc = 0;
            for (std::size_t c = 0; c < d; ++c) {
                const Real diff = xi[c] - xj[c];
                acc += diff * diff;
            }
            out.at2(i, j) = acc;
            out.at2(j, i) = acc;
        }
    }
    return out;
}

namespace detail {

template <class Real>
inline void select_knn_row(std::size_t i, const Tensor<Real>& dist, std::size_t k,
                           std::vector<std::pair<Real, std::uint32_t>>& scratch,
                           std::uint32_t* out_row, Real* dist_row) {
    const std::size_t n = dist.shape[0];
    scratch.clear();
    for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;  // self-loops excluded; own features enter via the concat
        scratch.emplace_back(dist.at2(i, j), static_cast<std::uint32_t>(j));
    }
    std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k),
                      scratch.end());  // pair ordering = (distance, index): ties to lower index
    for (std::size_t r = 0; r < k; ++r) {
        out_row[r] = scratch[r].second;
        if (dist_row) dist_row[r] = scratch[r].first;
    }
}

}  // namespace detail

/// Directed KNN graph over the rows of X[N,D]. Node i points at the k nodes
/// j != i with smallest squared distance; ties break to the lower index and
/// each neighbor list is sorted by (distance, index). When `edge_dist` is
/// given it receives the [N,k] squared distances alongside the neighbor table.
template <class Real>
PatchGraph knn_graph(const Tensor<Real>& x, std::size_t k, Tensor<Real>* edge_dist = nullptr) {
    if (x.rank() != 2) throw DimensionError("knn_graph expects [N,D], got " + shape_str(x.shape));
    const std::size_t n = x.shape[0];
    if (k < 1 || k >= n)
        throw ConfigError("knn_graph: k=" + std::to_string(k) + " not in [1, N-1] for N=" +
                          std::to_string(n));
    const Tensor<Real> dist = pairwise_sq_dist(x);

    PatchGraph g;
    g.num_nodes = n;
    g.k = k;
    g.neighbors.resize(n * k);
    if (edge_dist) *edge_dist = Tensor<Real>({n, k});
    std::vector<std::pair<Real, std::uint32_t>> scratch;
    scratch.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i)
        detail::select_knn_row(i, dist, k, scratch, g.neighbors.data() + i * k,
                               edge_dist ? edge_dist->data.data() + i * k : nullptr);
    return g;
}

}  // namespace vig
