#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vig/autograd.hpp"
#include "vig/core.hpp"
#include "vig/graph.hpp"

namespace vig {

namespace detail {

/// C[M,N] += A[M,K] * B[K,N], all row-major. The k loop is outermost of the
/// inner pair so each C entry accumulates strictly in ascending-k order;
/// results are therefore bit-identical to a per-entry scalar accumulation.
template <class Real>
inline void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b,
                     Real* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// C[M,K] += A[M,N] * B[K,N]^T  (i.e. C = A * transpose(B)).
template <class Real>
inline void gemm_bt_acc(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b,
                        Real* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * n;
        for (std::size_t j = 0; j < k; ++j) {
            const Real* brow = b + j * n;
            Real acc = 0;
            for (std::size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
            c[i * k + j] += acc;
        }
    }
}

/// C[K,N] += A[M,K]^T * B[M,N].
template <class Real>
inline void gemm_at_acc(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b,
                        Real* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        const Real* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            Real* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
    require_same_tape(a, b, "add");
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& av = t.val(a);
    const Tensor<Real>& bv = t.val(b);
    require_same_shape(av, bv, "add");
    Tensor<Real> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
    const int aid = a.id, bid = b.id;
    return t.make_node("add", {aid, bid}, std::move(out), [aid, bid](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        if (tp.requires_grad(aid)) {
            Tensor<Real>& ga = tp.grad(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        }
        if (tp.requires_grad(bid)) {
            Tensor<Real>& gb = tp.grad(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
        }
    });
}

/// x[R,C] + row[C], broadcast over rows. Also covers bias addition for any
/// tensor whose trailing axis equals row's length.
template <class Real>
Var<Real> add_rows(Var<Real> x, Var<Real> row) {
    require_same_tape(x, row, "add_rows");
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    const Tensor<Real>& rv = t.val(row);
    if (rv.rank() != 1 || xv.rank() < 1 || xv.shape.back() != rv.shape[0])
        throw DimensionError("add_rows: shape " + shape_str(xv.shape) + " vs row " +
                             shape_str(rv.shape));
    const std::size_t c = rv.shape[0];
    Tensor<Real> out = xv;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += rv.data[i % c];
    const int xid = x.id, rid = row.id;
    return t.make_node("add_rows", {xid, rid}, std::move(out),
                       [xid, rid, c](Tape<Real>& tp, int self) {
                           const Tensor<Real>& g = tp.grad(self);
                           if (tp.requires_grad(xid)) {
                               Tensor<Real>& gx = tp.grad(xid);
                               for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
                           }
                           if (tp.requires_grad(rid)) {
                               Tensor<Real>& gr = tp.grad(rid);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   gr.data[i % c] += g.data[i];
                           }
                       });
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
    require_same_tape(a, b, "mul");
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& av = t.val(a);
    const Tensor<Real>& bv = t.val(b);
    require_same_shape(av, bv, "mul");
    Tensor<Real> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
    const int aid = a.id, bid = b.id;
    return t.make_node("mul", {aid, bid}, std::move(out), [aid, bid](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& av2 = tp.val(aid);
        const Tensor<Real>& bv2 = tp.val(bid);
        if (tp.requires_grad(aid)) {
            Tensor<Real>& ga = tp.grad(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
        }
        if (tp.requires_grad(bid)) {
            Tensor<Real>& gb = tp.grad(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av2.data[i];
        }
    });
}

template <class Real>
Var<Real> scale(Var<Real> x, Real s) {
    Tape<Real>& t = *x.tape;
    Tensor<Real> out = t.val(x);
    for (Real& v : out.data) v *= s;
    const int xid = x.id;
    return t.make_node("scale", {xid}, std::move(out), [xid, s](Tape<Real>& tp, int self) {
        if (!tp.requires_grad(xid)) return;
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real>& gx = tp.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * s;
    });
}

template <class Real>
Var<Real> sum(Var<Real> x) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    Real acc = 0;
    for (Real v : xv.data) acc += v;
    Tensor<Real> out({1});
    out.data[0] = acc;
    const int xid = x.id;
    return t.make_node("sum", {xid}, std::move(out), [xid](Tape<Real>& tp, int self) {
        if (!tp.requires_grad(xid)) return;
        const Real g = tp.grad(self).data[0];
        Tensor<Real>& gx = tp.grad(xid);
        for (Real& v : gx.data) v += g;
    });
}

template <class Real>
Var<Real> mean(Var<Real> x) {
    Tape<Real>& t = *x.tape;
    const std::size_t n = t.val(x).size();
    return scale(sum(x), Real(1) / static_cast<Real>(n));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
    require_same_tape(a, b, "matmul");
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& av = t.val(a);
    const Tensor<Real>& bv = t.val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape) + " x " +
                             shape_str(bv.shape));
    const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor<Real> out({m, n});
    detail::gemm_acc(m, k, n, av.data.data(), bv.data.data(), out.data.data());
    const int aid = a.id, bid = b.id;
    return t.make_node("matmul", {aid, bid}, std::move(out),
                       [aid, bid, m, k, n](Tape<Real>& tp, int self) {
                           const Tensor<Real>& g = tp.grad(self);
                           if (tp.requires_grad(aid)) {
                               // dA = dC * B^T
                               detail::gemm_bt_acc(m, n, k, g.data.data(),
                                                   tp.val(bid).data.data(),
                                                   tp.grad(aid).data.data());
                           }
                           if (tp.requires_grad(bid)) {
                               // dB = A^T * dC
                               detail::gemm_at_acc(m, k, n, tp.val(aid).data.data(),
                                                   g.data.data(), tp.grad(bid).data.data());
                           }
                       });
}

/// x[N,In] * w[In,Out] (+ bias[Out]).
template <class Real>
Var<Real> linear(Var<Real> x, Var<Real> w) {
    return matmul(x, w);
}

template <class Real>
Var<Real> linear(Var<Real> x, Var<Real> w, Var<Real> bias) {
    return add_rows(matmul(x, w), bias);
}

/// Grouped linear map: x[N,In] is split into G contiguous column groups, each
/// multiplied by its own weight [In/G, Out/G]; group outputs are concatenated.
template <class Real>
Var<Real> grouped_linear(Var<Real> x, const std::vector<Var<Real>>& group_weights) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    const std::size_t groups = group_weights.size();
    if (groups == 0) throw ConfigError("grouped_linear: no group weights");
    if (xv.rank() != 2) throw DimensionError("grouped_linear expects [N,In]");
    const std::size_t n = xv.shape[0], in = xv.shape[1];
    if (in % groups != 0)
        throw DimensionError("grouped_linear: input width " + std::to_string(in) +
                             " not divisible by " + std::to_string(groups) + " groups");
    const std::size_t gin = in / groups;
    const Tensor<Real>& w0 = t.val(group_weights[0]);
    if (w0.rank() != 2 || w0.shape[0] != gin)
        throw DimensionError("grouped_linear: weight shape " + shape_str(w0.shape) +
                             " vs group input " + std::to_string(gin));
    const std::size_t gout = w0.shape[1];
    std::vector<int> ids{x.id};
    for (const Var<Real>& w : group_weights) {
        require_same_tape(x, w, "grouped_linear");
        require_same_shape(t.val(w), w0, "grouped_linear weights");
        ids.push_back(w.id);
    }
    const std::size_t out_w = gout * groups;
    Tensor<Real> out({n, out_w});
    for (std::size_t g = 0; g < groups; ++g) {
        const Real* wd = t.val(group_weights[g]).data.data();
        for (std::size_t i = 0; i < n; ++i) {
            const Real* xrow = xv.data.data() + i * in + g * gin;
            Real* orow = out.data.data() + i * out_w + g * gout;
            for (std::size_t p = 0; p < gin; ++p) {
                const Real xvv = xrow[p];
                if (xvv == Real(0)) continue;
                const Real* wrow = wd + p * gout;
                for (std::size_t j = 0; j < gout; ++j) orow[j] += xvv * wrow[j];
            }
        }
    }
    return t.make_node(
        "grouped_linear", std::move(ids), std::move(out),
        [groups, n, in, gin, gout](Tape<Real>& tp, int self) {
            const Tensor<Real>& g = tp.grad(self);
            const std::vector<int>& ins = tp.op_inputs(self);
            const int xid = ins[0];
            const std::size_t out_w2 = gout * groups;
            for (std::size_t grp = 0; grp < groups; ++grp) {
                const int wid = ins[1 + grp];
                const Tensor<Real>& xv2 = tp.val(xid);
                if (tp.requires_grad(xid)) {
                    Tensor<Real>& gx = tp.grad(xid);
                    const Tensor<Real>& wv = tp.val(wid);
                    for (std::size_t i = 0; i < n; ++i) {
                        const Real* grow = g.data.data() + i * out_w2 + grp * gout;
                        Real* gxrow = gx.data.data() + i * in + grp * gin;
                        for (std::size_t p = 0; p < gin; ++p) {
                            const Real* wrow = wv.data.data() + p * gout;
                            Real acc = 0;
                            for (std::size_t j = 0; j < gout; ++j) acc += grow[j] * wrow[j];
                            gxrow[p] += acc;
                        }
                    }
                }
                if (tp.requires_grad(wid)) {
                    Tensor<Real>& gw = tp.grad(wid);
                    for (std::size_t i = 0; i < n; ++i) {
                        const Real* xrow = xv2.data.data() + i * in + grp * gin;
                        const Real* grow = g.data.data() + i * out_w2 + grp * gout;
                        for (std::size_t p = 0; p < gin; ++p) {
                            const Real xvv = xrow[p];
                            if (xvv == Real(0)) continue;
                            Real* gwrow = gw.data.data() + p * gout;
                            for (std::size_t j = 0; j < gout; ++j) gwrow[j] += xvv * grow[j];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { Relu, Sigmoid, Softmax };

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::Relu;
    if (s == "sigmoid") return Activation::Sigmoid;
    if (s == "softmax") return Activation::Softmax;
    throw ConfigError("unknown activation kind '" + s + "'");
}

template <class Real>
Var<Real> relu(Var<Real> x) {
    Tape<Real>& t = *x.tape;
    Tensor<Real> out = t.val(x);
    for (Real& v : out.data) v = v > Real(0) ? v : Real(0);
    const int xid = x.id;
    return t.make_node("relu", {xid}, std::move(out), [xid](Tape<Real>& tp, int self) {
        if (!tp.requires_grad(xid)) return;
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& xv = tp.val(xid);
        Tensor<Real>& gx = tp.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv.data[i] > Real(0)) gx.data[i] += g.data[i];
    });
}

template <class Real>
inline Real sigmoid_value(Real v) {
    if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
    const Real e = std::exp(v);
    return e / (Real(1) + e);
}

template <class Real>
Var<Real> sigmoid(Var<Real> x) {
    Tape<Real>& t = *x.tape;
    Tensor<Real> out = t.val(x);
    for (Real& v : out.data) v = sigmoid_value(v);
    const int xid = x.id;
    return t.make_node("sigmoid", {xid}, std::move(out), [xid](Tape<Real>& tp, int self) {
        if (!tp.requires_grad(xid)) return;
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& y = tp.val(self);
        Tensor<Real>& gx = tp.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx.data[i] += g.data[i] * y.data[i] * (Real(1) - y.data[i]);
    });
}

/// Softmax over the last axis, max-shifted for stability.
template <class Real>
Var<Real> softmax(Var<Real> x) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() < 1) throw DimensionError("softmax expects rank >= 1");
    const std::size_t c = xv.shape.back();
    const std::size_t rows = xv.size() / c;
    Tensor<Real> out = xv;
    for (std::size_t r = 0; r < rows; ++r) {
        Real* row = out.data.data() + r * c;
        Real mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        Real denom = 0;
        for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            denom += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= denom;
    }
    const int xid = x.id;
    return t.make_node("softmax", {xid}, std::move(out), [xid, rows, c](Tape<Real>& tp, int self) {
        if (!tp.requires_grad(xid)) return;
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& y = tp.val(self);
        Tensor<Real>& gx = tp.grad(xid);
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* yrow = y.data.data() + r * c;
            const Real* grow = g.data.data() + r * c;
            Real dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += grow[j] * yrow[j];
            Real* gxrow = gx.data.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) gxrow[j] += (grow[j] - dot) * yrow[j];
        }
    });
}

template <class Real>
Var<Real> activation(Var<Real> x, Activation kind) {
    switch (kind) {
        case Activation::Relu: return relu(x);
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::Softmax: return softmax(x);
    }
    throw ConfigError("unknown activation kind");
}

// ---------------------------------------------------------------------------
// Convolution (im2col + matmul fast path)
// ---------------------------------------------------------------------------

struct Conv2dDims {
    std::size_t batch, in_c, in_h, in_w;
    std::size_t out_c, kh, kw;
    std::size_t stride, pad;
    std::size_t out_h, out_w;
};

inline Conv2dDims conv2d_dims(const Shape& x, const Shape& w, std::size_t stride,
                              std::size_t pad) {
    if (x.size() != 4 || w.size() != 4)
        throw DimensionError("conv2d expects x[B,C,H,W], w[O,C,kh,kw], got " + shape_str(x) +
                             ", " + shape_str(w));
    if (x[1] != w[1])
        throw DimensionError("conv2d: input channels " + std::to_string(x[1]) +
                             " vs kernel channels " + std::to_string(w[1]));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    Conv2dDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
    const std::size_t ph = d.in_h + 2 * pad, pw = d.in_w + 2 * pad;
    if (d.kh > ph || d.kw > pw)
        throw DimensionError("conv2d: kernel " + shape_str({d.kh, d.kw}) +
                             " larger than padded input " + shape_str({ph, pw}));
    d.out_h = (ph - d.kh) / stride + 1;
    d.out_w = (pw - d.kw) / stride + 1;
    return d;
}

namespace detail {

/// Gathers conv patches into rows: cols[(b,oy,ox), (c,ky,kx)], zero padding.
template <class Real>
std::vector<Real> im2col(const Tensor<Real>& x, const Conv2dDims& d) {
    const std::size_t cols_w = d.in_c * d.kh * d.kw;
    std::vector<Real> cols(d.batch * d.out_h * d.out_w * cols_w, Real(0));
    std::size_t r = 0;
    for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t oy = 0; oy < d.out_h; ++oy)
            for (std::size_t ox = 0; ox < d.out_w; ++ox, ++r) {
                Real* row = cols.data() + r * cols_w;
                for (std::size_t c = 0; c < d.in_c; ++c)
                    for (std::size_t ky = 0; ky < d.kh; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                            static_cast<std::ptrdiff_t>(d.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                        for (std::size_t kx = 0; kx < d.kw; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                static_cast<std::ptrdiff_t>(d.pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                            row[(c * d.kh + ky) * d.kw + kx] =
                                x.at4(b, c, static_cast<std::size_t>(iy),
                                      static_cast<std::size_t>(ix));
                        }
                    }
            }
    return cols;
}

}  // namespace detail

template <class Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, Var<Real> bias, std::size_t stride, std::size_t pad) {
    return conv2d(x, w, std::optional<Var<Real>>(bias), stride, pad);
}

template <class Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, std::size_t stride, std::size_t pad) {
    return conv2d(x, w, std::optional<Var<Real>>(), stride, pad);
}

template <class Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, std::optional<Var<Real>> bias, std::size_t stride,
                 std::size_t pad) {
    require_same_tape(x, w, "conv2d");
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    const Tensor<Real>& wv = t.val(w);
    const Conv2dDims d = conv2d_dims(xv.shape, wv.shape, stride, pad);
    if (bias) {
        const Tensor<Real>& bv = t.val(*bias);
        if (bv.rank() != 1 || bv.shape[0] != d.out_c)
            throw DimensionError("conv2d: bias shape " + shape_str(bv.shape) + " vs out channels " +
                                 std::to_string(d.out_c));
    }
    const std::size_t cols_w = d.in_c * d.kh * d.kw;
    auto cols = std::make_shared<std::vector<Real>>(detail::im2col(xv, d));

    // out(b,o,oy,ox) = dot(cols row, kernel row o) + bias[o]; the dot
    // accumulates in ascending (c,ky,kx) order, matching a direct convolution
    // loop bit for bit.
    Tensor<Real> out({d.batch, d.out_c, d.out_h, d.out_w});
    const Real* bd = bias ? t.val(*bias).data.data() : nullptr;
    std::size_t r = 0;
    for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t oy = 0; oy < d.out_h; ++oy)
            for (std::size_t ox = 0; ox < d.out_w; ++ox, ++r) {
                const Real* row = cols->data() + r * cols_w;
                for (std::size_t o = 0; o < d.out_c; ++o) {
                    const Real* krow = wv.data.data() + o * cols_w;
                    Real acc = 0;
                    for (std::size_t p = 0; p < cols_w; ++p) acc += row[p] * krow[p];
                    out.at4(b, o, oy, ox) = bd ? acc + bd[o] : acc;
                }
            }

    std::vector<int> ids{x.id, w.id};
    if (bias) ids.push_back(bias->id);
    const bool has_bias = bias.has_value();
    return t.make_node(
        "conv2d", std::move(ids), std::move(out),
        [d, cols, cols_w, has_bias](Tape<Real>& tp, int self) {
            const Tensor<Real>& g = tp.grad(self);
            const std::vector<int>& ins = tp.op_inputs(self);
            const int xid = ins[0], wid = ins[1];
            const std::size_t rows = d.batch * d.out_h * d.out_w;
            if (has_bias && tp.requires_grad(ins[2])) {
                Tensor<Real>& gb = tp.grad(ins[2]);
                for (std::size_t b = 0; b < d.batch; ++b)
                    for (std::size_t o = 0; o < d.out_c; ++o) {
                        Real acc = 0;
                        const Real* gplane =
                            g.data.data() + (b * d.out_c + o) * d.out_h * d.out_w;
                        for (std::size_t i = 0; i < d.out_h * d.out_w; ++i) acc += gplane[i];
                        gb.data[o] += acc;
                    }
            }
            if (tp.requires_grad(wid)) {
                Tensor<Real>& gw = tp.grad(wid);
                std::size_t r2 = 0;
                for (std::size_t b = 0; b < d.batch; ++b)
                    for (std::size_t oy = 0; oy < d.out_h; ++oy)
                        for (std::size_t ox = 0; ox < d.out_w; ++ox, ++r2) {
                            const Real* row = cols->data() + r2 * cols_w;
                            for (std::size_t o = 0; o < d.out_c; ++o) {
                                const Real gv = g.at4(b, o, oy, ox);
                                if (gv == Real(0)) continue;
                                Real* gwrow = gw.data.data() + o * cols_w;
                                for (std::size_t p = 0; p < cols_w; ++p)
                                    gwrow[p] += gv * row[p];
                            }
                        }
            }
            if (tp.requires_grad(xid)) {
                Tensor<Real>& gx = tp.grad(xid);
                const Tensor<Real>& wv2 = tp.val(wid);
                std::size_t r2 = 0;
                std::vector<Real> gcol(cols_w);
                for (std::size_t b = 0; b < d.batch; ++b)
                    for (std::size_t oy = 0; oy < d.out_h; ++oy)
                        for (std::size_t ox = 0; ox < d.out_w; ++ox, ++r2) {
                            std::fill(gcol.begin(), gcol.end(), Real(0));
                            for (std::size_t o = 0; o < d.out_c; ++o) {
                                const Real gv = g.at4(b, o, oy, ox);
                                if (gv == Real(0)) continue;
                                const Real* krow = wv2.data.data() + o * cols_w;
                                for (std::size_t p = 0; p < cols_w; ++p)
                                    gcol[p] += gv * krow[p];
                            }
                            // col2im scatter, skipping padding cells
                            for (std::size_t c = 0; c < d.in_c; ++c)
                                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                                    const std::ptrdiff_t iy =
                                        static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                        static_cast<std::ptrdiff_t>(d.pad);
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h))
                                        continue;
                                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                        const std::ptrdiff_t ix =
                                            static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                            static_cast<std::ptrdiff_t>(d.pad);
                                        if (ix < 0 ||
                                            ix >= static_cast<std::ptrdiff_t>(d.in_w))
                                            continue;
                                        gx.at4(b, c, static_cast<std::size_t>(iy),
                                               static_cast<std::size_t>(ix)) +=
                                            gcol[(c * d.kh + ky) * d.kw + kx];
                                    }
                                }
                        }
            }
        });
}

// ---------------------------------------------------------------------------
// Resizing and padding
// ---------------------------------------------------------------------------

/// Align-corners bilinear interpolation on x[B,C,H,W]. Exact identity when the
/// output size matches the input.
template <class Real>
Var<Real> bilinear_resize(Var<Real> x, std::size_t out_h, std::size_t out_w) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 4) throw DimensionError("bilinear_resize expects [B,C,H,W]");
    if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: output extents must be >= 1");
    const std::size_t bsz = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];

    struct Corner {
        std::size_t lo, hi;
        Real frac;
    };
    auto axis_map = [](std::size_t out_n, std::size_t in_n) {
        std::vector<Corner> m(out_n);
        const Real scale =
            out_n > 1 ? static_cast<Real>(in_n - 1) / static_cast<Real>(out_n - 1) : Real(0);
        for (std::size_t o = 0; o < out_n; ++o) {
            const Real src = scale * static_cast<Real>(o);
            std::size_t lo = static_cast<std::size_t>(src);
            if (lo >= in_n - 1) lo = in_n - 1;
            const std::size_t hi = std::min(lo + 1, in_n - 1);
            m[o] = Corner{lo, hi, src - static_cast<Real>(lo)};
        }
        return m;
    };
    auto ymap = std::make_shared<std::vector<Corner>>(axis_map(out_h, h));
    auto xmap = std::make_shared<std::vector<Corner>>(axis_map(out_w, w));

    Tensor<Real> out({bsz, c, out_h, out_w});
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oy = 0; oy < out_h; ++oy) {
                const Corner& my = (*ymap)[oy];
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    const Corner& mx = (*xmap)[ox];
                    const Real v00 = xv.at4(b, ch, my.lo, mx.lo);
                    const Real v01 = xv.at4(b, ch, my.lo, mx.hi);
                    const Real v10 = xv.at4(b, ch, my.hi, mx.lo);
                    const Real v11 = xv.at4(b, ch, my.hi, mx.hi);
                    const Real top = v00 + (v01 - v00) * mx.frac;
                    const Real bot = v10 + (v11 - v10) * mx.frac;
                    out.at4(b, ch, oy, ox) = top + (bot - top) * my.frac;
                }
            }
    const int xid = x.id;
    return t.make_node(
        "bilinear_resize", {xid}, std::move(out),
        [xid, ymap, xmap, bsz, c, out_h, out_w](Tape<Real>& tp, int self) {
            if (!tp.requires_grad(xid)) return;
            const Tensor<Real>& g = tp.grad(self);
            Tensor<Real>& gx = tp.grad(xid);
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t oy = 0; oy < out_h; ++oy) {
                        const Corner& my = (*ymap)[oy];
                        for (std::size_t ox = 0; ox < out_w; ++ox) {
                            const Corner& mx = (*xmap)[ox];
                            const Real gv = g.at4(b, ch, oy, ox);
                            const Real fy = my.frac, fx = mx.frac;
                            gx.at4(b, ch, my.lo, mx.lo) += gv * (1 - fy) * (1 - fx);
                            gx.at4(b, ch, my.lo, mx.hi) += gv * (1 - fy) * fx;
                            gx.at4(b, ch, my.hi, mx.lo) += gv * fy * (1 - fx);
                            gx.at4(b, ch, my.hi, mx.hi) += gv * fy * fx;
                        }
                    }
        });
}

/// Replication padding on the bottom/right edges of x[B,C,H,W].
template <class Real>
Var<Real> pad_replicate(Var<Real> x, std::size_t pad_h, std::size_t pad_w) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 4) throw DimensionError("pad_replicate expects [B,C,H,W]");
    const std::size_t bsz = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    const std::size_t oh = h + pad_h, ow = w + pad_w;
    Tensor<Real> out({bsz, c, oh, ow});
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < oh; ++y) {
                const std::size_t sy = std::min(y, h - 1);
                for (std::size_t xw = 0; xw < ow; ++xw)
                    out.at4(b, ch, y, xw) = xv.at4(b, ch, sy, std::min(xw, w - 1));
            }
    const int xid = x.id;
    return t.make_node("pad_replicate", {xid}, std::move(out),
                       [xid, bsz, c, h, w, oh, ow](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(xid)) return;
                           const Tensor<Real>& g = tp.grad(self);
                           Tensor<Real>& gx = tp.grad(xid);
                           for (std::size_t b = 0; b < bsz; ++b)
                               for (std::size_t ch = 0; ch < c; ++ch)
                                   for (std::size_t y = 0; y < oh; ++y) {
                                       const std::size_t sy = std::min(y, h - 1);
                                       for (std::size_t xw = 0; xw < ow; ++xw)
                                           gx.at4(b, ch, sy, std::min(xw, w - 1)) +=
                                               g.at4(b, ch, y, xw);
                                   }
                       });
}

// ---------------------------------------------------------------------------
// Normalization and pooling
// ---------------------------------------------------------------------------

template <class Real>
struct RunningStats {
    Tensor<Real> mean;
    Tensor<Real> var;

    RunningStats() = default;
    explicit RunningStats(std::size_t channels)
        : mean({channels}, Real(0)), var({channels}, Real(1)) {}
};

enum class Mode { Train, Eval };

/// Per-channel batch normalization over x[B,C,...]. Train mode standardizes
/// with batch statistics and updates `stats` with the given momentum; eval
/// mode uses the running statistics only.
template <class Real>
Var<Real> batch_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps, Mode mode,
                     RunningStats<Real>* stats, Real momentum = Real(0.1)) {
    require_same_tape(x, gamma, "batch_norm");
    require_same_tape(x, beta, "batch_norm");
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() < 2) throw DimensionError("batch_norm expects [B,C,...]");
    const std::size_t bsz = xv.shape[0], c = xv.shape[1];
    const std::size_t spatial = xv.size() / (bsz * c);
    const Tensor<Real>& gv = t.val(gamma);
    const Tensor<Real>& bv = t.val(beta);
    if (gv.size() != c || bv.size() != c)
        throw DimensionError("batch_norm: gamma/beta size vs " + std::to_string(c) + " channels");
    if (mode == Mode::Train && bsz < 2)
        throw DataError("batch_norm: degenerate batch (B=" + std::to_string(bsz) +
                        "), train mode requires B >= 2");
    if (mode == Mode::Eval && !stats)
        throw ConfigError("batch_norm: eval mode requires running stats");

    const std::size_t m = bsz * spatial;
    auto mean_c = std::make_shared<std::vector<Real>>(c, Real(0));
    auto inv_std = std::make_shared<std::vector<Real>>(c, Real(0));
    auto elem = [c, spatial](std::size_t b, std::size_t ch, std::size_t s) {
        return (b * c + ch) * spatial + s;
    };
    if (mode == Mode::Train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            Real acc = 0;
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t s = 0; s < spatial; ++s) acc += xv.data[elem(b, ch, s)];
            const Real mu = acc / static_cast<Real>(m);
            Real var_acc = 0;
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t s = 0; s < spatial; ++s) {
                    const Real d = xv.data[elem(b, ch, s)] - mu;
                    var_acc += d * d;
                }
            const Real var = var_acc / static_cast<Real>(m);
            (*mean_c)[ch] = mu;
            (*inv_std)[ch] = Real(1) / std::sqrt(var + eps);
            if (stats) {
                stats->mean.data[ch] = (Real(1) - momentum) * stats->mean.data[ch] + momentum * mu;
                stats->var.data[ch] = (Real(1) - momentum) * stats->var.data[ch] + momentum * var;
            }
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            (*mean_c)[ch] = stats->mean.data[ch];
            (*inv_std)[ch] = Real(1) / std::sqrt(stats->var.data[ch] + eps);
        }
    }

    Tensor<Real> out(xv.shape);
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const Real mu = (*mean_c)[ch], is = (*inv_std)[ch];
            const Real ga = gv.data[ch], be = bv.data[ch];
            for (std::size_t s = 0; s < spatial; ++s) {
                const std::size_t i = elem(b, ch, s);
                out.data[i] = (xv.data[i] - mu) * is * ga + be;
            }
        }

    const int xid = x.id, gid = gamma.id, bid = beta.id;
    const bool train = mode == Mode::Train;
    return t.make_node(
        "batch_norm", {xid, gid, bid}, std::move(out),
        [xid, gid, bid, mean_c, inv_std, bsz, c, spatial, m, train, elem](Tape<Real>& tp,
                                                                          int self) {
            const Tensor<Real>& g = tp.grad(self);
            const Tensor<Real>& xv2 = tp.val(xid);
            const Tensor<Real>& gv2 = tp.val(gid);
            const bool need_x = tp.requires_grad(xid);
            const bool need_g = tp.requires_grad(gid);
            const bool need_b = tp.requires_grad(bid);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const Real mu = (*mean_c)[ch], is = (*inv_std)[ch];
                Real sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t b = 0; b < bsz; ++b)
                    for (std::size_t s = 0; s < spatial; ++s) {
                        const std::size_t i = elem(b, ch, s);
                        const Real xhat = (xv2.data[i] - mu) * is;
                        sum_dy += g.data[i];
                        sum_dy_xhat += g.data[i] * xhat;
                    }
                if (need_g) tp.grad(gid).data[ch] += sum_dy_xhat;
                if (need_b) tp.grad(bid).data[ch] += sum_dy;
                if (need_x) {
                    Tensor<Real>& gx = tp.grad(xid);
                    const Real ga = gv2.data[ch];
                    if (train) {
                        const Real inv_m = Real(1) / static_cast<Real>(m);
                        for (std::size_t b = 0; b < bsz; ++b)
                            for (std::size_t s = 0; s < spatial; ++s) {
                                const std::size_t i = elem(b, ch, s);
                                const Real xhat = (xv2.data[i] - mu) * is;
                                gx.data[i] += ga * is *
                                              (g.data[i] - inv_m * sum_dy -
                                               xhat * inv_m * sum_dy_xhat);
                            }
                    } else {
                        for (std::size_t b = 0; b < bsz; ++b)
                            for (std::size_t s = 0; s < spatial; ++s) {
                                const std::size_t i = elem(b, ch, s);
                                gx.data[i] += ga * is * g.data[i];
                            }
                    }
                }
            }
        });
}

/// Per-channel spatial mean: x[B,C,H,W] -> [B,C].
template <class Real>
Var<Real> global_avg_pool(Var<Real> x) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 4) throw DimensionError("global_avg_pool expects [B,C,H,W]");
    const std::size_t bsz = xv.shape[0], c = xv.shape[1];
    const std::size_t hw = xv.shape[2] * xv.shape[3];
    Tensor<Real> out({bsz, c});
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const Real* plane = xv.data.data() + (b * c + ch) * hw;
            Real acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
            out.at2(b, ch) = acc / static_cast<Real>(hw);
        }
    const int xid = x.id;
    return t.make_node("global_avg_pool", {xid}, std::move(out),
                       [xid, bsz, c, hw](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(xid)) return;
                           const Tensor<Real>& g = tp.grad(self);
                           Tensor<Real>& gx = tp.grad(xid);
                           for (std::size_t b = 0; b < bsz; ++b)
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                   const Real gv = g.at2(b, ch) / static_cast<Real>(hw);
                                   Real* plane = gx.data.data() + (b * c + ch) * hw;
                                   for (std::size_t i = 0; i < hw; ++i) plane[i] += gv;
                               }
                       });
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

template <class Real>
Var<Real> reshape(Var<Real> x, Shape new_shape) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (shape_numel(new_shape) != xv.size())
        throw DimensionError("reshape: " + shape_str(xv.shape) + " -> " + shape_str(new_shape) +
                             " changes element count");
    Tensor<Real> out(new_shape, xv.data);
    const int xid = x.id;
    return t.make_node("reshape", {xid}, std::move(out), [xid](Tape<Real>& tp, int self) {
        if (!tp.requires_grad(xid)) return;
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real>& gx = tp.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
    });
}

/// Extracts image b from x[B,C,H,W] as [C,H,W].
template <class Real>
Var<Real> select_image(Var<Real> x, std::size_t b) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 4) throw DimensionError("select_image expects [B,C,H,W]");
    if (b >= xv.shape[0]) throw DimensionError("select_image: index out of range");
    const std::size_t per = xv.size() / xv.shape[0];
    Tensor<Real> out({xv.shape[1], xv.shape[2], xv.shape[3]});
    std::copy_n(xv.data.data() + b * per, per, out.data.data());
    const int xid = x.id;
    return t.make_node("select_image", {xid}, std::move(out),
                       [xid, b, per](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(xid)) return;
                           const Tensor<Real>& g = tp.grad(self);
                           Tensor<Real>& gx = tp.grad(xid);
                           Real* dst = gx.data.data() + b * per;
                           for (std::size_t i = 0; i < per; ++i) dst[i] += g.data[i];
                       });
}

/// Stacks B images of identical shape [C,H,W] into [B,C,H,W].
template <class Real>
Var<Real> stack_images(const std::vector<Var<Real>>& images) {
    if (images.empty()) throw ConfigError("stack_images: empty input");
    Tape<Real>& t = *images[0].tape;
    const Tensor<Real>& first = t.val(images[0]);
    if (first.rank() != 3) throw DimensionError("stack_images expects [C,H,W] items");
    const std::size_t per = first.size();
    Tensor<Real> out({images.size(), first.shape[0], first.shape[1], first.shape[2]});
    std::vector<int> ids;
    ids.reserve(images.size());
    for (std::size_t b = 0; b < images.size(); ++b) {
        require_same_tape(images[0], images[b], "stack_images");
        const Tensor<Real>& iv = t.val(images[b]);
        require_same_shape(first, iv, "stack_images");
        std::copy_n(iv.data.data(), per, out.data.data() + b * per);
        ids.push_back(images[b].id);
    }
    return t.make_node("stack_images", std::move(ids), std::move(out),
                       [per](Tape<Real>& tp, int self) {
                           const Tensor<Real>& g = tp.grad(self);
                           const std::vector<int>& ins = tp.op_inputs(self);
                           for (std::size_t b = 0; b < ins.size(); ++b) {
                               if (!tp.requires_grad(ins[b])) continue;
                               Tensor<Real>& gi = tp.grad(ins[b]);
                               const Real* src = g.data.data() + b * per;
                               for (std::size_t i = 0; i < per; ++i) gi.data[i] += src[i];
                           }
                       });
}

/// [C,H,W] -> patch-token matrix [H*W, C].
template <class Real>
Var<Real> chw_to_tokens(Var<Real> x) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 3) throw DimensionError("chw_to_tokens expects [C,H,W]");
    const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
    Tensor<Real> out({hw, c});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t n = 0; n < hw; ++n) out.at2(n, ch) = xv.data[ch * hw + n];
    const int xid = x.id;
    return t.make_node("chw_to_tokens", {xid}, std::move(out),
                       [xid, c, hw](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(xid)) return;
                           const Tensor<Real>& g = tp.grad(self);
                           Tensor<Real>& gx = tp.grad(xid);
                           for (std::size_t ch = 0; ch < c; ++ch)
                               for (std::size_t n = 0; n < hw; ++n)
                                   gx.data[ch * hw + n] += g.at2(n, ch);
                       });
}

/// [N,C] token matrix -> [C,H,W] with N == H*W.
template <class Real>
Var<Real> tokens_to_chw(Var<Real> x, std::size_t h, std::size_t w) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 2 || xv.shape[0] != h * w)
        throw DimensionError("tokens_to_chw: shape " + shape_str(xv.shape) + " vs grid " +
                             shape_str({h, w}));
    const std::size_t c = xv.shape[1], hw = h * w;
    Tensor<Real> out({c, h, w});
    for (std::size_t n = 0; n < hw; ++n)
        for (std::size_t ch = 0; ch < c; ++ch) out.data[ch * hw + n] = xv.at2(n, ch);
    const int xid = x.id;
    return t.make_node("tokens_to_chw", {xid}, std::move(out),
                       [xid, c, hw](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(xid)) return;
                           const Tensor<Real>& g = tp.grad(self);
                           Tensor<Real>& gx = tp.grad(xid);
                           for (std::size_t n = 0; n < hw; ++n)
                               for (std::size_t ch = 0; ch < c; ++ch)
                                   gx.at2(n, ch) += g.data[ch * hw + n];
                       });
}

// ---------------------------------------------------------------------------
// Graph feature aggregation
// ---------------------------------------------------------------------------

/// Max-relative aggregation: row i of the output is
///   concat( x_i , max over out-neighbors j of (x_j - x_i) ).
/// With an empty neighbor list (k = 0) the relative half is zero. Gradients
/// flow to x_i and, per component, to the argmax neighbor.
template <class Real>
Var<Real> max_relative_aggregate(Var<Real> x, const PatchGraph& g) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    if (xv.rank() != 2) throw DimensionError("max_relative_aggregate expects [N,D]");
    const std::size_t n = xv.shape[0], d = xv.shape[1];
    if (g.num_nodes != n)
        throw DimensionError("max_relative_aggregate: graph has " + std::to_string(g.num_nodes) +
                             " nodes vs " + std::to_string(n) + " embeddings");
    const std::size_t k = g.k;
    // argmax[i*d + c] = index of the winning neighbor, or uint32(-1) if none
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(n * d, ~std::uint32_t(0));
    Tensor<Real> out({n, 2 * d});
    for (std::size_t i = 0; i < n; ++i) {
        const Real* xi = xv.data.data() + i * d;
        Real* orow = out.data.data() + i * 2 * d;
        std::copy_n(xi, d, orow);
        Real* rel = orow + d;
        std::uint32_t* am = argmax->data() + i * d;
        for (std::size_t r = 0; r < k; ++r) {
            const std::uint32_t j = g.neighbor(i, r);
            const Real* xj = xv.data.data() + j * d;
            for (std::size_t c = 0; c < d; ++c) {
                const Real diff = xj[c] - xi[c];
                if (r == 0 || diff > rel[c]) {  // strict >: ties keep the first-ranked neighbor
                    rel[c] = diff;
                    am[c] = j;
                }
            }
        }
        if (k == 0) std::fill_n(rel, d, Real(0));
    }
    const int xid = x.id;
    return t.make_node("max_relative_aggregate", {xid}, std::move(out),
                       [xid, argmax, n, d](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(xid)) return;
                           const Tensor<Real>& g2 = tp.grad(self);
                           Tensor<Real>& gx = tp.grad(xid);
                           for (std::size_t i = 0; i < n; ++i) {
                               const Real* grow = g2.data.data() + i * 2 * d;
                               Real* gxi = gx.data.data() + i * d;
                               for (std::size_t c = 0; c < d; ++c) gxi[c] += grow[c];
                               const Real* grel = grow + d;
                               const std::uint32_t* am = argmax->data() + i * d;
                               for (std::size_t c = 0; c < d; ++c) {
                                   if (am[c] == ~std::uint32_t(0)) continue;
                                   gx.data[am[c] * d + c] += grel[c];
                                   gxi[c] -= grel[c];
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout; identity in eval mode or at rate 0. The caller supplies
/// the RNG so masks are reproducible.
template <class Real>
Var<Real> dropout(Var<Real> x, Real rate, Mode mode, Rng* rng) {
    if (rate < Real(0) || rate >= Real(1)) throw ConfigError("dropout rate must be in [0,1)");
    if (mode == Mode::Eval || rate == Real(0)) return x;
    if (!rng) throw ConfigError("dropout: train mode requires an RNG");
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = t.val(x);
    auto mask = std::make_shared<std::vector<Real>>(xv.size());
    const Real keep = Real(1) - rate;
    Tensor<Real> out = xv;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real m = rng->uniform() < static_cast<double>(rate) ? Real(0) : Real(1) / keep;
        (*mask)[i] = m;
        out.data[i] *= m;
    }
    const int xid = x.id;
    return t.make_node("dropout", {xid}, std::move(out), [xid, mask](Tape<Real>& tp, int self) {
        if (!tp.requires_grad(xid)) return;
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real>& gx = tp.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Losses (logit-space, log-sum-exp stabilized)
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy of logits[B,C] against class indices.
template <class Real>
Var<Real> softmax_cross_entropy(Var<Real> logits, const std::vector<std::size_t>& targets) {
    Tape<Real>& t = *logits.tape;
    const Tensor<Real>& zv = t.val(logits);
    if (zv.rank() != 2) throw DimensionError("softmax_cross_entropy expects [B,C] logits");
    const std::size_t bsz = zv.shape[0], c = zv.shape[1];
    if (targets.size() != bsz)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets vs batch " + std::to_string(bsz));
    auto probs = std::make_shared<Tensor<Real>>(zv.shape);
    Real loss = 0;
    for (std::size_t b = 0; b < bsz; ++b) {
        if (targets[b] >= c)
            throw DataError("class target " + std::to_string(targets[b]) + " out of range [0," +
                            std::to_string(c) + ")");
        const Real* row = zv.data.data() + b * c;
        Real mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        Real denom = 0;
        Real* prow = probs->data.data() + b * c;
        for (std::size_t j = 0; j < c; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += prow[j];
        }
        for (std::size_t j = 0; j < c; ++j) prow[j] /= denom;
        loss += std::log(denom) + mx - row[targets[b]];
    }
    Tensor<Real> out({1});
    out.data[0] = loss / static_cast<Real>(bsz);
    const int zid = logits.id;
    auto tgt = std::make_shared<std::vector<std::size_t>>(targets);
    return t.make_node("softmax_cross_entropy", {zid}, std::move(out),
                       [zid, probs, tgt, bsz, c](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(zid)) return;
                           const Real g = tp.grad(self).data[0] / static_cast<Real>(bsz);
                           Tensor<Real>& gz = tp.grad(zid);
                           for (std::size_t b = 0; b < bsz; ++b) {
                               const Real* prow = probs->data.data() + b * c;
                               Real* grow = gz.data.data() + b * c;
                               for (std::size_t j = 0; j < c; ++j) grow[j] += g * prow[j];
                               grow[(*tgt)[b]] -= g;
                           }
                       });
}

/// Mean per-class sigmoid binary cross-entropy of logits[B,C] against
/// multi-hot targets of the same shape.
template <class Real>
Var<Real> bce_with_logits(Var<Real> logits, const Tensor<Real>& targets) {
    Tape<Real>& t = *logits.tape;
    const Tensor<Real>& zv = t.val(logits);
    require_same_shape(zv, targets, "bce_with_logits");
    const std::size_t n = zv.size();
    Real loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real y = targets.data[i];
        if (y != Real(0) && y != Real(1))
            throw DataError("multilabel target must be 0 or 1, got " + std::to_string(y));
        const Real z = zv.data[i];
        loss += std::max(z, Real(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor<Real> out({1});
    out.data[0] = loss / static_cast<Real>(n);
    const int zid = logits.id;
    auto tgt = std::make_shared<Tensor<Real>>(targets);
    return t.make_node("bce_with_logits", {zid}, std::move(out),
                       [zid, tgt, n](Tape<Real>& tp, int self) {
                           if (!tp.requires_grad(zid)) return;
                           const Real g = tp.grad(self).data[0] / static_cast<Real>(n);
                           const Tensor<Real>& zv2 = tp.val(zid);
                           Tensor<Real>& gz = tp.grad(zid);
                           for (std::size_t i = 0; i < n; ++i)
                               gz.data[i] += g * (sigmoid_value(zv2.data[i]) - tgt->data[i]);
                       });
}

}  // namespace vig
