// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable primitives over Tensor<Real>. Each primitive's vjp closure
// is composed of other primitives, so backward passes are themselves
// recorded and can be differentiated again (grad-of-grad).

#include <algorithm>
#include <cmath>
#include <span>
#include <unordered_map>
#include <unordered_set>

#include "adafm/blas.hpp"
#include "adafm/tensor.hpp"

namespace adafm {

namespace detail {

template <typename Real>
void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename Real>
void check_ndim(const char* op, const Tensor<Real>& t, int nd) {
    if (t.ndim() != nd)
        throw ShapeError(std::string(op) + ": expected " + std::to_string(nd) +
                         "-d tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("add", a, b);
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_op<Real>(a.shape(), std::move(out), "add", {a, b},
                         [](const Tensor<Real>& g) { return std::vector<Tensor<Real>>{g, g}; });
}

template <typename Real>
Tensor<Real> neg(const Tensor<Real>& x) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v = -v;
    return make_op<Real>(x.shape(), std::move(out), "neg", {x},
                         [](const Tensor<Real>& g) { return std::vector<Tensor<Real>>{neg(g)}; });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("sub", a, b);
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return make_op<Real>(a.shape(), std::move(out), "sub", {a, b}, [](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{g, neg(g)};
    });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("mul", a, b);
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make_op<Real>(a.shape(), std::move(out), "mul", {a, b}, [a, b](const Tensor<Real>& g) {
        std::vector<Tensor<Real>> grads(2);
        if (a.requires_grad()) grads[0] = mul(g, b);
        if (b.requires_grad()) grads[1] = mul(g, a);
        return grads;
    });
}

template <typename Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("div", a, b);
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    return make_op<Real>(a.shape(), std::move(out), "div", {a, b}, [a, b](const Tensor<Real>& g) {
        std::vector<Tensor<Real>> grads(2);
        if (a.requires_grad()) grads[0] = div(g, b);
        if (b.requires_grad()) grads[1] = neg(div(mul(g, a), mul(b, b)));
        return grads;
    });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v *= c;
    return make_op<Real>(x.shape(), std::move(out), "scale", {x}, [c](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{scale(g, c)};
    });
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real c) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v += c;
    return make_op<Real>(x.shape(), std::move(out), "add_scalar", {x},
                         [](const Tensor<Real>& g) { return std::vector<Tensor<Real>>{g}; });
}

template <typename Real>
Tensor<Real> square(const Tensor<Real>& x) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v *= v;
    return make_op<Real>(x.shape(), std::move(out), "square", {x}, [x](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{scale(mul(g, x), Real(2))};
    });
}

template <typename Real>
Tensor<Real> rsqrt(const Tensor<Real>& x) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v = Real(1) / std::sqrt(v);
    return make_op<Real>(x.shape(), std::move(out), "rsqrt", {x}, [x](const Tensor<Real>& g) {
        auto r = rsqrt(x);
        return std::vector<Tensor<Real>>{scale(mul(g, mul(r, mul(r, r))), Real(-0.5))};
    });
}

template <typename Real>
Tensor<Real> sqrt_op(const Tensor<Real>& x) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v = std::sqrt(v);
    return make_op<Real>(x.shape(), std::move(out), "sqrt", {x}, [x](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{mul(g, scale(rsqrt(x), Real(0.5)))};
    });
}

template <typename Real>
Tensor<Real> tanh_op(const Tensor<Real>& x) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v = std::tanh(v);
    return make_op<Real>(x.shape(), std::move(out), "tanh", {x}, [x](const Tensor<Real>& g) {
        auto t = tanh_op(x);
        return std::vector<Tensor<Real>>{mul(g, add_scalar(neg(mul(t, t)), Real(1)))};
    });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    std::vector<Real> out(x.values());
    for (auto& v : out) {
        if (v >= 0) {
            v = Real(1) / (Real(1) + std::exp(-v));
        } else {
            const Real e = std::exp(v);
            v = e / (Real(1) + e);
        }
    }
    return make_op<Real>(x.shape(), std::move(out), "sigmoid", {x}, [x](const Tensor<Real>& g) {
        auto s = sigmoid(x);
        return std::vector<Tensor<Real>>{mul(g, mul(s, add_scalar(neg(s), Real(1))))};
    });
}

// log(1 + e^x), computed without overflow.
template <typename Real>
Tensor<Real> softplus(const Tensor<Real>& x) {
    std::vector<Real> out(x.values());
    for (auto& v : out) v = std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v)));
    return make_op<Real>(x.shape(), std::move(out), "softplus", {x}, [x](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{mul(g, sigmoid(x))};
    });
}

template <typename Real>
Tensor<Real> leaky_relu(const Tensor<Real>& x, Real slope) {
    std::vector<Real> out(x.values());
    std::vector<Real> mask(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = out[i] >= 0 ? Real(1) : slope;
        out[i] *= mask[i];
    }
    auto mask_t = Tensor<Real>::leaf(x.shape(), std::move(mask));
    return make_op<Real>(x.shape(), std::move(out), "leaky_relu", {x},
                         [mask_t](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{mul(g, mask_t)};
                         });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (closed adjoint pairs)
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> bcast_all(const Tensor<Real>& s, const Shape& shape);

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    Real acc = 0;
    for (const Real v : x.values()) acc += v;
    Shape in_shape = x.shape();
    return make_op<Real>({1}, {acc}, "sum_all", {x}, [in_shape](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{bcast_all(g, in_shape)};
    });
}

template <typename Real>
Tensor<Real> bcast_all(const Tensor<Real>& s, const Shape& shape) {
    if (s.size() != 1) throw ShapeError("bcast_all: source must be scalar");
    std::vector<Real> out(static_cast<std::size_t>(numel(shape)), s.values()[0]);
    return make_op<Real>(shape, std::move(out), "bcast_all", {s}, [](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{sum_all(g)};
    });
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
    return scale(sum_all(x), Real(1) / static_cast<Real>(x.size()));
}

template <typename Real>
Tensor<Real> bcast_kk(const Tensor<Real>& m, int k1, int k2);

// (A,B,K1,K2) -> (A,B), summing the trailing two dims.
template <typename Real>
Tensor<Real> sum_kk(const Tensor<Real>& x) {
    detail::check_ndim("sum_kk", x, 4);
    const int a = x.dim(0), b = x.dim(1), k1 = x.dim(2), k2 = x.dim(3);
    std::vector<Real> out(static_cast<std::size_t>(a) * b, Real(0));
    const auto& xv = x.values();
    const std::size_t kk = static_cast<std::size_t>(k1) * k2;
    for (std::size_t ab = 0; ab < out.size(); ++ab) {
        Real acc = 0;
        for (std::size_t k = 0; k < kk; ++k) acc += xv[ab * kk + k];
        out[ab] = acc;
    }
    return make_op<Real>({a, b}, std::move(out), "sum_kk", {x}, [k1, k2](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{bcast_kk(g, k1, k2)};
    });
}

// (A,B) -> (A,B,K1,K2), replicating each entry over a K1 x K2 slice.
template <typename Real>
Tensor<Real> bcast_kk(const Tensor<Real>& m, int k1, int k2) {
    detail::check_ndim("bcast_kk", m, 2);
    const int a = m.dim(0), b = m.dim(1);
    const std::size_t kk = static_cast<std::size_t>(k1) * k2;
    std::vector<Real> out(static_cast<std::size_t>(a) * b * kk);
    const auto& mv = m.values();
    for (std::size_t ab = 0; ab < mv.size(); ++ab)
        for (std::size_t k = 0; k < kk; ++k) out[ab * kk + k] = mv[ab];
    return make_op<Real>({a, b, k1, k2}, std::move(out), "bcast_kk", {m},
                         [](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{sum_kk(g)};
                         });
}

template <typename Real>
Tensor<Real> broadcast_rowvec(const Tensor<Real>& v, int rows);
template <typename Real>
Tensor<Real> broadcast_colvec(const Tensor<Real>& v, int cols);

// (R,C) -> (C), summing over rows.
template <typename Real>
Tensor<Real> colsum(const Tensor<Real>& m) {
    detail::check_ndim("colsum", m, 2);
    const int r = m.dim(0), c = m.dim(1);
    std::vector<Real> out(static_cast<std::size_t>(c), Real(0));
    const auto& mv = m.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] += mv[static_cast<std::size_t>(i) * c + j];
    return make_op<Real>({c}, std::move(out), "colsum", {m}, [r](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{broadcast_rowvec(g, r)};
    });
}

// (R,C) -> (R), summing over columns.
template <typename Real>
Tensor<Real> rowsum(const Tensor<Real>& m) {
    detail::check_ndim("rowsum", m, 2);
    const int r = m.dim(0), c = m.dim(1);
    std::vector<Real> out(static_cast<std::size_t>(r), Real(0));
    const auto& mv = m.values();
    for (int i = 0; i < r; ++i) {
        Real acc = 0;
        for (int j = 0; j < c; ++j) acc += mv[static_cast<std::size_t>(i) * c + j];
        out[static_cast<std::size_t>(i)] = acc;
    }
    return make_op<Real>({r}, std::move(out), "rowsum", {m}, [c](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{broadcast_colvec(g, c)};
    });
}

// (C) -> (R,C): every row is v.
template <typename Real>
Tensor<Real> broadcast_rowvec(const Tensor<Real>& v, int rows) {
    detail::check_ndim("broadcast_rowvec", v, 1);
    const int c = v.dim(0);
    std::vector<Real> out(static_cast<std::size_t>(rows) * c);
    const auto& vv = v.values();
    for (int i = 0; i < rows; ++i)
        std::copy(vv.begin(), vv.end(), out.begin() + static_cast<std::size_t>(i) * c);
    return make_op<Real>({rows, c}, std::move(out), "broadcast_rowvec", {v},
                         [](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{colsum(g)};
                         });
}

// (R) -> (R,C): every column is v.
template <typename Real>
Tensor<Real> broadcast_colvec(const Tensor<Real>& v, int cols) {
    detail::check_ndim("broadcast_colvec", v, 1);
    const int r = v.dim(0);
    std::vector<Real> out(static_cast<std::size_t>(r) * cols);
    const auto& vv = v.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(i) * cols + j] = vv[static_cast<std::size_t>(i)];
    return make_op<Real>({r, cols}, std::move(out), "broadcast_colvec", {v},
                         [](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{rowsum(g)};
                         });
}

template <typename Real>
Tensor<Real> bcast_chan(const Tensor<Real>& v, int n, int h, int w);

// (N,C,H,W) -> (C), summing everything but the channel dim.
template <typename Real>
Tensor<Real> sum_nhw(const Tensor<Real>& x) {
    detail::check_ndim("sum_nhw", x, 4);
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<Real> out(static_cast<std::size_t>(c), Real(0));
    const auto& xv = x.values();
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            Real acc = 0;
            const std::size_t base = (static_cast<std::size_t>(in) * c + ic) * hw;
            for (std::size_t k = 0; k < hw; ++k) acc += xv[base + k];
            out[static_cast<std::size_t>(ic)] += acc;
        }
    return make_op<Real>({c}, std::move(out), "sum_nhw", {x}, [n, h, w](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{bcast_chan(g, n, h, w)};
    });
}

// (C) -> (N,C,H,W): per-channel constant, e.g. a bias plane.
template <typename Real>
Tensor<Real> bcast_chan(const Tensor<Real>& v, int n, int h, int w) {
    detail::check_ndim("bcast_chan", v, 1);
    const int c = v.dim(0);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    std::vector<Real> out(static_cast<std::size_t>(n) * c * hw);
    const auto& vv = v.values();
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            const std::size_t base = (static_cast<std::size_t>(in) * c + ic) * hw;
            for (std::size_t k = 0; k < hw; ++k) out[base + k] = vv[static_cast<std::size_t>(ic)];
        }
    return make_op<Real>({n, c, h, w}, std::move(out), "bcast_chan", {v},
                         [](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{sum_nhw(g)};
                         });
}

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape) {
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    Shape old_shape = x.shape();
    return make_op<Real>(std::move(new_shape), x.values(), "reshape", {x},
                         [old_shape](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{reshape(g, old_shape)};
                         });
}

template <typename Real>
Tensor<Real> transpose2d(const Tensor<Real>& m) {
    detail::check_ndim("transpose2d", m, 2);
    const int r = m.dim(0), c = m.dim(1);
    std::vector<Real> out(static_cast<std::size_t>(r) * c);
    const auto& mv = m.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(j) * r + i] = mv[static_cast<std::size_t>(i) * c + j];
    return make_op<Real>({c, r}, std::move(out), "transpose2d", {m}, [](const Tensor<Real>& g) {
        return std::vector<Tensor<Real>>{transpose2d(g)};
    });
}

// ---------------------------------------------------------------------------
// Slicing along the leading dimension
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> embed_range(const Tensor<Real>& x, int start, int total);

// Rows [start, start+len) along dim 0, shape preserved in rank.
template <typename Real>
Tensor<Real> slice_range(const Tensor<Real>& x, int start, int len) {
    if (x.ndim() < 1 || start < 0 || len < 1 || start + len > x.dim(0))
        throw ShapeError("slice_range: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of bounds for " +
                         shape_str(x.shape()));
    const std::size_t row = static_cast<std::size_t>(numel(x.shape())) /
                            static_cast<std::size_t>(x.dim(0));
    Shape out_shape = x.shape();
    out_shape[0] = len;
    std::vector<Real> out(x.values().begin() + static_cast<std::ptrdiff_t>(start * row),
                          x.values().begin() + static_cast<std::ptrdiff_t>((start + len) * row));
    const int total = x.dim(0);
    return make_op<Real>(std::move(out_shape), std::move(out), "slice_range", {x},
                         [start, total](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{embed_range(g, start, total)};
                         });
}

// Places x into a zero tensor whose dim 0 is `total`, starting at `start`.
template <typename Real>
Tensor<Real> embed_range(const Tensor<Real>& x, int start, int total) {
    if (x.ndim() < 1 || start < 0 || start + x.dim(0) > total)
        throw ShapeError("embed_range: block does not fit");
    const std::size_t row = static_cast<std::size_t>(numel(x.shape())) /
                            static_cast<std::size_t>(x.dim(0));
    Shape out_shape = x.shape();
    out_shape[0] = total;
    std::vector<Real> out(static_cast<std::size_t>(total) * row, Real(0));
    std::copy(x.values().begin(), x.values().end(),
              out.begin() + static_cast<std::ptrdiff_t>(start * row));
    const int len = x.dim(0);
    return make_op<Real>(std::move(out_shape), std::move(out), "embed_range", {x},
                         [start, len](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{slice_range(g, start, len)};
                         });
}

// Concatenation along dim 0; the adjoint hands each part its slice.
template <typename Real>
Tensor<Real> concat_front(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw ShapeError("concat_front: no parts");
    Shape out_shape = parts.front().shape();
    int total = 0;
    std::size_t count = 0;
    for (const auto& p : parts) {
        if (p.ndim() != static_cast<int>(out_shape.size()))
            throw ShapeError("concat_front: rank mismatch");
        for (std::size_t d = 1; d < out_shape.size(); ++d)
            if (p.shape()[d] != out_shape[d])
                throw ShapeError("concat_front: trailing dims differ, " +
                                 shape_str(p.shape()) + " vs " + shape_str(out_shape));
        total += p.dim(0);
        count += p.values().size();
    }
    out_shape[0] = total;
    std::vector<Real> out;
    out.reserve(count);
    std::vector<int> lens;
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
        lens.push_back(p.dim(0));
    }
    return make_op<Real>(std::move(out_shape), std::move(out), "concat_front", parts,
                         [lens](const Tensor<Real>& g) {
                             std::vector<Tensor<Real>> grads;
                             grads.reserve(lens.size());
                             int offset = 0;
                             for (const int len : lens) {
                                 grads.push_back(slice_range(g, offset, len));
                                 offset += len;
                             }
                             return grads;
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_ndim("matmul", a, 2);
    detail::check_ndim("matmul", b, 2);
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<Real> out(static_cast<std::size_t>(m) * n, Real(0));
    detail::gemm(false, false, m, n, k, Real(1), a.values().data(), k, b.values().data(), n,
                 Real(0), out.data(), n);
    return make_op<Real>({m, n}, std::move(out), "matmul", {a, b}, [a, b](const Tensor<Real>& g) {
        std::vector<Tensor<Real>> grads(2);
        if (a.requires_grad()) grads[0] = matmul(g, transpose2d(b));
        if (b.requires_grad()) grads[1] = matmul(transpose2d(a), g);
        return grads;
    });
}

// ---------------------------------------------------------------------------
// Convolution family. The three maps (forward, input-grad, weight-grad) are
// mutual adjoints of the bilinear form, so their vjps close over each other.
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_extent(int in, int pad, int k, int stride) {
    return (in + 2 * pad - k) / stride + 1;
}

// Patch expansion: x[n] -> cols (Ci*K1*K2, Ho*Wo), zero-padded.
template <typename Real>
void im2col(const Real* x, int ci, int h, int w, int k1, int k2, int stride, int pad, int ho,
            int wo, Real* cols) {
    for (int c = 0; c < ci; ++c)
        for (int a = 0; a < k1; ++a)
            for (int b = 0; b < k2; ++b) {
                Real* row = cols + (static_cast<std::size_t>(c) * k1 * k2 +
                                    static_cast<std::size_t>(a) * k2 + b) *
                                       (static_cast<std::size_t>(ho) * wo);
                for (int i = 0; i < ho; ++i) {
                    const int hi = i * stride - pad + a;
                    const bool row_ok = hi >= 0 && hi < h;
                    for (int j = 0; j < wo; ++j) {
                        const int wi = j * stride - pad + b;
                        row[static_cast<std::size_t>(i) * wo + j] =
                            (row_ok && wi >= 0 && wi < w)
                                ? x[(static_cast<std::size_t>(c) * h + hi) * w + wi]
                                : Real(0);
                    }
                }
            }
}

// Adjoint of im2col: scatter-add cols back into the input layout.
template <typename Real>
void col2im(const Real* cols, int ci, int h, int w, int k1, int k2, int stride, int pad, int ho,
            int wo, Real* x) {
    for (int c = 0; c < ci; ++c)
        for (int a = 0; a < k1; ++a)
            for (int b = 0; b < k2; ++b) {
                const Real* row = cols + (static_cast<std::size_t>(c) * k1 * k2 +
                                          static_cast<std::size_t>(a) * k2 + b) *
                                             (static_cast<std::size_t>(ho) * wo);
                for (int i = 0; i < ho; ++i) {
                    const int hi = i * stride - pad + a;
                    if (hi < 0 || hi >= h) continue;
                    for (int j = 0; j < wo; ++j) {
                        const int wi = j * stride - pad + b;
                        if (wi < 0 || wi >= w) continue;
                        x[(static_cast<std::size_t>(c) * h + hi) * w + wi] +=
                            row[static_cast<std::size_t>(i) * wo + j];
                    }
                }
            }
}

template <typename Real>
void check_conv_args(const char* op, const Tensor<Real>& x, const Tensor<Real>& w, int stride,
                     int pad) {
    check_ndim(op, x, 4);
    check_ndim(op, w, 4);
    if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
    if (pad < 0) throw ShapeError(std::string(op) + ": padding must be >= 0");
    if (x.dim(1) != w.dim(1))
        throw ShapeError(std::string(op) + ": input has " + std::to_string(x.dim(1)) +
                         " channels but weight expects " + std::to_string(w.dim(1)));
}

}  // namespace detail

template <typename Real>
Tensor<Real> conv2d_input_grad(const Tensor<Real>& gy, const Tensor<Real>& w, int stride, int pad,
                               int in_h, int in_w);
template <typename Real>
Tensor<Real> conv2d_weight_grad(const Tensor<Real>& x, const Tensor<Real>& gy, int stride,
                                int pad, int k1, int k2);

// x: (N,Ci,H,W), w: (Co,Ci,K1,K2) -> (N,Co,Ho,Wo). Cross-correlation, as is
// conventional for learned filters.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, int stride, int pad) {
    detail::check_conv_args("conv2d", x, w, stride, pad);
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wid = x.dim(3);
    const int co = w.dim(0), k1 = w.dim(2), k2 = w.dim(3);
    const int ho = detail::conv_out_extent(h, pad, k1, stride);
    const int wo = detail::conv_out_extent(wid, pad, k2, stride);
    if (ho < 1 || wo < 1)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " too large for input " +
                         shape_str(x.shape()) + " with padding " + std::to_string(pad));
    const std::size_t ckk = static_cast<std::size_t>(ci) * k1 * k2;
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    std::vector<Real> cols(ckk * howo);
    std::vector<Real> out(static_cast<std::size_t>(n) * co * howo);
    for (int in = 0; in < n; ++in) {
        detail::im2col(x.values().data() + static_cast<std::size_t>(in) * ci * h * wid, ci, h,
                       wid, k1, k2, stride, pad, ho, wo, cols.data());
        detail::gemm(false, false, co, static_cast<int>(howo), static_cast<int>(ckk), Real(1),
                     w.values().data(), static_cast<int>(ckk), cols.data(),
                     static_cast<int>(howo), Real(0),
                     out.data() + static_cast<std::size_t>(in) * co * howo,
                     static_cast<int>(howo));
    }
    return make_op<Real>({n, co, ho, wo}, std::move(out), "conv2d", {x, w},
                         [x, w, stride, pad, h, wid, k1, k2](const Tensor<Real>& g) {
                             std::vector<Tensor<Real>> grads(2);
                             if (x.requires_grad())
                                 grads[0] = conv2d_input_grad(g, w, stride, pad, h, wid);
                             if (w.requires_grad())
                                 grads[1] = conv2d_weight_grad(x, g, stride, pad, k1, k2);
                             return grads;
                         });
}

// Adjoint of conv2d in its input: gy (N,Co,Ho,Wo) -> (N,Ci,in_h,in_w).
template <typename Real>
Tensor<Real> conv2d_input_grad(const Tensor<Real>& gy, const Tensor<Real>& w, int stride, int pad,
                               int in_h, int in_w) {
    detail::check_ndim("conv2d_input_grad", gy, 4);
    detail::check_ndim("conv2d_input_grad", w, 4);
    const int n = gy.dim(0), co = gy.dim(1), ho = gy.dim(2), wo = gy.dim(3);
    const int ci = w.dim(1), k1 = w.dim(2), k2 = w.dim(3);
    if (w.dim(0) != co)
        throw ShapeError("conv2d_input_grad: gradient channels " + std::to_string(co) +
                         " do not match weight " + shape_str(w.shape()));
    const std::size_t ckk = static_cast<std::size_t>(ci) * k1 * k2;
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    std::vector<Real> cols(ckk * howo);
    std::vector<Real> out(static_cast<std::size_t>(n) * ci * in_h * in_w, Real(0));
    for (int in = 0; in < n; ++in) {
        detail::gemm(true, false, static_cast<int>(ckk), static_cast<int>(howo), co, Real(1),
                     w.values().data(), static_cast<int>(ckk),
                     gy.values().data() + static_cast<std::size_t>(in) * co * howo,
                     static_cast<int>(howo), Real(0), cols.data(), static_cast<int>(howo));
        detail::col2im(cols.data(), ci, in_h, in_w, k1, k2, stride, pad, ho, wo,
                       out.data() + static_cast<std::size_t>(in) * ci * in_h * in_w);
    }
    return make_op<Real>({n, ci, in_h, in_w}, std::move(out), "conv2d_input_grad", {gy, w},
                         [gy, w, stride, pad, k1, k2](const Tensor<Real>& u) {
                             std::vector<Tensor<Real>> grads(2);
                             if (gy.requires_grad()) grads[0] = conv2d(u, w, stride, pad);
                             if (w.requires_grad())
                                 grads[1] = conv2d_weight_grad(u, gy, stride, pad, k1, k2);
                             return grads;
                         });
}

// Adjoint of conv2d in its weight: x (N,Ci,H,W), gy (N,Co,Ho,Wo) -> (Co,Ci,K1,K2).
template <typename Real>
Tensor<Real> conv2d_weight_grad(const Tensor<Real>& x, const Tensor<Real>& gy, int stride,
                                int pad, int k1, int k2) {
    detail::check_ndim("conv2d_weight_grad", x, 4);
    detail::check_ndim("conv2d_weight_grad", gy, 4);
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wid = x.dim(3);
    const int co = gy.dim(1), ho = gy.dim(2), wo = gy.dim(3);
    if (gy.dim(0) != n) throw ShapeError("conv2d_weight_grad: batch mismatch");
    const std::size_t ckk = static_cast<std::size_t>(ci) * k1 * k2;
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    std::vector<Real> cols(ckk * howo);
    std::vector<Real> out(static_cast<std::size_t>(co) * ckk, Real(0));
    for (int in = 0; in < n; ++in) {
        detail::im2col(x.values().data() + static_cast<std::size_t>(in) * ci * h * wid, ci, h,
                       wid, k1, k2, stride, pad, ho, wo, cols.data());
        detail::gemm(false, true, co, static_cast<int>(ckk), static_cast<int>(howo), Real(1),
                     gy.values().data() + static_cast<std::size_t>(in) * co * howo,
                     static_cast<int>(howo), cols.data(), static_cast<int>(howo), Real(1),
                     out.data(), static_cast<int>(ckk));
    }
    const int in_h = h, in_w = wid;
    return make_op<Real>({co, ci, k1, k2}, std::move(out), "conv2d_weight_grad", {x, gy},
                         [x, gy, stride, pad, in_h, in_w](const Tensor<Real>& v) {
                             std::vector<Tensor<Real>> grads(2);
                             if (x.requires_grad())
                                 grads[0] = conv2d_input_grad(gy, v, stride, pad, in_h, in_w);
                             if (gy.requires_grad()) grads[1] = conv2d(x, v, stride, pad);
                             return grads;
                         });
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> avg_pool2x(const Tensor<Real>& x);

// Each pixel replicated into a 2x2 block; the adjoint sums the block.
template <typename Real>
Tensor<Real> upsample_nearest2x(const Tensor<Real>& x) {
    detail::check_ndim("upsample_nearest2x", x, 4);
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<Real> out(static_cast<std::size_t>(n) * c * 4 * h * w);
    const auto& xv = x.values();
    const int ho = 2 * h, wo = 2 * w;
    for (int nc = 0; nc < n * c; ++nc) {
        const Real* src = xv.data() + static_cast<std::size_t>(nc) * h * w;
        Real* dst = out.data() + static_cast<std::size_t>(nc) * ho * wo;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const Real v = src[static_cast<std::size_t>(i) * w + j];
                Real* base = dst + static_cast<std::size_t>(2 * i) * wo + 2 * j;
                base[0] = v;
                base[1] = v;
                base[wo] = v;
                base[wo + 1] = v;
            }
    }
    return make_op<Real>({n, c, ho, wo}, std::move(out), "upsample_nearest2x", {x},
                         [](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{scale(avg_pool2x(g), Real(4))};
                         });
}

template <typename Real>
Tensor<Real> avg_pool2x(const Tensor<Real>& x) {
    detail::check_ndim("avg_pool2x", x, 4);
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 || w % 2)
        throw ShapeError("avg_pool2x: spatial dims must be even, got " + shape_str(x.shape()));
    const int ho = h / 2, wo = w / 2;
    std::vector<Real> out(static_cast<std::size_t>(n) * c * ho * wo);
    const auto& xv = x.values();
    for (int nc = 0; nc < n * c; ++nc) {
        const Real* src = xv.data() + static_cast<std::size_t>(nc) * h * w;
        Real* dst = out.data() + static_cast<std::size_t>(nc) * ho * wo;
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j) {
                const Real* base = src + static_cast<std::size_t>(2 * i) * w + 2 * j;
                dst[static_cast<std::size_t>(i) * wo + j] =
                    (base[0] + base[1] + base[w] + base[w + 1]) * Real(0.25);
            }
    }
    return make_op<Real>({n, c, ho, wo}, std::move(out), "avg_pool2x", {x},
                         [](const Tensor<Real>& g) {
                             return std::vector<Tensor<Real>>{
                                 scale(upsample_nearest2x(g), Real(0.25))};
                         });
}

// ---------------------------------------------------------------------------
// Reverse-mode engine
// ---------------------------------------------------------------------------

namespace detail {

// Reverse post-order DFS over the requires_grad subgraph: consumers first.
template <typename Real>
std::vector<TensorNode<Real>*> topo_order(TensorNode<Real>* root) {
    std::vector<TensorNode<Real>*> order;
    std::unordered_set<TensorNode<Real>*> visited{root};
    struct Frame {
        TensorNode<Real>* node;
        std::size_t next;
    };
    std::vector<Frame> stack{{root, 0}};
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorNode<Real>* p = f.node->parents[f.next++].node();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    return order;  // post-order: every node after its parents
}

template <typename Real>
std::unordered_map<TensorNode<Real>*, Tensor<Real>> flow_grads(
    const Tensor<Real>& output, const std::vector<TensorNode<Real>*>& order) {
    std::unordered_map<TensorNode<Real>*, Tensor<Real>> grad_map;
    grad_map.emplace(output.node(), Tensor<Real>::scalar(Real(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<Real>* node = *it;
        const auto found = grad_map.find(node);
        if (found == grad_map.end() || node->is_leaf || !node->vjp) continue;
        const auto parent_grads = node->vjp(found->second);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            TensorNode<Real>* parent = node->parents[i].node();
            if (!parent->requires_grad || !parent_grads[i].defined()) continue;
            const auto g = grad_map.find(parent);
            if (g == grad_map.end())
                grad_map.emplace(parent, parent_grads[i]);
            else
                g->second = add(g->second, parent_grads[i]);
        }
    }
    return grad_map;
}

}  // namespace detail

// Populates .grad on every requires_grad leaf reachable from `loss`.
template <typename Real>
void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1)
        throw GraphError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw GraphError("backward: loss is not connected to any differentiable input");
    if (loss.node()->backward_done)
        throw GraphError("backward: already invoked on this tensor");
    loss.node()->backward_done = true;

    const auto order = detail::topo_order(loss.node());
    const auto grad_map = detail::flow_grads(loss, order);
    for (TensorNode<Real>* node : order) {
        if (!node->is_leaf || !node->requires_grad) continue;
        const auto g = grad_map.find(node);
        if (g == grad_map.end()) continue;
        if (!node->grad) {
            node->grad = std::make_unique<std::vector<Real>>(g->second.values());
        } else {
            auto& buf = *node->grad;
            const auto& inc = g->second.values();
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += inc[i];
        }
    }
}

// Gradients of a scalar output w.r.t. selected tensors, returned as graph
// tensors so they can be differentiated again.
template <typename Real>
std::vector<Tensor<Real>> grad_of(const Tensor<Real>& output, std::span<const Tensor<Real>> wrt) {
    if (output.size() != 1)
        throw GraphError("grad_of: output must be scalar, got " + shape_str(output.shape()));
    if (!output.requires_grad())
        throw GraphError("grad_of: output does not depend on any differentiable input");
    const auto order = detail::topo_order(output.node());
    std::unordered_set<TensorNode<Real>*> on_graph(order.begin(), order.end());
    const auto grad_map = detail::flow_grads(output, order);
    std::vector<Tensor<Real>> result;
    result.reserve(wrt.size());
    for (const auto& t : wrt) {
        if (!on_graph.count(t.node()))
            throw GraphError("grad_of: requested tensor is not on the graph of the output");
        const auto g = grad_map.find(t.node());
        result.push_back(g != grad_map.end() ? g->second : Tensor<Real>::zeros(t.shape()));
    }
    return result;
}

// Sum_i (d out / d x_i)^2 as a graph tensor, differentiable w.r.t. anything
// the gradient itself depends on (weights included).
template <typename Real>
Tensor<Real> second_order_grad_norm(const Tensor<Real>& d_out, const Tensor<Real>& x) {
    const Tensor<Real> wrt[] = {x};
    auto gx = grad_of(d_out, std::span<const Tensor<Real>>(wrt, 1));
    return sum_all(square(gx[0]));
}

}  // namespace adafm
