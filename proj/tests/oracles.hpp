// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-only reference kernels, kept independent of the library's compute
// paths (plain quadruple loops, no patch expansion, no BLAS).

#include <cmath>
#include <functional>
#include <vector>

#include "adafm/rng.hpp"
#include "adafm/tensor.hpp"

namespace oracles {

// Direct nested-loop cross-correlation, NCHW.
template <typename Real>
std::vector<Real> conv2d_loop(const std::vector<Real>& x, int n, int ci, int h, int w,
                              const std::vector<Real>& ker, int co, int k1, int k2, int stride,
                              int pad) {
    const int ho = (h + 2 * pad - k1) / stride + 1;
    const int wo = (w + 2 * pad - k2) / stride + 1;
    std::vector<Real> y(static_cast<std::size_t>(n) * co * ho * wo, Real(0));
    for (int in = 0; in < n; ++in)
        for (int oc = 0; oc < co; ++oc)
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    Real acc = 0;
                    for (int c = 0; c < ci; ++c)
                        for (int a = 0; a < k1; ++a)
                            for (int b = 0; b < k2; ++b) {
                                const int hi = i * stride - pad + a;
                                const int wi = j * stride - pad + b;
                                if (hi < 0 || hi >= h || wi < 0 || wi >= w) continue;
                                acc += x[((static_cast<std::size_t>(in) * ci + c) * h + hi) * w +
                                         wi] *
                                       ker[((static_cast<std::size_t>(oc) * ci + c) * k1 + a) *
                                               k2 +
                                           b];
                            }
                    y[((static_cast<std::size_t>(in) * co + oc) * ho + i) * wo + j] = acc;
                }
    return y;
}

template <typename Real>
std::vector<Real> upsample2x_loop(const std::vector<Real>& x, int n, int c, int h, int w) {
    std::vector<Real> y(static_cast<std::size_t>(n) * c * 4 * h * w);
    for (int nc = 0; nc < n * c; ++nc)
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
                y[(static_cast<std::size_t>(nc) * 2 * h + i) * 2 * w + j] =
                    x[(static_cast<std::size_t>(nc) * h + i / 2) * w + j / 2];
    return y;
}

// Central finite difference of f at x[i], mutating a copy of x.
template <typename Real>
Real central_fd(const std::function<Real(const std::vector<Real>&)>& f, std::vector<Real> x,
                std::size_t i, Real h) {
    x[i] += h;
    const Real up = f(x);
    x[i] -= 2 * h;
    const Real down = f(x);
    return (up - down) / (2 * h);
}

template <typename Real>
Real rel_err(Real got, Real want, Real floor = Real(1e-7)) {
    const Real denom = std::max({std::abs(got), std::abs(want), floor});
    return std::abs(got - want) / denom;
}

template <typename Real>
std::vector<Real> random_vec(adafm::Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<Real> v(n);
    for (auto& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
    return v;
}

}  // namespace oracles
