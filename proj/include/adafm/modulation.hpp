// SPDX-License-Identifier: Apache-2.0
#pragma once

// Filter-modulation schemes applied to (typically frozen) convolutional
// weight banks: per-channel-pair scale/shift, its rank-one restriction, and
// style-driven weight demodulation.

#include <string>

#include "adafm/ops.hpp"

namespace adafm {

enum class Scheme { None, AdaFM, FS, WeightDemod };

inline const char* scheme_name(Scheme s) {
    switch (s) {
        case Scheme::None: return "none";
        case Scheme::AdaFM: return "adafm";
        case Scheme::FS: return "fs";
        case Scheme::WeightDemod: return "weight_demod";
    }
    return "?";
}

namespace detail {

template <typename Real>
void check_bank(const char* op, const Tensor<Real>& w) {
    check_ndim(op, w, 4);
}

}  // namespace detail

// W'[i,j,:,:] = gamma[i,j] * W[i,j,:,:] + beta[i,j].
// gamma, beta: (Cout, Cin). Differentiable in all three arguments.
template <typename Real>
Tensor<Real> adafm_modulate(const Tensor<Real>& w, const Tensor<Real>& gamma,
                            const Tensor<Real>& beta) {
    detail::check_bank("adafm_modulate", w);
    detail::check_ndim("adafm_modulate", gamma, 2);
    detail::check_ndim("adafm_modulate", beta, 2);
    if (gamma.dim(0) != w.dim(0) || gamma.dim(1) != w.dim(1) || beta.shape() != gamma.shape())
        throw ShapeError("adafm_modulate: scale/shift " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match weight " +
                         shape_str(w.shape()));
    const int k1 = w.dim(2), k2 = w.dim(3);
    return add(mul(w, bcast_kk(gamma, k1, k2)), bcast_kk(beta, k1, k2));
}

// Rank-one restriction: gamma = gamma_hat * 1^T, beta = beta_hat * 1^T.
// Can reweight whole output filters but cannot mix input channels.
template <typename Real>
Tensor<Real> fs_modulate(const Tensor<Real>& w, const Tensor<Real>& gamma_hat,
                         const Tensor<Real>& beta_hat) {
    detail::check_bank("fs_modulate", w);
    detail::check_ndim("fs_modulate", gamma_hat, 1);
    detail::check_ndim("fs_modulate", beta_hat, 1);
    if (gamma_hat.dim(0) != w.dim(0) || beta_hat.dim(0) != w.dim(0))
        throw ShapeError("fs_modulate: expected length-" + std::to_string(w.dim(0)) +
                         " vectors, got " + shape_str(gamma_hat.shape()) + "/" +
                         shape_str(beta_hat.shape()));
    const int ci = w.dim(1);
    return adafm_modulate(w, broadcast_colvec(gamma_hat, ci), broadcast_colvec(beta_hat, ci));
}

// Style-driven demodulation: W'[i,j,:,:] = eta_i * s_j * W[i,j,:,:] with
// eta_i = 1/sqrt(eps + sum_{j,k1,k2} s_j W[i,j,k1,k2]). The radicand is used
// as written, without squaring, so it must stay positive; a non-positive
// radicand raises DomainError naming the offending output channel.
template <typename Real>
Tensor<Real> weight_demod_modulate(const Tensor<Real>& w, const Tensor<Real>& s,
                                   Real epsilon = Real(1e-8)) {
    detail::check_bank("weight_demod_modulate", w);
    detail::check_ndim("weight_demod_modulate", s, 1);
    if (s.dim(0) != w.dim(1))
        throw ShapeError("weight_demod_modulate: style length " + std::to_string(s.dim(0)) +
                         " does not match Cin=" + std::to_string(w.dim(1)));
    if (!(epsilon > Real(0))) throw DomainError("weight_demod_modulate: epsilon must be > 0");
    const int co = w.dim(0), ci = w.dim(1), k1 = w.dim(2), k2 = w.dim(3);

    auto weighted = mul(w, bcast_kk(broadcast_rowvec(s, co), k1, k2));
    auto radicand = add_scalar(rowsum(sum_kk(weighted)), epsilon);
    for (int i = 0; i < co; ++i)
        if (!(radicand.values()[static_cast<std::size_t>(i)] > Real(0)))
            throw DomainError("weight_demod_modulate: non-positive radicand " +
                              std::to_string(radicand.values()[static_cast<std::size_t>(i)]) +
                              " at output channel " + std::to_string(i));
    auto eta = rsqrt(radicand);
    auto gamma = mul(broadcast_colvec(eta, ci), broadcast_rowvec(s, co));
    return mul(w, bcast_kk(gamma, k1, k2));
}

// A convolutional weight bank plus its modulation state. When frozen, W is
// never touched by the optimizer; only scheme parameters train.
struct FilterBank {
    TensorF weights;  // (Cout, Cin, K1, K2)
    TensorF bias;     // (Cout)
    bool frozen = false;
    Scheme scheme = Scheme::None;

    // AdaFM: (Cout, Cin); FS: (Cout). Identity-initialised when attached.
    TensorF gamma, beta;
    TensorF gamma_hat, beta_hat;

    int out_channels() const { return weights.dim(0); }
    int in_channels() const { return weights.dim(1); }

    void attach_scheme(Scheme s) {
        scheme = s;
        const int co = out_channels(), ci = in_channels();
        if (s == Scheme::AdaFM) {
            gamma = TensorF::full({co, ci}, 1.0f, true);
            beta = TensorF::zeros({co, ci}, true);
        } else if (s == Scheme::FS) {
            gamma_hat = TensorF::full({co}, 1.0f, true);
            beta_hat = TensorF::zeros({co}, true);
        }
    }

    // The weight actually convolved this pass; recomputed every forward so
    // parameter updates are never observed through a stale cache.
    TensorF effective_weights() const {
        switch (scheme) {
            case Scheme::None: return weights;
            case Scheme::AdaFM: return adafm_modulate(weights, gamma, beta);
            case Scheme::FS: return fs_modulate(weights, gamma_hat, beta_hat);
            case Scheme::WeightDemod:
                throw GraphError("FilterBank: weight demodulation needs a style vector");
        }
        return weights;
    }

    TensorF effective_weights(const TensorF& style, float epsilon = 1e-8f) const {
        if (scheme != Scheme::WeightDemod)
            throw GraphError("FilterBank: style given but scheme is not weight_demod");
        return weight_demod_modulate(weights, style, epsilon);
    }
};

}  // namespace adafm
