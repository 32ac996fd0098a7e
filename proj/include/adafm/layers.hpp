// SPDX-License-Identifier: Apache-2.0
#pragma once

// Composite building blocks: dense layer, residual block (optionally
// modulated), style block with shortcut, and the latent mapping MLP.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "adafm/modulation.hpp"
#include "adafm/rng.hpp"

namespace adafm {

constexpr float kLeakySlope = 0.2f;

// Visitor over named parameters. `frozen` reflects the owning bank/layer.
using ParamVisitor = std::function<void(const std::string& name, TensorF& tensor, bool frozen)>;

struct DenseLayer {
    TensorF weights;  // (In, Out)
    TensorF bias;     // (Out)
    bool frozen = false;

    static DenseLayer create(int in, int out, Rng& rng, float gain);
    // Affine map initialised to a constant output, e.g. style s == 1.
    static DenseLayer constant_output(int in, int out, float value);

    TensorF forward(const TensorF& x) const;  // (N, In) -> (N, Out)
    void visit(const std::string& prefix, const ParamVisitor& fn);
    void set_frozen(bool f);
};

struct ConvLayer {
    FilterBank bank;
    int stride = 1;
    int pad = 1;

    static ConvLayer create(int co, int ci, int k, int pad, Rng& rng);
    // He init shifted so every output channel's kernel sums to one; keeps the
    // demodulation radicand positive at s = 1.
    static ConvLayer create_unit_sum(int co, int ci, int k, int pad, Rng& rng);

    TensorF forward(const TensorF& x) const;
    TensorF forward_styled(const TensorF& x, const TensorF& style) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
    void set_frozen(bool f);
};

enum class Resample { None, Up, Down };

// Pre-activation residual block: main = conv2(act(conv1(act(x)))),
// shortcut = projection or identity; output is their raw sum.
struct ResidualBlock {
    ConvLayer conv1, conv2;
    std::optional<ConvLayer> shortcut;
    Resample resample = Resample::None;

    static ResidualBlock create(int in_c, int out_c, Resample resample, Rng& rng,
                                bool force_projection = false);

    TensorF forward(const TensorF& x) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
    void set_frozen(bool f);
    void for_each_bank(const std::function<void(FilterBank&)>& fn);
};

// Residual block whose two convolutions are weight-demodulated by styles
// derived from the block's style input; shortcut is an unmodulated 1x1
// projection. Styles are per-sample, so the main branch runs per sample.
struct StyleBlock {
    ConvLayer conv1, conv2;   // scheme = WeightDemod
    ConvLayer shortcut;       // plain 1x1 projection
    DenseLayer affine1, affine2;  // style -> s, initialised to s == 1
    int style_dim = 0;
    float epsilon = 1e-8f;

    static StyleBlock create(int in_c, int out_c, int style_dim, Rng& rng);

    // x: (N,C,H,W), styles: (N, style_dim)
    TensorF forward(const TensorF& x, const TensorF& styles) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
    void set_frozen(bool f);
};

// Latent-to-style mapping network (default depth 8).
struct MappingMLP {
    std::vector<DenseLayer> layers;

    static MappingMLP create(int latent_dim, int depth, Rng& rng);

    TensorF forward(const TensorF& z) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
    void set_frozen(bool f);
};

// Initialisation draws: He fan-in normal scaled by `gain`.
TensorF he_normal(Shape shape, std::int64_t fan_in, Rng& rng, float gain = 2.0f,
                  bool requires_grad = true);

}  // namespace adafm
