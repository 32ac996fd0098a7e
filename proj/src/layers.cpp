// SPDX-License-Identifier: Apache-2.0
#include "adafm/layers.hpp"

namespace adafm {

TensorF he_normal(Shape shape, std::int64_t fan_in, Rng& rng, float gain, bool requires_grad) {
    const float std_dev = std::sqrt(gain / static_cast<float>(fan_in));
    std::vector<float> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = std_dev * static_cast<float>(rng.gaussian());
    return TensorF::leaf(std::move(shape), std::move(v), requires_grad);
}

// ---------------------------------------------------------------------------
// DenseLayer
// ---------------------------------------------------------------------------

DenseLayer DenseLayer::create(int in, int out, Rng& rng, float gain) {
    DenseLayer d;
    d.weights = he_normal({in, out}, in, rng, gain);
    d.bias = TensorF::zeros({out}, true);
    return d;
}

DenseLayer DenseLayer::constant_output(int in, int out, float value) {
    DenseLayer d;
    d.weights = TensorF::zeros({in, out}, true);
    d.bias = TensorF::full({out}, value, true);
    return d;
}

TensorF DenseLayer::forward(const TensorF& x) const {
    return add(matmul(x, weights), broadcast_rowvec(bias, x.dim(0)));
}

void DenseLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "/W", weights, frozen);
    fn(prefix + "/b", bias, frozen);
}

void DenseLayer::set_frozen(bool f) {
    frozen = f;
    weights.set_requires_grad(!f);
    bias.set_requires_grad(!f);
}

// ---------------------------------------------------------------------------
// ConvLayer
// ---------------------------------------------------------------------------

ConvLayer ConvLayer::create(int co, int ci, int k, int pad, Rng& rng) {
    ConvLayer c;
    c.bank.weights = he_normal({co, ci, k, k}, static_cast<std::int64_t>(ci) * k * k, rng);
    c.bank.bias = TensorF::zeros({co}, true);
    c.stride = 1;
    c.pad = pad;
    return c;
}

ConvLayer ConvLayer::create_unit_sum(int co, int ci, int k, int pad, Rng& rng) {
    ConvLayer c = create(co, ci, k, pad, rng);
    auto& w = c.bank.weights.mutable_values();
    const std::size_t per_out = static_cast<std::size_t>(ci) * k * k;
    for (int i = 0; i < co; ++i) {
        float sum = 0.0f;
        for (std::size_t j = 0; j < per_out; ++j) sum += w[static_cast<std::size_t>(i) * per_out + j];
        const float shift = (1.0f - sum) / static_cast<float>(per_out);
        for (std::size_t j = 0; j < per_out; ++j) w[static_cast<std::size_t>(i) * per_out + j] += shift;
    }
    return c;
}

TensorF ConvLayer::forward(const TensorF& x) const {
    auto y = conv2d(x, bank.effective_weights(), stride, pad);
    return add(y, bcast_chan(bank.bias, y.dim(0), y.dim(2), y.dim(3)));
}

TensorF ConvLayer::forward_styled(const TensorF& x, const TensorF& style) const {
    auto y = conv2d(x, bank.effective_weights(style), stride, pad);
    return add(y, bcast_chan(bank.bias, y.dim(0), y.dim(2), y.dim(3)));
}

void ConvLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "/W", bank.weights, bank.frozen);
    fn(prefix + "/b", bank.bias, bank.frozen);
    // Modulation parameters always train (post warm-up); they are the point
    // of keeping the bank frozen.
    if (bank.scheme == Scheme::AdaFM) {
        fn(prefix + "/adafm_gamma", bank.gamma, false);
        fn(prefix + "/adafm_beta", bank.beta, false);
    } else if (bank.scheme == Scheme::FS) {
        fn(prefix + "/fs_gamma", bank.gamma_hat, false);
        fn(prefix + "/fs_beta", bank.beta_hat, false);
    }
}

void ConvLayer::set_frozen(bool f) {
    bank.frozen = f;
    bank.weights.set_requires_grad(!f);
    bank.bias.set_requires_grad(!f);
}

// ---------------------------------------------------------------------------
// ResidualBlock
// ---------------------------------------------------------------------------

ResidualBlock ResidualBlock::create(int in_c, int out_c, Resample resample, Rng& rng,
                                    bool force_projection) {
    ResidualBlock b;
    b.resample = resample;
    b.conv1 = ConvLayer::create(out_c, in_c, 3, 1, rng);
    b.conv2 = ConvLayer::create(out_c, out_c, 3, 1, rng);
    if (force_projection || in_c != out_c || resample != Resample::None)
        b.shortcut = ConvLayer::create(out_c, in_c, 1, 0, rng);
    return b;
}

TensorF ResidualBlock::forward(const TensorF& x) const {
    if (x.dim(1) != conv1.bank.in_channels())
        throw ShapeError("residual block: input has " + std::to_string(x.dim(1)) +
                         " channels, expected " + std::to_string(conv1.bank.in_channels()));
    TensorF t = resample == Resample::Up ? upsample_nearest2x(x) : x;
    TensorF main = conv2.forward(leaky_relu(conv1.forward(leaky_relu(t, kLeakySlope)), kLeakySlope));
    TensorF sc = shortcut ? shortcut->forward(t) : t;
    if (resample == Resample::Down) {
        main = avg_pool2x(main);
        sc = avg_pool2x(sc);
    }
    return add(main, sc);
}

void ResidualBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
    conv1.visit(prefix + "/conv1", fn);
    conv2.visit(prefix + "/conv2", fn);
    if (shortcut) shortcut->visit(prefix + "/shortcut", fn);
}

void ResidualBlock::set_frozen(bool f) {
    conv1.set_frozen(f);
    conv2.set_frozen(f);
    if (shortcut) shortcut->set_frozen(f);
}

void ResidualBlock::for_each_bank(const std::function<void(FilterBank&)>& fn) {
    fn(conv1.bank);
    fn(conv2.bank);
    if (shortcut) fn(shortcut->bank);
}

// ---------------------------------------------------------------------------
// StyleBlock
// ---------------------------------------------------------------------------

StyleBlock StyleBlock::create(int in_c, int out_c, int style_dim, Rng& rng) {
    StyleBlock b;
    b.style_dim = style_dim;
    b.conv1 = ConvLayer::create_unit_sum(out_c, in_c, 3, 1, rng);
    b.conv1.bank.scheme = Scheme::WeightDemod;
    b.conv2 = ConvLayer::create_unit_sum(out_c, out_c, 3, 1, rng);
    b.conv2.bank.scheme = Scheme::WeightDemod;
    b.shortcut = ConvLayer::create(out_c, in_c, 1, 0, rng);
    b.affine1 = DenseLayer::constant_output(style_dim, in_c, 1.0f);
    b.affine2 = DenseLayer::constant_output(style_dim, out_c, 1.0f);
    return b;
}

TensorF StyleBlock::forward(const TensorF& x, const TensorF& styles) const {
    if (styles.ndim() != 2 || styles.dim(1) != style_dim)
        throw ShapeError("style block: style input " + shape_str(styles.shape()) +
                         " does not match width " + std::to_string(style_dim));
    if (styles.dim(0) != x.dim(0))
        throw ShapeError("style block: batch mismatch between activations and styles");
    const int n = x.dim(0);
    std::vector<TensorF> outs;
    outs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto xi = slice_range(x, i, 1);
        auto wi = slice_range(styles, i, 1);
        auto s1 = reshape(affine1.forward(wi), {conv1.bank.in_channels()});
        auto s2 = reshape(affine2.forward(wi), {conv2.bank.in_channels()});
        auto h = conv1.forward_styled(leaky_relu(xi, kLeakySlope), s1);
        h = conv2.forward_styled(leaky_relu(h, kLeakySlope), s2);
        outs.push_back(add(h, shortcut.forward(xi)));
    }
    return concat_front(outs);
}

void StyleBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
    conv1.visit(prefix + "/conv1", fn);
    conv2.visit(prefix + "/conv2", fn);
    shortcut.visit(prefix + "/shortcut", fn);
    affine1.visit(prefix + "/affine1", fn);
    affine2.visit(prefix + "/affine2", fn);
}

void StyleBlock::set_frozen(bool f) {
    conv1.set_frozen(f);
    conv2.set_frozen(f);
    shortcut.set_frozen(f);
    affine1.set_frozen(f);
    affine2.set_frozen(f);
}

// ---------------------------------------------------------------------------
// MappingMLP
// ---------------------------------------------------------------------------

MappingMLP MappingMLP::create(int latent_dim, int depth, Rng& rng) {
    MappingMLP m;
    for (int i = 0; i < depth; ++i) m.layers.push_back(DenseLayer::create(latent_dim, latent_dim, rng, 2.0f));
    return m;
}

TensorF MappingMLP::forward(const TensorF& z) const {
    TensorF h = z;
    for (const auto& layer : layers) h = leaky_relu(layer.forward(h), kLeakySlope);
    return h;
}

void MappingMLP::visit(const std::string& prefix, const ParamVisitor& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i)
        layers[i].visit(prefix + "/fc" + std::to_string(i), fn);
}

void MappingMLP::set_frozen(bool f) {
    for (auto& layer : layers) layer.set_frozen(f);
}

}  // namespace adafm
