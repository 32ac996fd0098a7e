// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <span>

#include "adafm/ops.hpp"
#include "adafm/rng.hpp"
#include "oracles.hpp"

using adafm::Shape;
using adafm::Tensor;
using adafm::TensorD;
using adafm::TensorF;

TEST_CASE("tensor invariants") {
    auto t = TensorF::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.shape() == Shape{2, 3});
    CHECK_THROWS_AS(TensorF::leaf({2, 2}, {1, 2, 3}), adafm::ShapeError);
    CHECK_THROWS_AS(t.item(), adafm::ShapeError);
}

TEST_CASE("conv2d identity kernel") {
    auto x = TensorF::leaf({1, 1, 1, 1}, {2.0f});
    auto w = TensorF::leaf({1, 1, 1, 1}, {1.0f});
    auto y = adafm::conv2d(x, w, 1, 0);
    CHECK(y.values()[0] == doctest::Approx(2.0f));
}

TEST_CASE("conv2d zero input gives zero output") {
    adafm::Rng rng(11);
    auto x = TensorF::zeros({2, 3, 5, 5});
    auto w = TensorF::leaf({4, 3, 3, 3}, oracles::random_vec<float>(rng, 4 * 3 * 3 * 3));
    auto y = adafm::conv2d(x, w, 1, 1);
    for (float v : y.values()) CHECK(v == 0.0f);
}

TEST_CASE("conv2d matches nested-loop oracle") {
    adafm::Rng rng(7);
    auto xv = oracles::random_vec<double>(rng, 1 * 2 * 5 * 5);
    auto wv = oracles::random_vec<double>(rng, 3 * 2 * 3 * 3);
    auto x = TensorD::leaf({1, 2, 5, 5}, xv);
    auto w = TensorD::leaf({3, 2, 3, 3}, wv);
    for (const auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
        auto y = adafm::conv2d(x, w, stride, pad);
        auto ref = oracles::conv2d_loop(xv, 1, 2, 5, 5, wv, 3, 3, 3, stride, pad);
        REQUIRE(y.values().size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(oracles::rel_err(y.values()[i], ref[i]) < 1e-6);
    }
}

TEST_CASE("conv2d shape errors") {
    auto x = TensorF::zeros({1, 2, 5, 5});
    auto w = TensorF::zeros({3, 4, 3, 3});
    CHECK_THROWS_AS(adafm::conv2d(x, w, 1, 0), adafm::ShapeError);
    auto w2 = TensorF::zeros({3, 2, 7, 7});
    CHECK_THROWS_AS(adafm::conv2d(x, w2, 1, 0), adafm::ShapeError);
}

TEST_CASE("upsample_nearest2x block replication and gradient") {
    auto x = TensorF::leaf({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    auto y = adafm::upsample_nearest2x(x);
    const std::vector<float> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    CHECK(y.values() == want);

    adafm::backward(adafm::sum_all(y));
    for (float g : x.grad()) CHECK(g == doctest::Approx(4.0f));

    CHECK_THROWS_AS(adafm::upsample_nearest2x(TensorF::zeros({2, 2})), adafm::ShapeError);
}

TEST_CASE("upsample forward/backward matches loop oracle") {
    adafm::Rng rng(13);
    auto xv = oracles::random_vec<double>(rng, 2 * 3 * 4 * 4);
    auto x = TensorD::leaf({2, 3, 4, 4}, xv, true);
    auto y = adafm::upsample_nearest2x(x);
    auto ref = oracles::upsample2x_loop(xv, 2, 3, 4, 4);
    CHECK(y.values() == ref);

    // Backward against finite differences of a random projection.
    auto pv = oracles::random_vec<double>(rng, ref.size());
    auto p = TensorD::leaf(y.shape(), pv);
    auto loss = adafm::sum_all(adafm::mul(y, p));
    adafm::backward(loss);
    auto f = [&](const std::vector<double>& in) {
        auto up = oracles::upsample2x_loop(in, 2, 3, 4, 4);
        double acc = 0;
        for (std::size_t i = 0; i < up.size(); ++i) acc += up[i] * pv[i];
        return acc;
    };
    adafm::Rng pick(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto i = static_cast<std::size_t>(pick.below(xv.size()));
        const double fd = oracles::central_fd<double>(f, xv, i, 1e-5);
        CHECK(oracles::rel_err(x.grad()[i], fd) < 1e-6);
    }
}

TEST_CASE("backward basics") {
    auto x = TensorF::leaf({3}, {1, 2, 3}, true);
    auto loss = adafm::sum_all(x);
    adafm::backward(loss);
    CHECK(x.grad() == std::vector<float>{1, 1, 1});

    CHECK_THROWS_AS(adafm::backward(loss), adafm::GraphError);  // no double invocation

    auto y = TensorF::leaf({2}, {1, 2}, true);
    auto l2 = adafm::sum_all(adafm::mul(y, y));
    adafm::backward(l2);
    CHECK(y.grad()[0] == doctest::Approx(2.0f));
    CHECK(y.grad()[1] == doctest::Approx(4.0f));

    CHECK_THROWS_AS(adafm::backward(adafm::mul(y, y)), adafm::GraphError);  // non-scalar
}

TEST_CASE("gradient accumulates across backward calls on separate graphs") {
    auto x = TensorF::leaf({2}, {3, 4}, true);
    adafm::backward(adafm::sum_all(x));
    adafm::backward(adafm::sum_all(adafm::scale(x, 2.0f)));
    CHECK(x.grad() == std::vector<float>{3, 3});
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
}

// Builds a two-conv network with dense readout and checks every parameter
// gradient against central finite differences in double precision.
TEST_CASE("two-layer conv net gradients match finite differences") {
    adafm::Rng rng(2024);
    const int n = 2, ci = 2, h = 6, w = 6;
    auto xv = oracles::random_vec<double>(rng, static_cast<std::size_t>(n) * ci * h * w);
    auto w1v = oracles::random_vec<double>(rng, 3 * ci * 3 * 3, -0.5, 0.5);
    auto w2v = oracles::random_vec<double>(rng, 2 * 3 * 3 * 3, -0.5, 0.5);
    auto dv = oracles::random_vec<double>(rng, 2 * 6 * 6 * 1, -0.3, 0.3);

    auto forward = [&](const std::vector<double>& w1_, const std::vector<double>& w2_,
                       const std::vector<double>& d_) {
        auto x = TensorD::leaf({n, ci, h, w}, xv);
        auto w1 = TensorD::leaf({3, ci, 3, 3}, w1_, true);
        auto w2 = TensorD::leaf({2, 3, 3, 3}, w2_, true);
        auto d = TensorD::leaf({2 * 6 * 6, 1}, d_, true);
        auto h1 = adafm::leaky_relu(adafm::conv2d(x, w1, 1, 1), 0.2);
        auto h2 = adafm::leaky_relu(adafm::conv2d(h1, w2, 1, 1), 0.2);
        auto flat = adafm::reshape(h2, {n, 2 * 6 * 6});
        auto out = adafm::matmul(flat, d);
        return std::tuple{adafm::mean_all(adafm::tanh_op(out)), w1, w2, d};
    };

    auto [loss, w1, w2, d] = forward(w1v, w2v, dv);
    adafm::backward(loss);

    adafm::Rng pick(99);
    auto check_param = [&](const std::vector<double>& base, const std::vector<double>& grads,
                           int which) {
        for (int trial = 0; trial < 6; ++trial) {
            const auto i = static_cast<std::size_t>(pick.below(base.size()));
            auto f = [&](const std::vector<double>& v) {
                auto [l, a, b, c] = which == 0 ? forward(v, w2v, dv)
                                  : which == 1 ? forward(w1v, v, dv)
                                               : forward(w1v, w2v, v);
                (void)a;
                (void)b;
                (void)c;
                return l.item();
            };
            const double fd = oracles::central_fd<double>(f, base, i, 1e-4);
            CHECK(oracles::rel_err(grads[i], fd, 1e-6) < 1e-4);
        }
    };
    check_param(w1v, w1.grad(), 0);
    check_param(w2v, w2.grad(), 1);
    check_param(dv, d.grad(), 2);
}

TEST_CASE("second_order_grad_norm for a linear map equals squared norm") {
    adafm::Rng rng(5);
    auto av = oracles::random_vec<double>(rng, 6);
    auto a = TensorD::leaf({6, 1}, av);
    auto x = TensorD::leaf({1, 6}, oracles::random_vec<double>(rng, 6), true);
    auto out = adafm::sum_all(adafm::matmul(x, a));
    auto norm = adafm::second_order_grad_norm(out, x);
    double want = 0;
    for (double v : av) want += v * v;
    CHECK(norm.item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("second_order_grad_norm: constant-through-zero discriminator gives 0") {
    auto x = TensorD::leaf({1, 4}, {1, 2, 3, 4}, true);
    auto wzero = TensorD::zeros({4, 1});
    auto out = adafm::sum_all(adafm::matmul(x, wzero));
    CHECK(adafm::second_order_grad_norm(out, x).item() == doctest::Approx(0.0));
}

TEST_CASE("second_order_grad_norm rejects disconnected inputs") {
    auto x = TensorD::leaf({2}, {1, 2}, true);
    auto y = TensorD::leaf({2}, {3, 4}, true);
    auto out = adafm::sum_all(adafm::mul(y, y));
    CHECK_THROWS_AS(adafm::second_order_grad_norm(out, x), adafm::GraphError);
}

// The penalty itself must be trainable: its parameter gradient is a second
// derivative, checked against finite differences of the first-order loop.
TEST_CASE("parameter gradient of gradient-norm penalty matches finite differences") {
    adafm::Rng rng(31);
    const int in_dim = 5, hidden = 4;
    auto xv = oracles::random_vec<double>(rng, in_dim);
    auto w1v = oracles::random_vec<double>(rng, in_dim * hidden, -0.6, 0.6);
    auto w2v = oracles::random_vec<double>(rng, hidden, -0.6, 0.6);

    auto penalty_value = [&](const std::vector<double>& w1_, const std::vector<double>& w2_) {
        auto x = TensorD::leaf({1, in_dim}, xv, true);
        auto w1 = TensorD::leaf({in_dim, hidden}, w1_, true);
        auto w2 = TensorD::leaf({hidden, 1}, w2_, true);
        auto hm = adafm::tanh_op(adafm::matmul(x, w1));
        auto out = adafm::sum_all(adafm::matmul(hm, w2));
        return std::tuple{adafm::second_order_grad_norm(out, x), w1, w2};
    };

    auto [pen, w1, w2] = penalty_value(w1v, w2v);
    adafm::backward(pen);

    adafm::Rng pick(3);
    for (int trial = 0; trial < 8; ++trial) {
        const bool first = trial % 2 == 0;
        const auto& base = first ? w1v : w2v;
        const auto i = static_cast<std::size_t>(pick.below(base.size()));
        auto f = [&](const std::vector<double>& v) {
            auto [p, a, b] = first ? penalty_value(v, w2v) : penalty_value(w1v, v);
            (void)a;
            (void)b;
            return p.item();
        };
        const double fd = oracles::central_fd<double>(f, base, i, 1e-4);
        const auto& grads = first ? w1.grad() : w2.grad();
        CHECK(oracles::rel_err(grads[i], fd, 1e-6) < 1e-3);
    }
}

TEST_CASE("conv linearity") {
    adafm::Rng rng(17);
    auto xv = oracles::random_vec<float>(rng, 1 * 2 * 4 * 4);
    auto yv = oracles::random_vec<float>(rng, 1 * 2 * 4 * 4);
    auto wv = oracles::random_vec<float>(rng, 3 * 2 * 3 * 3);
    auto x = TensorF::leaf({1, 2, 4, 4}, xv);
    auto y = TensorF::leaf({1, 2, 4, 4}, yv);
    auto w = TensorF::leaf({3, 2, 3, 3}, wv);
    const float a = 1.7f, b = -0.4f;
    auto lhs = adafm::conv2d(adafm::add(adafm::scale(x, a), adafm::scale(y, b)), w, 1, 1);
    auto rhs = adafm::add(adafm::scale(adafm::conv2d(x, w, 1, 1), a),
                          adafm::scale(adafm::conv2d(y, w, 1, 1), b));
    for (std::size_t i = 0; i < lhs.values().size(); ++i)
        CHECK(std::abs(lhs.values()[i] - rhs.values()[i]) < 1e-5f);
}

TEST_CASE("forward determinism: same seed, same bits") {
    auto run = [] {
        adafm::Rng rng(404);
        auto x = TensorF::leaf({2, 3, 8, 8}, oracles::random_vec<float>(rng, 2 * 3 * 8 * 8));
        auto w = TensorF::leaf({4, 3, 3, 3}, oracles::random_vec<float>(rng, 4 * 3 * 3 * 3));
        auto y = adafm::avg_pool2x(adafm::leaky_relu(adafm::conv2d(x, w, 1, 1), 0.2f));
        return y.values();
    };
    CHECK(run() == run());
}

TEST_CASE("reductions and broadcasts are mutually adjoint") {
    adafm::Rng rng(23);
    auto m = TensorD::leaf({3, 5}, oracles::random_vec<double>(rng, 15), true);
    auto loss = adafm::sum_all(adafm::square(adafm::colsum(m)));
    adafm::backward(loss);
    auto mv = m.values();
    auto f = [&](const std::vector<double>& v) {
        double per_col[5] = {};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) per_col[j] += v[static_cast<std::size_t>(i) * 5 + j];
        double acc = 0;
        for (double c : per_col) acc += c * c;
        return acc;
    };
    for (std::size_t i = 0; i < mv.size(); ++i) {
        const double fd = oracles::central_fd<double>(f, mv, i, 1e-5);
        CHECK(oracles::rel_err(m.grad()[i], fd) < 1e-6);
    }
}
