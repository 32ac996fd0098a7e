// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "adafm/errors.hpp"

namespace adafm {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (const int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

template <typename Real>
class Tensor;

// One node of the recorded computation graph. Non-leaf nodes keep handles to
// their parents plus a closure producing per-parent gradients; the closure
// builds its result out of recorded primitives, which is what makes
// gradients themselves differentiable (needed to train through the R1
// penalty).
template <typename Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> values;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op_name = "leaf";
    bool backward_done = false;

    std::vector<Tensor<Real>> parents;
    std::function<std::vector<Tensor<Real>>(const Tensor<Real>&)> vjp;

    // Gradient buffer for leaves, populated by backward().
    std::unique_ptr<std::vector<Real>> grad;
};

// Value-semantics handle over a graph node.
template <typename Real>
class Tensor {
public:
    using Scalar = Real;

    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<Real> values, bool requires_grad = false) {
        if (numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.node_ = std::make_shared<TensorNode<Real>>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = static_cast<std::size_t>(numel(shape));
        return leaf(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
    }

    static Tensor full(Shape shape, Real value, bool requires_grad = false) {
        const auto n = static_cast<std::size_t>(numel(shape));
        return leaf(std::move(shape), std::vector<Real>(n, value), requires_grad);
    }

    static Tensor scalar(Real value) { return leaf({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return numel(node_->shape); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }

    const std::vector<Real>& values() const { return node_->values; }

    // In-place mutation of leaf storage (optimizer updates). Graphs are
    // rebuilt every step, so mutating between steps is safe.
    std::vector<Real>& mutable_values() {
        if (!node_->is_leaf) throw GraphError("mutable_values: only leaves may be mutated");
        return node_->values;
    }

    Real item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->values[0];
    }

    // Leaf-only toggle; freezing a parameter keeps backward from ever
    // computing or storing its gradient.
    void set_requires_grad(bool rg) {
        if (!node_->is_leaf) throw GraphError("set_requires_grad: only valid on leaves");
        node_->requires_grad = rg;
    }

    bool has_grad() const { return node_->grad != nullptr; }
    const std::vector<Real>& grad() const {
        if (!node_->grad) throw GraphError("grad: no gradient recorded (run backward first)");
        return *node_->grad;
    }
    void zero_grad() { node_->grad.reset(); }

    void accumulate_grad(const std::vector<Real>& g) {
        if (!node_->grad) {
            node_->grad = std::make_unique<std::vector<Real>>(g);
        } else {
            auto& buf = *node_->grad;
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
        }
    }

    // Value copy severed from the graph.
    Tensor detach() const { return leaf(shape(), values(), false); }

    TensorNode<Real>* node() const { return node_.get(); }

private:
    std::shared_ptr<TensorNode<Real>> node_;

    template <typename R>
    friend Tensor<R> make_op(Shape, std::vector<R>, const char*, std::vector<Tensor<R>>,
                             std::function<std::vector<Tensor<R>>(const Tensor<R>&)>);
};

// Records one primitive result. Parents and the vjp closure are kept only
// when a gradient can ever flow, so inference-only graphs retain nothing.
template <typename Real>
Tensor<Real> make_op(Shape shape, std::vector<Real> values, const char* op_name,
                     std::vector<Tensor<Real>> parents,
                     std::function<std::vector<Tensor<Real>>(const Tensor<Real>&)> vjp) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    Tensor<Real> t;
    t.node_ = std::make_shared<TensorNode<Real>>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = rg;
    t.node_->is_leaf = false;
    t.node_->op_name = op_name;
    if (rg) {
        t.node_->parents = std::move(parents);
        t.node_->vjp = std::move(vjp);
    }
    return t;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace adafm
