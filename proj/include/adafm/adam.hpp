// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adafm/tensor.hpp"

namespace adafm {

template <typename Real>
struct AdamConfig {
    Real lr = Real(1e-4);
    Real beta1 = Real(0.0);
    Real beta2 = Real(0.99);
    Real eps = Real(1e-8);
};

template <typename Real>
struct AdamSlot {
    std::vector<Real> m, v;
    long step = 0;
};

template <typename Real>
using NamedTensor = std::pair<std::string, Tensor<Real>>;

// Adam with bias correction. State is allocated lazily per parameter name,
// so tensors outside the trainable set never get moment buffers.
template <typename Real>
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig<Real> cfg = {}) : cfg_(cfg) {}

    const AdamConfig<Real>& config() const { return cfg_; }

    // Applies one update to every parameter that has a gradient. Parameters
    // without a recorded gradient are skipped (e.g. gated-off modulation).
    void step(std::span<const NamedTensor<Real>> params) {
        for (const auto& [name, tensor] : params) {
            if (!tensor.has_grad()) continue;
            update_one(name, tensor);
        }
    }

    void step_one(const std::string& name, const Tensor<Real>& tensor) {
        if (!tensor.has_grad()) return;
        update_one(name, tensor);
    }

    bool has_state(const std::string& name) const { return slots_.count(name) > 0; }
    std::size_t state_count() const { return slots_.size(); }

    const std::map<std::string, AdamSlot<Real>>& slots() const { return slots_; }
    std::map<std::string, AdamSlot<Real>>& slots() { return slots_; }

private:
    void update_one(const std::string& name, const Tensor<Real>& tensor) {
        const auto& g = tensor.grad();
        for (const Real gi : g)
            if (!std::isfinite(gi))
                throw NumericError("adam: non-finite gradient in parameter '" + name + "'");
        auto& slot = slots_[name];
        if (slot.m.empty()) {
            slot.m.assign(g.size(), Real(0));
            slot.v.assign(g.size(), Real(0));
        }
        slot.step += 1;
        const Real c1 = Real(1) - std::pow(cfg_.beta1, static_cast<Real>(slot.step));
        const Real c2 = Real(1) - std::pow(cfg_.beta2, static_cast<Real>(slot.step));
        auto& values = const_cast<Tensor<Real>&>(tensor).mutable_values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            slot.m[i] = cfg_.beta1 * slot.m[i] + (Real(1) - cfg_.beta1) * g[i];
            slot.v[i] = cfg_.beta2 * slot.v[i] + (Real(1) - cfg_.beta2) * g[i] * g[i];
            const Real m_hat = slot.m[i] / c1;
            const Real v_hat = slot.v[i] / c2;
            values[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
        }
    }

    AdamConfig<Real> cfg_;
    std::map<std::string, AdamSlot<Real>> slots_;
};

}  // namespace adafm
