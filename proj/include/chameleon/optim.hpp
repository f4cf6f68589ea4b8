#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "chameleon/errors.hpp"
#include "chameleon/tensor.hpp"

namespace chameleon {

struct AdamWConfig {
    Real lr = 1e-3;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    Real weight_decay = 0.01;
};

struct AdamState {
    std::vector<Real> m;
    std::vector<Real> v;
    std::size_t step = 0;
};

// One AdamW update with decoupled weight decay:
//   theta <- theta - lr * (wd * theta + m_hat / (sqrt(v_hat) + eps))
inline void adamw_step(std::span<Real> theta, std::span<const Real> grad, AdamState& state, const AdamWConfig& cfg) {
    if (theta.size() != grad.size()) {
        throw DimensionError("adamw_step: " + std::to_string(theta.size()) + " parameters vs " +
                             std::to_string(grad.size()) + " gradients");
    }
    if (state.m.empty()) {
        state.m.assign(theta.size(), 0.0);
        state.v.assign(theta.size(), 0.0);
    }
    if (state.m.size() != theta.size()) throw DimensionError("adamw_step: optimizer state does not match parameter");
    ++state.step;
    const Real bc1 = 1.0 - std::pow(cfg.beta1, static_cast<Real>(state.step));
    const Real bc2 = 1.0 - std::pow(cfg.beta2, static_cast<Real>(state.step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const Real m_hat = state.m[i] / bc1;
        const Real v_hat = state.v[i] / bc2;
        theta[i] -= cfg.lr * (cfg.weight_decay * theta[i] + m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
}

// Scales every gradient so their joint L2 norm is at most max_norm. Returns
// the norm before clipping.
inline Real clip_grad_norm(std::vector<Tensor>& params, Real max_norm) {
    Real sq = 0.0;
    for (const Tensor& p : params)
        for (Real g : p.grad()) sq += g * g;
    const Real norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const Real s = max_norm / (norm + 1e-12);
        for (Tensor& p : params)
            for (Real& g : p.mutable_grad()) g *= s;
    }
    return norm;
}

// AdamW over a fixed list of trainable tensors. Tensors without a gradient
// buffer after backward are treated as having zero gradient.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg), states_(params_.size()) {
        for (const Tensor& p : params_) {
            if (!p.requires_grad()) throw Error("AdamW given a tensor that does not require grad");
        }
    }

    void step() {
        std::vector<Real> zeros;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            std::span<const Real> g = p.grad();
            if (g.empty()) {
                zeros.assign(p.numel(), 0.0);
                g = zeros;
            }
            adamw_step(p.data(), g, states_[i], cfg_);
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    std::vector<Tensor>& params() { return params_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<AdamState> states_;
};

}  // namespace chameleon
