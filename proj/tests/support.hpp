#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "chameleon/tensor.hpp"

namespace testing_support {

using chameleon::Real;
using chameleon::Tensor;

// Worst relative error |analytic - numeric| / (|numeric| + 1e-8) over every
// element of `param`, with central differences of step h. `loss` must build a
// fresh graph on each call.
inline Real max_fd_error(const std::function<Tensor()>& loss, Tensor param, Real h = 1e-5) {
    param.zero_grad();
    Tensor l = loss();
    chameleon::backward(l);
    std::vector<Real> analytic(param.numel(), 0.0);
    if (param.has_grad()) analytic.assign(param.grad().begin(), param.grad().end());
    param.zero_grad();

    Real worst = 0.0;
    chameleon::NoGradGuard guard;
    auto data = param.data();
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const Real keep = data[i];
        data[i] = keep + h;
        const Real up = loss().item();
        data[i] = keep - h;
        const Real down = loss().item();
        data[i] = keep;
        const Real numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8));
    }
    return worst;
}

inline Tensor random_tensor(chameleon::Shape shape, std::mt19937_64& rng, Real scale = 1.0, bool trainable = false) {
    Tensor t = Tensor::normal(std::move(shape), 0.0, scale, rng);
    t.set_requires_grad(trainable);
    return t;
}

inline Real max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
    Real m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace testing_support
