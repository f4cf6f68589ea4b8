#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "chameleon/errors.hpp"

namespace chameleon {

using Real = double;
using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;  // 1 = keep, 0 = masked

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    bool backward_done = false;
    std::shared_ptr<Node> grad_fn;
};

// One recorded differentiable operation. `backward` receives the gradient of
// the op's output and accumulates into the gradients of its inputs.
struct Node {
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(std::span<const Real>)> backward;
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::uint64_t next_seq() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

}  // namespace detail

// Dense row-major array with optional gradient tracking. Copies share storage
// (handle semantics); use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
        for (std::size_t dim : shape) {
            if (dim == 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
        }
        impl_->data.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<Real> values) : impl_(std::make_shared<detail::TensorImpl>()) {
        if (values.size() != shape_numel(shape)) {
            throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                                 shape_str(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

    static Tensor scalar(Real value) { return Tensor(Shape{1}, value); }

    template <typename Rng>
    static Tensor normal(Shape shape, Real mean, Real stddev, Rng& rng) {
        Tensor t(std::move(shape));
        std::normal_distribution<Real> dist(mean, stddev);
        for (Real& x : t.impl_->data) x = dist(rng);
        return t;
    }

    template <typename Rng>
    static Tensor uniform(Shape shape, Real lo, Real hi, Rng& rng) {
        Tensor t(std::move(shape));
        std::uniform_real_distribution<Real> dist(lo, hi);
        for (Real& x : t.impl_->data) x = dist(rng);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    // Product of all dims but the last; the row count seen by row-wise ops.
    std::size_t rows() const { return numel() / cols(); }
    std::size_t cols() const { return impl_->shape.back(); }

    std::span<Real> data() { return impl_->data; }
    std::span<const Real> data() const { return impl_->data; }
    std::vector<Real> to_vector() const { return impl_->data; }

    Real item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    Real operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }

    // Marks a leaf as trainable (or frozen). Freezing drops any grad buffer.
    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        if (!flag) impl_->grad.clear();
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const Real> grad() const { return impl_->grad; }
    std::span<Real> mutable_grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    bool is_leaf() const { return impl_->grad_fn == nullptr; }

    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    // Same values, no graph history, not trainable.
    Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

    Tensor reshaped(Shape shape) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    // Internal plumbing for op implementations.
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

    static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void accumulate_grad(TensorImpl& t, std::span<const Real> g) {
    if (!t.requires_grad) return;
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

inline std::vector<Real>& grad_buffer(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

// Attaches a tape node to `out` when any input participates in gradients.
// Returns true when the node was recorded; callers build the closure only then.
inline bool record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                   std::function<void(std::span<const Real>)> backward) {
    if (!grad_mode()) return false;
    bool any = false;
    for (const Tensor* in : inputs) any = any || in->requires_grad();
    if (!any) return false;
    auto node = std::make_shared<Node>();
    node->seq = next_seq();
    for (const Tensor* in : inputs) node->inputs.push_back(in->impl());
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(node);
    return true;
}

inline bool needs_record(std::initializer_list<const Tensor*> inputs) {
    return grad_mode() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

}  // namespace detail

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    }
    Tensor out(std::move(shape), impl_->data);
    if (requires_grad() && detail::grad_mode()) {
        auto src = impl_;
        detail::record(out, {this}, [src](std::span<const Real> g) { detail::accumulate_grad(*src, g); });
    }
    return out;
}

// Replays the recorded graph in reverse creation order, visiting each op once.
// Intermediate gradients and graph references are released afterwards, so a
// second call on the same loss raises StaleTapeError.
inline void backward(const Tensor& loss) {
    auto root = loss.impl();
    if (root->backward_done) throw StaleTapeError("backward called twice on the same forward pass");
    if (!root->grad_fn) {
        throw StaleTapeError("loss was not produced by a tape-recorded forward pass");
    }
    if (loss.numel() != 1) throw DimensionError("backward expects a scalar loss, got " + shape_str(loss.shape()));

    std::vector<std::shared_ptr<detail::TensorImpl>> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<detail::TensorImpl*> stack{root.get()};
    std::vector<std::shared_ptr<detail::TensorImpl>> holders{root};
    seen.insert(root.get());
    order.push_back(root);
    while (!stack.empty()) {
        detail::TensorImpl* t = stack.back();
        stack.pop_back();
        if (!t->grad_fn) continue;
        for (const auto& in : t->grad_fn->inputs) {
            if (in->grad_fn && seen.insert(in.get()).second) {
                order.push_back(in);
                stack.push_back(in.get());
            }
        }
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->grad_fn->seq > b->grad_fn->seq; });

    detail::grad_buffer(*root).assign(1, 1.0);
    for (const auto& t : order) {
        if (!t->grad.empty()) t->grad_fn->backward(t->grad);
    }
    for (const auto& t : order) {
        t->grad_fn.reset();
        if (t != root) t->grad.clear();
    }
    root->grad.clear();
    root->backward_done = true;
}

}  // namespace chameleon
