#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "polyseg/common.hpp"

namespace polyseg {

struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;
};

// Dense rank-4 array (batch, channel, height, width) with a gradient slot of
// identical shape. Handle with shared storage; copies alias the same buffers.
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(Shape4 s, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw ShapeError("tensor dims must be non-negative");
        impl_->shape = s;
        impl_->value.assign(static_cast<std::size_t>(s.numel()), real(0));
        impl_->grad.assign(static_cast<std::size_t>(s.numel()), real(0));
        impl_->requires_grad = requires_grad;
    }

    static Tensor4 full(Shape4 s, real v, bool requires_grad = false) {
        Tensor4 t(s, requires_grad);
        std::fill(t.values().begin(), t.values().end(), v);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape4& shape() const { return impl_->shape; }
    std::int64_t numel() const { return impl_->shape.numel(); }

    std::vector<real>& values() { return impl_->value; }
    const std::vector<real>& values() const { return impl_->value; }
    std::vector<real>& grads() { return impl_->grad; }
    const std::vector<real>& grads() const { return impl_->grad; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }
    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), real(0)); }

    std::size_t offset(int n, int c, int y, int x) const {
        const Shape4& s = impl_->shape;
        return static_cast<std::size_t>(((n * s.c + c) * static_cast<std::int64_t>(s.h) + y) * s.w + x);
    }
    real& at(int n, int c, int y, int x) { return impl_->value[offset(n, c, y, x)]; }
    real at(int n, int c, int y, int x) const { return impl_->value[offset(n, c, y, x)]; }
    real& grad_at(int n, int c, int y, int x) { return impl_->grad[offset(n, c, y, x)]; }

    // stable identity for graph bookkeeping
    const void* id() const { return impl_.get(); }

private:
    struct Impl {
        Shape4 shape;
        std::vector<real> value;
        std::vector<real> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape: operations append themselves in execution order, and
// backward runs the recorded closures in exact reverse order. Gradients
// accumulate (+=) into input slots, so repeated backward calls without
// zero_grad stack up. Single-threaded per training context.
class Graph {
public:
    void record(const Tensor4& out, std::function<void()> backward_fn) {
        produced_.insert(out.id());
        nodes_.push_back(Node{out, std::move(backward_fn)});
    }

    bool produced(const Tensor4& t) const { return produced_.count(t.id()) != 0; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds dLoss = 1 and runs the recorded closures in reverse. Gradients of
    // tensors produced inside this graph are reset first, so every call adds
    // exactly one dLoss/dTensor into the leaves (parameters, inputs).
    void backward(Tensor4 loss) {
        if (!loss.defined() || loss.numel() != 1)
            throw GraphError("backward expects a scalar loss tensor");
        if (!produced(loss))
            throw GraphError("backward on a value that was not recorded by this graph");
        for (auto& node : nodes_) node.out.zero_grad();
        loss.grads()[0] = real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    void clear() {
        nodes_.clear();
        produced_.clear();
    }

private:
    struct Node {
        Tensor4 out;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
    std::unordered_set<const void*> produced_;
};

}  // namespace polyseg
