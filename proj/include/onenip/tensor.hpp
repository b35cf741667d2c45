#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared Node. Operations in ops.hpp build
// a fresh graph on every forward pass: each result node remembers its parents
// and a closure that scatters its gradient into them. backward() walks the
// graph once in reverse topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "onenip/errors.hpp"

namespace onenip {

#ifdef ONENIP_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;

    std::vector<Scalar>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), Scalar{0});
        return grad;
    }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

// Disables graph recording in its scope (evaluation and frozen backbones).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, Scalar fill = Scalar{0}, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(Scalar v, bool requires_grad = false) { return Tensor(Shape{}, v, requires_grad); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const Scalar> data() const { return node_->data; }
    // Direct writes are for parameters, optimizers and test harnesses only.
    std::span<Scalar> mutable_data() { return node_->data; }
    const std::vector<Scalar>& values() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const Scalar> grad() const { return node_->grad; }
    std::span<Scalar> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    Scalar item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    Scalar at(std::size_t flat) const { return node_->data.at(flat); }

    // A leaf holding a copy of the values, cut off from the graph.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    // Releases the recorded graph behind this tensor so intermediates can be freed.
    void drop_graph() {
        node_->parents.clear();
        node_->backward = nullptr;
    }

    void backward() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    // Builds an op result. Records parents and the backward closure only when
    // recording is on and at least one input needs a gradient.
    template <class Backward>
    static Tensor make_result(Shape shape, std::vector<Scalar> data, std::initializer_list<const Tensor*> inputs,
                              Backward&& backward_fn);

    static Tensor make_result(Shape shape, std::vector<Scalar> data, const std::vector<Tensor>& inputs,
                              std::function<void(detail::Node&)> backward_fn);

private:
    std::shared_ptr<detail::Node> node_;
};

template <class Backward>
Tensor Tensor::make_result(Shape shape, std::vector<Scalar> data, std::initializer_list<const Tensor*> inputs,
                           Backward&& backward_fn) {
    Tensor out(std::move(shape), std::move(data));
    bool needs = false;
    if (detail::grad_enabled)
        for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    if (!needs) return out;
    detail::Node* self = out.node();
    self->requires_grad = true;
    for (const Tensor* t : inputs) self->parents.push_back(t->node_);
    self->backward = [self, fn = std::forward<Backward>(backward_fn)]() mutable { fn(*self); };
    return out;
}

inline Tensor Tensor::make_result(Shape shape, std::vector<Scalar> data, const std::vector<Tensor>& inputs,
                                  std::function<void(detail::Node&)> backward_fn) {
    Tensor out(std::move(shape), std::move(data));
    bool needs = false;
    if (detail::grad_enabled)
        for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (!needs) return out;
    detail::Node* self = out.node();
    self->requires_grad = true;
    for (const Tensor& t : inputs) self->parents.push_back(t.node_);
    self->backward = [self, fn = std::move(backward_fn)]() { fn(*self); };
    return out;
}

inline void Tensor::backward() const {
    if (numel() != 1)
        throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    if (!requires_grad()) return;

    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += Scalar{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward();
    }
}

// Free-function form used by training code: loss.backward().
inline void backward(const Tensor& loss) { loss.backward(); }

}  // namespace onenip
