// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

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

#include "scaleforge/error.hpp"

namespace scaleforge {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

// One value in the gradient tape. Leaves have no backward function; their
// grad buffer survives across backward() calls and accumulates.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and adds into parents' grads.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

}  // namespace detail

/// Dense row-major tensor of doubles with an optional link into the
/// reverse-mode tape. Copies share the underlying node (handle semantics).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    // Direct mutation is meant for leaves (parameters, inputs).
    std::span<double> mutable_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) {
            std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
        }
    }

    double item() const {
        if (numel() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        }
        return node_->data[0];
    }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }

    /// Copy of the values, detached from the tape.
    Tensor detach() const { return from(shape(), node_->data, false); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    detail::Node& node() const { return *node_; }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op output. The backward closure is recorded only when some input
// requires grad, so inference-only graphs keep no tape.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool any = false;
    for (const auto& t : inputs) {
        any = any || t.requires_grad();
    }
    if (any) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) {
            node->parents.push_back(t.node_ptr());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss.
///
/// Gradients of leaves accumulate additively across calls; call zero_grad()
/// between steps. Interior grads are reset on every call.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        return;
    }
    // Iterative post-order DFS; the result lists every node after its parents.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(&loss.node(), 0);
    seen.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (detail::Node* n : order) {
        if (n->is_leaf()) {
            n->ensure_grad();
        } else {
            n->grad.assign(n->data.size(), 0.0);
        }
    }
    loss.node().grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!(*it)->is_leaf()) {
            (*it)->backward_fn(**it);
        }
    }
}

}  // namespace scaleforge
