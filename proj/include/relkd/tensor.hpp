#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "relkd/error.hpp"

namespace relkd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

template <typename T>
struct TensorImpl;

// One recorded operation. `id` is the global recording order; backward
// visits nodes by descending id.
template <typename T>
struct Node {
    std::uint64_t id = 0;
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    // Reads out.grad and accumulates into the grads of `inputs` that
    // require them.
    std::function<void(TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<Node<T>> node; // null for leaves and constants

    std::vector<T>& ensure_grad() {
        if (grad.empty()) {
            grad.assign(data.size(), T(0));
        }
        return grad;
    }
};

std::uint64_t next_node_id();

} // namespace detail

// Dense row-major array, optionally part of a reverse-mode graph. Copies are
// shallow: two Tensor values may share one buffer.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl<T>>()) {
        for (auto d : shape) {
            if (d == 0) {
                throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
            }
        }
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                             " values, got " + std::to_string(data.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rows() const { return impl_->shape.at(0); }
    std::size_t cols() const { return impl_->shape.back(); }

    std::span<const T> data() const { return impl_->data; }

    // Parameters are updated in place by the optimizer; results of recorded
    // operations are never mutated.
    std::span<T> mutable_data() {
        if (impl_->node) {
            throw Error("mutable_data() on a non-leaf tensor");
        }
        return impl_->data;
    }

    T item() const {
        if (numel() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        }
        return impl_->data[0];
    }

    T at(std::size_t i, std::size_t j) const { return impl_->data[i * cols() + j]; }

    bool requires_grad() const { return impl_->requires_grad; }
    bool is_leaf() const { return impl_->node == nullptr; }

    void set_requires_grad(bool on) {
        if (impl_->node) {
            throw Error("set_requires_grad() on a non-leaf tensor");
        }
        impl_->requires_grad = on;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return impl_->ensure_grad(); }
    void zero_grad() { impl_->grad.clear(); }

    // Constant copy of the values, outside any graph.
    Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

    Tensor clone(bool requires_grad) const { return Tensor(impl_->shape, impl_->data, requires_grad); }

    detail::TensorImpl<T>& impl() const { return *impl_; }
    const std::shared_ptr<detail::TensorImpl<T>>& impl_ptr() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Populates d(loss)/d(leaf) for every reachable leaf with requires_grad,
// accumulating into existing leaf grads. Intermediate grads are reset on
// every call so a graph can be replayed.
template <typename T>
void backward(const Tensor<T>& loss);

// Number of distinct recorded nodes reachable from `root`.
template <typename T>
std::size_t graph_size(const Tensor<T>& root);

} // namespace relkd
