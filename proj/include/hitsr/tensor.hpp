#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hitsr/errors.hpp"

namespace hitsr {

using Shape = std::vector<int>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until backward touches this node
    bool requires_grad = false;
};

// Allocates the gradient buffer on first use.
std::vector<double>& grad_buf(TensorNode& node);

} // namespace detail

// Dense 64-bit tensor, row-major. A Tensor is a cheap handle to an
// immutable value node; forward operations never modify their inputs.
// mutable_values() exists for the optimizer, which updates parameters
// between training steps, never inside a recorded graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }

    std::span<const double> values() const { return node_->values; }
    std::span<const double> grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }

    double at(std::int64_t i) const { return node_->values[static_cast<size_t>(i)]; }
    double scalar_value() const;

    std::span<double> mutable_values() { return node_->values; }
    void zero_grad() { node_->grad.clear(); }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
    friend Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);
};

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);

// Reverse-mode record. While a Tape is alive (innermost on its thread),
// differentiable operations append one backward step each; backward()
// replays the record in reverse, so every recorded step runs exactly once
// and sees the output gradients of everything executed after it.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static bool recording();
    static Tape& current();

    void record(std::function<void()> step);
    void backward(const Tensor& loss);
    size_t recorded_ops() const { return steps_.size(); }

private:
    std::vector<std::function<void()>> steps_;
    Tape* prev_ = nullptr;
};

} // namespace hitsr
