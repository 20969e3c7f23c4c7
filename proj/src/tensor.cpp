#include "hitsr/tensor.hpp"

#include <sstream>

namespace hitsr {

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

std::vector<double>& grad_buf(TensorNode& node) {
    if (node.grad.empty()) node.grad.assign(node.values.size(), 0.0);
    return node.grad;
}

} // namespace detail

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(static_cast<size_t>(shape_size(shape)), 0.0);
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(static_cast<size_t>(shape_size(shape)), value);
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value) {
    return make_tensor({1}, {value}, false);
}

double Tensor::scalar_value() const {
    if (size() != 1) throw ShapeError("scalar_value() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() {
    g_active_tape = prev_;
}

bool Tape::recording() {
    return g_active_tape != nullptr;
}

Tape& Tape::current() {
    return *g_active_tape;
}

void Tape::record(std::function<void()> step) {
    steps_.push_back(std::move(step));
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    detail::grad_buf(*loss.node())[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

} // namespace hitsr
