#include "tinylm/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "tinylm/error.hpp"

namespace tinylm {

namespace {

thread_local Tape* g_active_tape = nullptr;

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<TensorImpl>()) {
    const auto n = shape_numel(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
        fail(ErrorKind::dimension, "tensor shape " + shape_to_string(shape) + " does not hold " +
                                       std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

Tensor Tensor::scalar(float value) {
    return Tensor(Shape{}, std::vector<float>{value});
}

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
    Tensor t(std::move(shape), std::move(values));
    t.impl_->requires_grad = true;
    return t;
}

std::size_t Tensor::size(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        fail(ErrorKind::dimension, "axis " + std::to_string(axis) + " out of range for shape " +
                                       shape_to_string(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(a)];
}

float Tensor::item() const {
    if (numel() != 1) {
        fail(ErrorKind::dimension, "item() on tensor of shape " + shape_to_string(shape()));
    }
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
}

std::span<float> Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
    return Tensor(impl_->shape, impl_->data);
}

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        fail(ErrorKind::dimension, "backward() needs a scalar loss, got shape " +
                                       (loss.defined() ? shape_to_string(loss.shape()) : "<undefined>"));
    }
    if (!loss.requires_grad()) {
        fail(ErrorKind::dimension, "backward() on a loss that was not recorded on the tape");
    }
    loss.grad()[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output.has_grad()) it->backward();
    }
}

Tape* active_tape() noexcept {
    return g_active_tape;
}

TapeScope::TapeScope(Tape& tape) noexcept : previous_(g_active_tape) {
    g_active_tape = &tape;
}

TapeScope::~TapeScope() {
    g_active_tape = previous_;
}

NoGradScope::NoGradScope() noexcept : previous_(g_active_tape) {
    g_active_tape = nullptr;
}

NoGradScope::~NoGradScope() {
    g_active_tape = previous_;
}

}  // namespace tinylm
