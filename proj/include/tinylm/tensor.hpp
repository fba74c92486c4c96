#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tinylm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_to_string(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until something accumulates into it
    bool requires_grad = false;
};

// Dense row-major float32 array with shared ownership. Values are treated as
// immutable once an operation has produced them; only the gradient buffer
// (and parameter updates through mutable_data) change afterwards.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    static Tensor scalar(float value);
    // Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<float> values);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    // Negative axes count from the end.
    std::size_t size(int axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const float> data() const { return impl_->data; }
    std::span<float> mutable_data() { return impl_->data; }
    float item() const;

    bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool value);
    bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
    // Allocates a zero buffer on first access.
    std::span<float> grad() const;
    void zero_grad();

    // Copy of the values without any gradient history.
    Tensor detach() const;

    const TensorImpl* id() const noexcept { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of differentiable operations. Operations append themselves
// while a TapeScope is active, so recording order is a topological order and a
// reverse sweep visits each node once after all of its consumers.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };

    void record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);
    void backward(const Tensor& loss);
    void clear() noexcept { nodes_.clear(); }
    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }

private:
    std::vector<Node> nodes_;
};

Tape* active_tape() noexcept;

class TapeScope {
public:
    explicit TapeScope(Tape& tape) noexcept;
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Suspends recording, e.g. for evaluation passes.
class NoGradScope {
public:
    NoGradScope() noexcept;
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

}  // namespace tinylm
