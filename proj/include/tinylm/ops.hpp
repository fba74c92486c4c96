#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tinylm/rng.hpp"
#include "tinylm/tensor.hpp"

// Differentiable operations. Each one records itself on the active tape when
// at least one input requires a gradient.
namespace tinylm {

enum class Activation { relu, gelu, gelu_new, silu };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation kind) noexcept;

// Scalar forms shared by the tensor op and by tests.
float activation_value(Activation kind, float x) noexcept;
float activation_derivative(Activation kind, float x) noexcept;

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
// Adds a vector along the last axis.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// [..., m, k] x [..., k, n] with numpy-style broadcasting of the batch axes.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);

Tensor softmax_rows(const Tensor& x);
Tensor activation(const Tensor& x, Activation kind);
Tensor tanh(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor dropout(const Tensor& x, float p, bool training, Rng& rng);

// Writes `value` wherever mask is non-zero. The mask has the same rank as x;
// each of its extents equals x's or is 1 (broadcast).
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, const Shape& mask_shape,
                   float value);

inline constexpr int kIgnoreIndex = -100;

struct CrossEntropyOptions {
    int ignore_index = kIgnoreIndex;
    // Optional per-class weights (length V).
    std::span<const float> class_weights{};
    // Divides the summed loss; 0 means the (weighted) count of supervised rows.
    double normalizer = 0.0;
};

// logits [N, V]; labels length N. Returns a scalar.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     const CrossEntropyOptions& options = {});

// Rows of a [V, d] table: output shape index_shape + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& index_shape);
// Rows [start, start+count) of a [R, C] tensor.
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
// out[..., i, j] = x[..., rows[i*out_cols+j], cols[i*out_cols+j]]
Tensor gather2d(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols,
                std::size_t out_rows, std::size_t out_cols);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace tinylm
