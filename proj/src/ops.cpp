#include "tinylm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "gemm.hpp"
#include "tinylm/error.hpp"

namespace tinylm {

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (active_tape() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void record(std::vector<Tensor> inputs, Tensor& out, Tape::BackwardFn fn) {
    out.set_requires_grad(true);
    active_tape()->record(std::move(inputs), out, std::move(fn));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::dimension, std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                                       shape_to_string(b.shape()) + " differ");
    }
}

// Numpy broadcasting of two batch shapes (aligned from the right).
Shape broadcast_shapes(const Shape& a, const Shape& b, const Shape& full_a, const Shape& full_b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
        const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
        if (da != db && da != 1 && db != 1) {
            fail(ErrorKind::dimension, "matmul batch dimensions of " + shape_to_string(full_a) + " and " +
                                           shape_to_string(full_b) + " are not broadcastable");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// For every position of `out` (row-major), the linear index into a tensor of
// shape `src` that broadcasts to it.
std::vector<std::size_t> broadcast_offsets(const Shape& src, const Shape& out) {
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
        const std::size_t oi = i + r - src.size();
        stride[oi] = src[i] == 1 ? 0 : s;
        s *= src[i];
    }
    const std::size_t total = shape_numel(out);
    std::vector<std::size_t> offsets(total);
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t n = 0; n < total; ++n) {
        offsets[n] = off;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out[d]) {
                off += stride[d];
                break;
            }
            off -= stride[d] * (out[d] - 1);
            idx[d] = 0;
        }
    }
    return offsets;
}

double standard_normal_cdf(double x) {
    return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
}

}  // namespace

Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    if (name == "gelu_new") return Activation::gelu_new;
    if (name == "silu") return Activation::silu;
    fail(ErrorKind::config, "unknown activation '" + std::string(name) + "' (expected relu, gelu, gelu_new or silu)");
}

std::string_view to_string(Activation kind) noexcept {
    switch (kind) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::gelu_new: return "gelu_new";
        case Activation::silu: return "silu";
    }
    return "?";
}

namespace {
constexpr double kGeluNewCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

float activation_value(Activation kind, float x) noexcept {
    switch (kind) {
        case Activation::relu: return x > 0.0f ? x : 0.0f;
        case Activation::gelu: return static_cast<float>(x * standard_normal_cdf(x));
        case Activation::gelu_new: {
            const float inner = static_cast<float>(kSqrt2OverPi) * (x + static_cast<float>(kGeluNewCoeff) * x * x * x);
            return 0.5f * x * (1.0f + std::tanh(inner));
        }
        case Activation::silu: return x / (1.0f + std::exp(-x));
    }
    return 0.0f;
}

float activation_derivative(Activation kind, float x) noexcept {
    switch (kind) {
        case Activation::relu: return x > 0.0f ? 1.0f : 0.0f;
        case Activation::gelu: {
            const double pdf = std::exp(-0.5 * double(x) * x) / std::sqrt(2.0 * std::numbers::pi);
            return static_cast<float>(standard_normal_cdf(x) + x * pdf);
        }
        case Activation::gelu_new: {
            const float c = static_cast<float>(kSqrt2OverPi);
            const float a = static_cast<float>(kGeluNewCoeff);
            const float t = std::tanh(c * (x + a * x * x * x));
            return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * c * (1.0f + 3.0f * a * x * x);
        }
        case Activation::silu: {
            const float s = 1.0f / (1.0f + std::exp(-x));
            return s * (1.0f + x * (1.0f - s));
        }
    }
    return 0.0f;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<float> v(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ad[i] + bd[i];
    Tensor out(a.shape(), std::move(v));
    if (should_record({&a, &b})) {
        record({a, b}, out, [a, b, out] {
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<float> v(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ad[i] * bd[i];
    Tensor out(a.shape(), std::move(v));
    if (should_record({&a, &b})) {
        record({a, b}, out, [a, b, out] {
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                auto bd = b.data();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bd[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                auto ad = a.data();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ad[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, float factor) {
    std::vector<float> v(x.data().begin(), x.data().end());
    for (auto& e : v) e *= factor;
    Tensor out(x.shape(), std::move(v));
    if (should_record({&x})) {
        record({x}, out, [x, out, factor] {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
        });
    }
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.rank() == 0 || bias.size(0) != x.size(-1)) {
        fail(ErrorKind::dimension, "add_bias: bias " + shape_to_string(bias.shape()) +
                                       " does not match last axis of " + shape_to_string(x.shape()));
    }
    const std::size_t d = bias.numel();
    const std::size_t rows = x.numel() / std::max<std::size_t>(d, 1);
    std::vector<float> v(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) v[r * d + j] += bd[j];
    }
    Tensor out(x.shape(), std::move(v));
    if (should_record({&x, &bias})) {
        record({x, bias}, out, [x, bias, out, rows, d] {
            auto go = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
                }
            }
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        fail(ErrorKind::dimension, "matmul needs operands of rank >= 2, got " + shape_to_string(a.shape()) +
                                       " and " + shape_to_string(b.shape()));
    }
    const std::size_t m = a.size(-2);
    const std::size_t k = a.size(-1);
    const std::size_t n = b.size(-1);
    if (b.size(-2) != k) {
        fail(ErrorKind::dimension, "matmul inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                                       shape_to_string(b.shape()));
    }
    const Shape abatch(a.shape().begin(), a.shape().end() - 2);
    const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    const Shape obatch = broadcast_shapes(abatch, bbatch, a.shape(), b.shape());
    Shape oshape = obatch;
    oshape.push_back(m);
    oshape.push_back(n);

    const std::size_t batches = shape_numel(obatch);
    // A shared right-hand matrix lets the whole left operand run as one GEMM.
    const bool folded = shape_numel(bbatch) == 1 && abatch == obatch;
    auto aoff = std::make_shared<std::vector<std::size_t>>();
    auto boff = std::make_shared<std::vector<std::size_t>>();
    if (!folded) {
        *aoff = broadcast_offsets(abatch, obatch);
        *boff = broadcast_offsets(bbatch, obatch);
    }

    std::vector<float> c(batches * m * n, 0.0f);
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    if (folded) {
        detail::gemm_nn(batches * m, n, k, ap, bp, c.data());
    } else {
        for (std::size_t bi = 0; bi < batches; ++bi) {
            detail::gemm_nn(m, n, k, ap + (*aoff)[bi] * m * k, bp + (*boff)[bi] * k * n, c.data() + bi * m * n);
        }
    }
    Tensor out(std::move(oshape), std::move(c));
    if (should_record({&a, &b})) {
        record({a, b}, out, [a, b, out, m, n, k, batches, folded, aoff, boff] {
            const float* go = out.grad().data();
            const float* ap = a.data().data();
            const float* bp = b.data().data();
            if (a.requires_grad()) {
                float* ga = a.grad().data();
                if (folded) {
                    detail::gemm_nt(batches * m, k, n, go, bp, ga);
                } else {
                    for (std::size_t bi = 0; bi < batches; ++bi) {
                        detail::gemm_nt(m, k, n, go + bi * m * n, bp + (*boff)[bi] * k * n, ga + (*aoff)[bi] * m * k);
                    }
                }
            }
            if (b.requires_grad()) {
                float* gb = b.grad().data();
                if (folded) {
                    detail::gemm_tn(k, n, batches * m, ap, go, gb);
                } else {
                    for (std::size_t bi = 0; bi < batches; ++bi) {
                        detail::gemm_tn(k, n, m, ap + (*aoff)[bi] * m * k, go + bi * m * n, gb + (*boff)[bi] * k * n);
                    }
                }
            }
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t r = x.rank();
    if (axes.size() != r) {
        fail(ErrorKind::dimension, "permute: " + std::to_string(axes.size()) + " axes for shape " +
                                       shape_to_string(x.shape()));
    }
    std::vector<bool> seen(r, false);
    for (auto ax : axes) {
        if (ax >= r || seen[ax]) fail(ErrorKind::dimension, "permute: invalid axis list");
        seen[ax] = true;
    }
    const Shape& in = x.shape();
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
    Shape oshape(r);
    std::vector<std::size_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        oshape[i] = in[axes[i]];
        stride[i] = in_stride[axes[i]];
    }
    const std::size_t total = x.numel();
    auto src = std::make_shared<std::vector<std::size_t>>(total);
    {
        std::vector<std::size_t> idx(r, 0);
        std::size_t off = 0;
        for (std::size_t n = 0; n < total; ++n) {
            (*src)[n] = off;
            for (std::size_t d = r; d-- > 0;) {
                if (++idx[d] < oshape[d]) {
                    off += stride[d];
                    break;
                }
                off -= stride[d] * (oshape[d] - 1);
                idx[d] = 0;
            }
        }
    }
    std::vector<float> v(total);
    auto xd = x.data();
    for (std::size_t n = 0; n < total; ++n) v[n] = xd[(*src)[n]];
    Tensor out(std::move(oshape), std::move(v));
    if (should_record({&x})) {
        record({x}, out, [x, out, src] {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::size_t n = 0; n < go.size(); ++n) gx[(*src)[n]] += go[n];
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() < 2) fail(ErrorKind::dimension, "transpose needs rank >= 2, got " + shape_to_string(x.shape()));
    std::vector<std::size_t> axes(x.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        fail(ErrorKind::dimension, "reshape " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
    }
    Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
    if (should_record({&x})) {
        record({x}, out, [x, out] {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() == 0 || x.size(-1) == 0) {
        fail(ErrorKind::dimension, "softmax_rows needs a non-empty last axis, got " + shape_to_string(x.shape()));
    }
    const std::size_t n = x.size(-1);
    const std::size_t rows = x.numel() / n;
    std::vector<float> y(x.numel());
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = xd.data() + r * n;
        float* yr = y.data() + r * n;
        const float mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            total += yr[j];
        }
        const float inv = static_cast<float>(1.0 / total);
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    Tensor out(x.shape(), std::move(y));
    if (should_record({&x})) {
        record({x}, out, [x, out, n, rows] {
            auto go = out.grad();
            auto yd = out.data();
            auto gx = x.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const float* g = go.data() + r * n;
                const float* yr = yd.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += double(g[j]) * yr[j];
                const float fdot = static_cast<float>(dot);
                float* gxr = gx.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) gxr[j] += yr[j] * (g[j] - fdot);
            }
        });
    }
    return out;
}

Tensor activation(const Tensor& x, Activation kind) {
    std::vector<float> v(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = activation_value(kind, xd[i]);
    Tensor out(x.shape(), std::move(v));
    if (should_record({&x})) {
        record({x}, out, [x, out, kind] {
            auto go = out.grad();
            auto xd = x.data();
            auto gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * activation_derivative(kind, xd[i]);
        });
    }
    return out;
}

Tensor tanh(const Tensor& x) {
    std::vector<float> v(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(xd[i]);
    Tensor out(x.shape(), std::move(v));
    if (should_record({&x})) {
        record({x}, out, [x, out] {
            auto go = out.grad();
            auto yd = out.data();
            auto gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (1.0f - yd[i] * yd[i]);
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (x.rank() == 0 || x.size(-1) == 0) {
        fail(ErrorKind::dimension, "layer_norm needs a non-empty last axis, got " + shape_to_string(x.shape()));
    }
    const std::size_t d = x.size(-1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        fail(ErrorKind::dimension, "layer_norm: gamma " + shape_to_string(gamma.shape()) + " / beta " +
                                       shape_to_string(beta.shape()) + " do not match last axis " + std::to_string(d));
    }
    const std::size_t rows = x.numel() / d;
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto rstd = std::make_shared<std::vector<float>>(rows);
    std::vector<float> y(x.numel());
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = static_cast<float>(inv);
        for (std::size_t j = 0; j < d; ++j) {
            const float h = static_cast<float>((xr[j] - mu) * inv);
            (*xhat)[r * d + j] = h;
            y[r * d + j] = gd[j] * h + bd[j];
        }
    }
    Tensor out(x.shape(), std::move(y));
    if (should_record({&x, &gamma, &beta})) {
        record({x, gamma, beta}, out, [x, gamma, beta, out, xhat, rstd, d, rows] {
            auto go = out.grad();
            auto gd = gamma.data();
            if (gamma.requires_grad() || beta.requires_grad()) {
                auto ggam = gamma.grad();
                auto gbet = beta.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        ggam[j] += go[r * d + j] * (*xhat)[r * d + j];
                        gbet[j] += go[r * d + j];
                    }
                }
            }
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0;
                    double mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = double(go[r * d + j]) * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * (*xhat)[r * d + j];
                    }
                    mean_dh /= static_cast<double>(d);
                    mean_dh_h /= static_cast<double>(d);
                    const double inv = (*rstd)[r];
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = double(go[r * d + j]) * gd[j];
                        gx[r * d + j] += static_cast<float>(inv * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h));
                    }
                }
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, float p, bool training, Rng& rng) {
    if (!(p >= 0.0f) || p >= 1.0f) {
        fail(ErrorKind::config, "dropout probability must lie in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0f) return x;
    const float keep_scale = 1.0f / (1.0f - p);
    auto mask = std::make_shared<std::vector<float>>(x.numel());
    std::vector<float> v(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float m = rng.uniform() < p ? 0.0f : keep_scale;
        (*mask)[i] = m;
        v[i] = xd[i] * m;
    }
    Tensor out(x.shape(), std::move(v));
    if (should_record({&x})) {
        record({x}, out, [x, out, mask] {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*mask)[i];
        });
    }
    return out;
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, const Shape& mask_shape, float value) {
    if (mask_shape.size() != x.rank() || shape_numel(mask_shape) != mask.size()) {
        fail(ErrorKind::dimension, "masked_fill: mask " + shape_to_string(mask_shape) + " does not fit " +
                                       shape_to_string(x.shape()));
    }
    for (std::size_t i = 0; i < mask_shape.size(); ++i) {
        if (mask_shape[i] != 1 && mask_shape[i] != x.shape()[i]) {
            fail(ErrorKind::dimension, "masked_fill: mask " + shape_to_string(mask_shape) +
                                           " does not broadcast to " + shape_to_string(x.shape()));
        }
    }
    const auto offsets = broadcast_offsets(mask_shape, x.shape());
    auto filled = std::make_shared<std::vector<std::uint8_t>>(x.numel());
    std::vector<float> v(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const std::uint8_t m = mask[offsets[i]] != 0;
        (*filled)[i] = m;
        if (m) v[i] = value;
    }
    Tensor out(x.shape(), std::move(v));
    if (should_record({&x})) {
        record({x}, out, [x, out, filled] {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                if (!(*filled)[i]) gx[i] += go[i];
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, const CrossEntropyOptions& options) {
    if (logits.rank() != 2) {
        fail(ErrorKind::dimension, "cross_entropy expects [N, V] logits, got " + shape_to_string(logits.shape()));
    }
    const std::size_t rows = logits.size(0);
    const std::size_t vocab = logits.size(1);
    if (labels.size() != rows) {
        fail(ErrorKind::dimension, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                       std::to_string(rows) + " rows");
    }
    if (!options.class_weights.empty() && options.class_weights.size() != vocab) {
        fail(ErrorKind::dimension, "cross_entropy: class weight count does not match the number of classes");
    }
    auto ld = logits.data();
    auto lse = std::make_shared<std::vector<double>>(rows, 0.0);
    double total = 0.0;
    double weight_sum = 0.0;
    std::size_t supervised = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int label = labels[r];
        if (label == options.ignore_index) continue;
        if (label < 0 || static_cast<std::size_t>(label) >= vocab) {
            fail(ErrorKind::dimension, "cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                           std::to_string(vocab) + ")");
        }
        const float* row = ld.data() + r * vocab;
        const float mx = *std::max_element(row, row + vocab);
        double s = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) s += std::exp(double(row[j]) - mx);
        (*lse)[r] = mx + std::log(s);
        const double w = options.class_weights.empty() ? 1.0 : options.class_weights[static_cast<std::size_t>(label)];
        total += w * ((*lse)[r] - row[label]);
        weight_sum += w;
        ++supervised;
    }
    if (supervised == 0) fail(ErrorKind::data, "no supervised positions");
    const double normalizer = options.normalizer > 0.0 ? options.normalizer : weight_sum;
    Tensor out = Tensor::scalar(static_cast<float>(total / normalizer));
    if (should_record({&logits})) {
        std::vector<int> lab(labels.begin(), labels.end());
        std::vector<float> weights(options.class_weights.begin(), options.class_weights.end());
        const int ignore = options.ignore_index;
        record({logits}, out, [logits, out, lse, lab = std::move(lab), weights = std::move(weights), ignore, normalizer,
                               vocab] {
            const double g = out.grad()[0];
            auto ld = logits.data();
            auto gl = logits.grad();
            for (std::size_t r = 0; r < lab.size(); ++r) {
                if (lab[r] == ignore) continue;
                const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(lab[r])];
                const double scale = g * w / normalizer;
                const float* row = ld.data() + r * vocab;
                float* grow = gl.data() + r * vocab;
                for (std::size_t j = 0; j < vocab; ++j) {
                    grow[j] += static_cast<float>(scale * std::exp(double(row[j]) - (*lse)[r]));
                }
                grow[lab[r]] -= static_cast<float>(scale);
            }
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& index_shape) {
    if (table.rank() != 2) {
        fail(ErrorKind::dimension, "embedding table must be [V, d], got " + shape_to_string(table.shape()));
    }
    if (shape_numel(index_shape) != ids.size()) {
        fail(ErrorKind::dimension, "embedding: index shape " + shape_to_string(index_shape) + " does not hold " +
                                       std::to_string(ids.size()) + " ids");
    }
    const std::size_t rows = table.size(0);
    const std::size_t d = table.size(1);
    std::vector<float> v(ids.size() * d);
    auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
            fail(ErrorKind::dimension, "embedding: id " + std::to_string(ids[i]) + " outside [0, " +
                                           std::to_string(rows) + ")");
        }
        std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, v.data() + i * d);
    }
    Shape oshape = index_shape;
    oshape.push_back(d);
    Tensor out(std::move(oshape), std::move(v));
    if (should_record({&table})) {
        std::vector<int> idv(ids.begin(), ids.end());
        record({table}, out, [table, out, idv = std::move(idv), d] {
            auto go = out.grad();
            auto gt = table.grad();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                float* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                const float* src = go.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    if (x.rank() != 2 || start + count > x.size(0)) {
        fail(ErrorKind::dimension, "slice_rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                       ") of " + shape_to_string(x.shape()));
    }
    const std::size_t c = x.size(1);
    auto xd = x.data();
    Tensor out(Shape{count, c}, std::vector<float>(xd.begin() + static_cast<std::ptrdiff_t>(start * c),
                                                   xd.begin() + static_cast<std::ptrdiff_t>((start + count) * c)));
    if (should_record({&x})) {
        record({x}, out, [x, out, start, c] {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[start * c + i] += go[i];
        });
    }
    return out;
}

Tensor gather2d(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols,
                std::size_t out_rows, std::size_t out_cols) {
    if (x.rank() < 2) fail(ErrorKind::dimension, "gather2d needs rank >= 2, got " + shape_to_string(x.shape()));
    const std::size_t per = out_rows * out_cols;
    if (rows.size() != per || cols.size() != per) {
        fail(ErrorKind::dimension, "gather2d: index arrays must hold out_rows * out_cols entries");
    }
    const std::size_t r_in = x.size(-2);
    const std::size_t c_in = x.size(-1);
    auto src = std::make_shared<std::vector<std::size_t>>(per);
    for (std::size_t i = 0; i < per; ++i) {
        if (rows[i] >= r_in || cols[i] >= c_in) {
            fail(ErrorKind::dimension, "gather2d: index outside " + shape_to_string(x.shape()));
        }
        (*src)[i] = rows[i] * c_in + cols[i];
    }
    const std::size_t batches = x.numel() / (r_in * c_in);
    Shape oshape(x.shape().begin(), x.shape().end() - 2);
    oshape.push_back(out_rows);
    oshape.push_back(out_cols);
    std::vector<float> v(batches * per);
    auto xd = x.data();
    for (std::size_t b = 0; b < batches; ++b) {
        const float* xb = xd.data() + b * r_in * c_in;
        for (std::size_t i = 0; i < per; ++i) v[b * per + i] = xb[(*src)[i]];
    }
    Tensor out(std::move(oshape), std::move(v));
    if (should_record({&x})) {
        record({x}, out, [x, out, src, batches, per, block = r_in * c_in] {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::size_t b = 0; b < batches; ++b) {
                float* gb = gx.data() + b * block;
                for (std::size_t i = 0; i < per; ++i) gb[(*src)[i]] += go[b * per + i];
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    Tensor out = Tensor::scalar(static_cast<float>(s));
    if (should_record({&x})) {
        record({x}, out, [x, out] {
            const float g = out.grad()[0];
            for (auto& e : x.grad()) e += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) fail(ErrorKind::dimension, "mean of an empty tensor");
    return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

}  // namespace tinylm
