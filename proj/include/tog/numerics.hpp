#pragma once

// Differentiable building blocks for the detector: 2-D convolution with an
// optional leaky-ReLU, elementwise activations and a finite-difference
// gradient checker. Everything here is a pure function of its arguments.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tog/error.hpp"
#include "tog/tensor.hpp"

namespace tog {

enum class Activation { leaky_relu, linear };

inline constexpr double kDefaultLeakySlope = 0.1;

template <typename T>
T sigmoid(T x) {
    // Split on sign so exp never overflows.
    if (x >= T(0)) {
        const T z = std::exp(-x);
        return T(1) / (T(1) + z);
    }
    const T z = std::exp(x);
    return z / (T(1) + z);
}

template <typename T>
T sigmoid_derivative(T x) {
    const T s = sigmoid(x);
    return s * (T(1) - s);
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& t) {
    BasicTensor<T> out = t;
    for (auto& v : out.data) v = sigmoid(v);
    return out;
}

template <typename T>
T leaky_relu(T x, T slope = T(kDefaultLeakySlope)) {
    return x >= T(0) ? x : slope * x;
}

/// Subgradient at exactly zero is the slope.
template <typename T>
T leaky_relu_derivative(T x, T slope = T(kDefaultLeakySlope)) {
    return x > T(0) ? T(1) : slope;
}

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& t, T slope = T(kDefaultLeakySlope)) {
    BasicTensor<T> out = t;
    for (auto& v : out.data) v = leaky_relu(v, slope);
    return out;
}

/// Convolution over a CHW input. Kernels are out_ch x in_ch x kH x kW.
template <typename T>
struct BasicConvLayer {
    BasicTensor<T> kernels;
    std::vector<T> bias;
    int stride = 1;
    int padding = 0;
    Activation activation = Activation::linear;
    T slope = T(kDefaultLeakySlope);

    int out_channels() const { return kernels.dim(0); }
    int in_channels() const { return kernels.dim(1); }
    int kernel_h() const { return kernels.dim(2); }
    int kernel_w() const { return kernels.dim(3); }

    void validate() const {
        if (kernels.rank() != 4) {
            throw ValidationError("conv layer: kernels must be rank 4, got " + dims_to_string(kernels.shape));
        }
        if (kernel_h() % 2 == 0 || kernel_w() % 2 == 0) {
            throw ValidationError("conv layer: kernel dims must be odd, got " + std::to_string(kernel_h()) + "x" +
                                  std::to_string(kernel_w()));
        }
        if (stride != 1 && stride != 2) {
            throw ValidationError("conv layer: stride must be 1 or 2, got " + std::to_string(stride));
        }
        if (padding < 0) throw ValidationError("conv layer: padding must be non-negative");
        if (bias.size() != static_cast<std::size_t>(out_channels())) {
            throw ValidationError("conv layer: bias length " + std::to_string(bias.size()) + " != out_ch " +
                                  std::to_string(out_channels()));
        }
        if (!(slope > T(0) && slope < T(1))) throw ValidationError("conv layer: leaky slope must be in (0,1)");
    }

    template <typename U>
    BasicConvLayer<U> cast() const {
        BasicConvLayer<U> out;
        out.kernels = kernels.template cast<U>();
        out.bias.assign(bias.begin(), bias.end());
        out.stride = stride;
        out.padding = padding;
        out.activation = activation;
        out.slope = static_cast<U>(slope);
        return out;
    }

    friend bool operator==(const BasicConvLayer&, const BasicConvLayer&) = default;
};

using ConvLayer = BasicConvLayer<float>;

template <typename T>
struct BasicGradientPair {
    BasicTensor<T> wrt_input;
    BasicTensor<T> wrt_kernels;
    std::vector<T> wrt_bias;
};

using GradientPair = BasicGradientPair<float>;

struct ConvGeometry {
    int in_c, in_h, in_w;
    int k_h, k_w, stride, pad;
    int out_h, out_w;

    int patch() const { return in_c * k_h * k_w; }
    int positions() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const std::vector<int>& input_shape, const BasicConvLayer<T>& layer) {
    if (input_shape.size() != 3) {
        throw ShapeError("conv2d: expected CHW input, got shape " + dims_to_string(input_shape));
    }
    if (input_shape[0] != layer.in_channels()) {
        throw ShapeError("conv2d: expected " + std::to_string(layer.in_channels()) + " input channels, got " +
                         std::to_string(input_shape[0]) + " (input shape " + dims_to_string(input_shape) + ")");
    }
    ConvGeometry g{input_shape[0], input_shape[1], input_shape[2], layer.kernel_h(), layer.kernel_w(),
                   layer.stride,   layer.padding,  0,              0};
    const int span_h = g.in_h + 2 * g.pad - g.k_h;
    const int span_w = g.in_w + 2 * g.pad - g.k_w;
    if (span_h < 0 || span_w < 0) {
        throw ShapeError("conv2d: input spatial dims " + std::to_string(g.in_h) + "x" + std::to_string(g.in_w) +
                         " too small for kernel " + std::to_string(g.k_h) + "x" + std::to_string(g.k_w) +
                         " with padding " + std::to_string(g.pad));
    }
    g.out_h = span_h / g.stride + 1;
    g.out_w = span_w / g.stride + 1;
    return g;
}

namespace detail {

/// Unfolds the input into a (C*kH*kW) x (outH*outW) patch matrix.
template <typename T>
void im2col(const BasicTensor<T>& input, const ConvGeometry& g, std::vector<T>& col) {
    const int positions = g.positions();
    col.assign(static_cast<std::size_t>(g.patch()) * positions, T(0));
    std::size_t row = 0;
    for (int c = 0; c < g.in_c; ++c) {
        for (int ky = 0; ky < g.k_h; ++ky) {
            for (int kx = 0; kx < g.k_w; ++kx, ++row) {
                T* dst = col.data() + row * positions;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    const T* src = input.data.data() + (static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.in_w) dst[oy * g.out_w + ox] = src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const std::vector<double>& col, const ConvGeometry& g, BasicTensor<T>& out) {
    out = BasicTensor<T>({g.in_c, g.in_h, g.in_w});
    std::vector<double> acc(out.size(), 0.0);
    const int positions = g.positions();
    std::size_t row = 0;
    for (int c = 0; c < g.in_c; ++c) {
        for (int ky = 0; ky < g.k_h; ++ky) {
            for (int kx = 0; kx < g.k_w; ++kx, ++row) {
                const double* src = col.data() + row * positions;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    double* dst = acc.data() + (static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.in_w) dst[ix] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<T>(acc[i]);
}

}  // namespace detail

/// Intermediate state kept by a forward pass so backward does not recompute it.
template <typename T>
struct ConvCache {
    ConvGeometry geometry{};
    std::vector<T> columns;
    BasicTensor<T> pre_activation;
};

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicConvLayer<T>& layer, ConvCache<T>* cache) {
    const ConvGeometry g = conv_geometry(input.shape, layer);
    std::vector<T> local_cols;
    std::vector<T>& col = cache ? cache->columns : local_cols;
    detail::im2col(input, g, col);

    const int positions = g.positions();
    const int patch = g.patch();
    BasicTensor<T> pre({layer.out_channels(), g.out_h, g.out_w});
    std::vector<double> acc(static_cast<std::size_t>(positions));
    for (int o = 0; o < layer.out_channels(); ++o) {
        std::fill(acc.begin(), acc.end(), static_cast<double>(layer.bias[o]));
        const T* w = layer.kernels.data.data() + static_cast<std::size_t>(o) * patch;
        for (int k = 0; k < patch; ++k) {
            const double wk = w[k];
            if (wk == 0.0) continue;
            const T* c = col.data() + static_cast<std::size_t>(k) * positions;
            for (int p = 0; p < positions; ++p) acc[p] += wk * static_cast<double>(c[p]);
        }
        T* dst = pre.data.data() + static_cast<std::size_t>(o) * positions;
        for (int p = 0; p < positions; ++p) dst[p] = static_cast<T>(acc[p]);
    }

    BasicTensor<T> out = pre;
    if (layer.activation == Activation::leaky_relu) {
        for (auto& v : out.data) v = leaky_relu(v, layer.slope);
    }
    if (cache) {
        cache->geometry = g;
        cache->pre_activation = std::move(pre);
    }
    return out;
}

/// Output spatial dims are floor((H + 2*pad - kH) / stride) + 1.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicConvLayer<T>& layer) {
    return conv2d_forward(input, layer, static_cast<ConvCache<T>*>(nullptr));
}

/// Backward pass from a populated forward cache. When `need_input` is false the
/// input gradient is left empty (first layer during training).
template <typename T>
BasicGradientPair<T> conv2d_backward_cached(const ConvCache<T>& cache, const BasicConvLayer<T>& layer,
                                            const BasicTensor<T>& upstream, bool need_input = true,
                                            bool need_weights = true) {
    const ConvGeometry& g = cache.geometry;
    if (upstream.shape != cache.pre_activation.shape) {
        throw ShapeError("conv2d_backward: upstream shape " + dims_to_string(upstream.shape) +
                         " does not match output shape " + dims_to_string(cache.pre_activation.shape));
    }
    const int positions = g.positions();
    const int patch = g.patch();
    const int out_ch = layer.out_channels();

    std::vector<T> delta(upstream.data);
    if (layer.activation == Activation::leaky_relu) {
        for (std::size_t i = 0; i < delta.size(); ++i) {
            delta[i] *= leaky_relu_derivative(cache.pre_activation.data[i], layer.slope);
        }
    }

    BasicGradientPair<T> grads;
    if (need_weights) {
        grads.wrt_kernels = BasicTensor<T>(layer.kernels.shape);
        grads.wrt_bias.assign(static_cast<std::size_t>(out_ch), T(0));
        for (int o = 0; o < out_ch; ++o) {
            const T* d = delta.data() + static_cast<std::size_t>(o) * positions;
            double bsum = 0.0;
            for (int p = 0; p < positions; ++p) bsum += d[p];
            grads.wrt_bias[o] = static_cast<T>(bsum);
            T* gw = grads.wrt_kernels.data.data() + static_cast<std::size_t>(o) * patch;
            for (int k = 0; k < patch; ++k) {
                const T* c = cache.columns.data() + static_cast<std::size_t>(k) * positions;
                double s = 0.0;
                for (int p = 0; p < positions; ++p) s += static_cast<double>(d[p]) * static_cast<double>(c[p]);
                gw[k] = static_cast<T>(s);
            }
        }
    }

    if (need_input) {
        std::vector<double> dcol(static_cast<std::size_t>(patch) * positions, 0.0);
        for (int o = 0; o < out_ch; ++o) {
            const T* d = delta.data() + static_cast<std::size_t>(o) * positions;
            const T* w = layer.kernels.data.data() + static_cast<std::size_t>(o) * patch;
            for (int k = 0; k < patch; ++k) {
                const double wk = w[k];
                if (wk == 0.0) continue;
                double* dst = dcol.data() + static_cast<std::size_t>(k) * positions;
                for (int p = 0; p < positions; ++p) dst[p] += wk * static_cast<double>(d[p]);
            }
        }
        detail::col2im(dcol, g, grads.wrt_input);
    }
    return grads;
}

/// Exact gradients of sum(upstream * conv2d_forward(input, layer)).
template <typename T>
BasicGradientPair<T> conv2d_backward(const BasicTensor<T>& input, const BasicConvLayer<T>& layer,
                                     const BasicTensor<T>& upstream) {
    ConvCache<T> cache;
    conv2d_forward(input, layer, &cache);
    return conv2d_backward_cached(cache, layer, upstream);
}

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    bool finite = true;

    bool passed(double tolerance) const { return finite && max_relative_error <= tolerance; }
};

/// Compares an analytic gradient against central differences of `value` at
/// `point`. Relative error per entry is |a - n| / max(|a|, |n|, 1e-8).
/// `indices` restricts the check to a subset of entries (empty = all).
template <typename T>
GradCheckResult grad_check(const std::function<double(const BasicTensor<T>&)>& value,
                           const BasicTensor<T>& analytic, const BasicTensor<T>& point, double h,
                           const std::vector<std::size_t>& indices = {}) {
    if (!(h > 0.0)) throw ValidationError("grad_check: step h must be positive");
    require_same_shape(point, analytic, "grad_check");
    GradCheckResult result;
    BasicTensor<T> probe = point;
    auto check_one = [&](std::size_t i) {
        const T original = probe.data[i];
        probe.data[i] = static_cast<T>(original + h);
        const double up = value(probe);
        probe.data[i] = static_cast<T>(original - h);
        const double down = value(probe);
        probe.data[i] = original;
        const double numeric = (up - down) / (2.0 * h);
        const double a = static_cast<double>(analytic.data[i]);
        if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(a)) {
            result.finite = false;
            result.max_relative_error = std::numeric_limits<double>::infinity();
            result.worst_index = i;
            return;
        }
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        const double rel = std::abs(a - numeric) / denom;
        if (rel > result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst_index = i;
        }
    };
    if (indices.empty()) {
        for (std::size_t i = 0; i < point.size() && result.finite; ++i) check_one(i);
    } else {
        for (std::size_t i : indices) {
            if (!result.finite) break;
            check_one(i);
        }
    }
    return result;
}

}  // namespace tog
