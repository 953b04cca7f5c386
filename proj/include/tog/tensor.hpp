#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tog/error.hpp"

namespace tog {

/// Dense row-major tensor. Activations use CHW, images use HWC.
template <typename T>
struct BasicTensor {
    using value_type = T;

    std::vector<int> shape;
    std::vector<T> data;

    BasicTensor() = default;
    explicit BasicTensor(std::vector<int> dims, T fill = T(0)) : shape(std::move(dims)), data(count(shape), fill) {}
    BasicTensor(std::vector<int> dims, std::vector<T> values) : shape(std::move(dims)), data(std::move(values)) {
        if (count(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             dims_to_string(shape));
        }
    }

    static std::size_t count(const std::vector<int>& dims) {
        std::size_t n = 1;
        for (int d : dims) {
            if (d < 0) throw ShapeError("negative dimension in shape " + dims_to_string(dims));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t size() const noexcept { return data.size(); }
    int rank() const noexcept { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    T& operator[](std::size_t i) noexcept { return data[i]; }
    T operator[](std::size_t i) const noexcept { return data[i]; }

    /// Rank-3 accessor.
    T& at(int a, int b, int c) noexcept { return data[(static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c]; }
    T at(int a, int b, int c) const noexcept {
        return data[(static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c];
    }

    std::span<T> values() noexcept { return data; }
    std::span<const T> values() const noexcept { return data; }

    bool all_finite() const noexcept {
        return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }

    friend bool operator==(const BasicTensor&, const BasicTensor&) = default;
};

using Tensor = BasicTensor<float>;

/// H x W x 3 intensities in [0, 1].
using ImageTensor = Tensor;

template <typename T>
void require_same_shape(const BasicTensor<T>& expected, const BasicTensor<T>& actual, const char* what) {
    if (expected.shape != actual.shape) {
        throw ShapeError(std::string(what) + ": expected shape " + dims_to_string(expected.shape) + ", got " +
                         dims_to_string(actual.shape));
    }
}

template <typename T>
T max_abs(std::span<const T> v) {
    T m = 0;
    for (T x : v) m = std::max(m, std::abs(x));
    return m;
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
BasicTensor<T> hwc_to_chw(const BasicTensor<T>& t) {
    if (t.rank() != 3) throw ShapeError("hwc_to_chw: expected rank 3, got shape " + dims_to_string(t.shape));
    const int h = t.dim(0), w = t.dim(1), c = t.dim(2);
    BasicTensor<T> out({c, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k) out.at(k, y, x) = t.at(y, x, k);
    return out;
}

template <typename T>
BasicTensor<T> chw_to_hwc(const BasicTensor<T>& t) {
    if (t.rank() != 3) throw ShapeError("chw_to_hwc: expected rank 3, got shape " + dims_to_string(t.shape));
    const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    BasicTensor<T> out({h, w, c});
    for (int k = 0; k < c; ++k)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(y, x, k) = t.at(k, y, x);
    return out;
}

}  // namespace tog
