#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "tog/numerics.hpp"
#include "tog/rng.hpp"
#include "tog/tensor.hpp"

namespace {

using tog::Activation;
using tog::BasicConvLayer;
using tog::BasicTensor;

template <typename T>
BasicTensor<T> random_tensor(std::vector<int> shape, tog::Rng& rng, double lo = -1.0, double hi = 1.0) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
BasicConvLayer<T> random_layer(int out_c, int in_c, int k, int stride, int pad, Activation act, tog::Rng& rng) {
    BasicConvLayer<T> l;
    l.kernels = random_tensor<T>({out_c, in_c, k, k}, rng);
    l.bias.resize(static_cast<std::size_t>(out_c));
    for (auto& b : l.bias) b = static_cast<T>(rng.uniform(-0.5, 0.5));
    l.stride = stride;
    l.padding = pad;
    l.activation = act;
    l.slope = T(0.1);
    return l;
}

// Direct seven-loop convolution.
BasicTensor<double> naive_conv(const BasicTensor<double>& x, const BasicConvLayer<double>& l) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int O = l.out_channels(), K = l.kernel_h(), s = l.stride, p = l.padding;
    const int OH = (H + 2 * p - K) / s + 1, OW = (W + 2 * p - K) / s + 1;
    BasicTensor<double> out({O, OH, OW});
    for (int o = 0; o < O; ++o) {
        for (int i = 0; i < OH; ++i) {
            for (int j = 0; j < OW; ++j) {
                double acc = l.bias[o];
                for (int c = 0; c < C; ++c) {
                    for (int u = 0; u < K; ++u) {
                        for (int v = 0; v < K; ++v) {
                            const int y = i * s - p + u, xx = j * s - p + v;
                            if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                            acc += l.kernels.data[((o * C + c) * K + u) * K + v] * x.at(c, y, xx);
                        }
                    }
                }
                if (l.activation == Activation::leaky_relu && acc <= 0.0) acc *= l.slope;
                out.at(o, i, j) = acc;
            }
        }
    }
    return out;
}

double dot(const BasicTensor<double>& a, const BasicTensor<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

}  // namespace

TEST(Tensor, ShapeMismatchIsRejected) {
    EXPECT_THROW(tog::Tensor({2, 3}, std::vector<float>(5)), tog::ShapeError);
    EXPECT_THROW(tog::Tensor({-1, 3}), tog::ShapeError);
    tog::Tensor t({2, 3, 4}, 1.5f);
    EXPECT_EQ(t.size(), 24u);
    EXPECT_EQ(t.rank(), 3);
}

TEST(Tensor, LayoutConversionRoundTrips) {
    tog::Rng rng(1);
    auto hwc = random_tensor<float>({5, 4, 3}, rng);
    auto chw = tog::hwc_to_chw(hwc);
    EXPECT_EQ(chw.shape, (std::vector<int>{3, 5, 4}));
    EXPECT_EQ(chw.at(2, 1, 3), hwc.at(1, 3, 2));
    EXPECT_EQ(tog::chw_to_hwc(chw), hwc);
}

TEST(Rng, DerivedStreamsAreDistinctAndStable) {
    EXPECT_EQ(tog::derive_seed(7, "data/train", 3), tog::derive_seed(7, "data/train", 3));
    std::set<std::uint64_t> seen;
    for (const char* name : {"data/train", "data/test", "train/shuffle", "detector/init", "universal/shuffle"}) {
        for (std::uint64_t i = 0; i < 50; ++i) seen.insert(tog::derive_seed(7, name, i));
    }
    EXPECT_EQ(seen.size(), 250u);
    EXPECT_NE(tog::derive_seed(7, "x"), tog::derive_seed(8, "x"));
}

TEST(Rng, UniformAndNormalMoments) {
    tog::Rng rng(42);
    double s = 0, s2 = 0, n = 0, n2 = 0;
    const int N = 200000;
    for (int i = 0; i < N; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
        const double z = rng.normal();
        n += z;
        n2 += z * z;
    }
    EXPECT_NEAR(s / N, 0.5, 0.005);
    EXPECT_NEAR(s2 / N - 0.25, 1.0 / 12.0, 0.002);
    EXPECT_NEAR(n / N, 0.0, 0.01);
    EXPECT_NEAR(n2 / N, 1.0, 0.02);
}

TEST(Activations, SigmoidIsStableAndSymmetric) {
    EXPECT_DOUBLE_EQ(tog::sigmoid(0.0), 0.5);
    EXPECT_NEAR(tog::sigmoid(800.0), 1.0, 0.0);
    EXPECT_NEAR(tog::sigmoid(-800.0), 0.0, 1e-300);
    EXPECT_TRUE(std::isfinite(tog::sigmoid(-800.0)));
    for (double x : {-7.0, -1.3, 0.2, 4.5}) EXPECT_NEAR(tog::sigmoid(x) + tog::sigmoid(-x), 1.0, 1e-15);
}

TEST(Activations, LeakyReluAtZeroUsesSlope) {
    EXPECT_DOUBLE_EQ(tog::leaky_relu(-2.0), -0.2);
    EXPECT_DOUBLE_EQ(tog::leaky_relu(3.0), 3.0);
    EXPECT_DOUBLE_EQ(tog::leaky_relu_derivative(0.0), 0.1);
    EXPECT_DOUBLE_EQ(tog::leaky_relu_derivative(1e-12), 1.0);
}

TEST(Activations, DerivativesMatchFiniteDifferences) {
    tog::Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        const double x = rng.uniform(-6.0, 6.0);
        const double h = 1e-5;
        const double ns = (tog::sigmoid(x + h) - tog::sigmoid(x - h)) / (2 * h);
        EXPECT_NEAR(tog::sigmoid_derivative(x), ns, 1e-4 * std::max(1.0, std::abs(ns)));
        if (std::abs(x) > 2 * h) {
            const double nl = (tog::leaky_relu(x + h) - tog::leaky_relu(x - h)) / (2 * h);
            EXPECT_NEAR(tog::leaky_relu_derivative(x), nl, 1e-9);
        }
    }
}

TEST(Conv, MatchesNaiveLoopsOnRandomGeometries) {
    tog::Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        const int C = rng.uniform_int(1, 4), O = rng.uniform_int(1, 5);
        const int k = rng.uniform_int(0, 1) ? 3 : 1;
        const int s = rng.uniform_int(1, 2), p = k == 3 ? rng.uniform_int(0, 1) : 0;
        const int H = rng.uniform_int(3, 9), W = rng.uniform_int(3, 9);
        const auto act = rng.uniform_int(0, 1) ? Activation::leaky_relu : Activation::linear;
        auto layer = random_layer<double>(O, C, k, s, p, act, rng);
        auto x = random_tensor<double>({C, H, W}, rng);
        const auto fast = tog::conv2d_forward(x, layer);
        const auto slow = naive_conv(x, layer);
        ASSERT_EQ(fast.shape, slow.shape);
        EXPECT_LE(tog::max_abs_diff(fast, slow), 1e-12) << "trial " << trial;
    }
}

TEST(Conv, FloatForwardAgreesWithDouble) {
    tog::Rng rng(12);
    auto ld = random_layer<double>(6, 3, 3, 2, 1, Activation::leaky_relu, rng);
    auto xd = random_tensor<double>({3, 16, 16}, rng);
    const auto yd = tog::conv2d_forward(xd, ld);
    const auto yf = tog::conv2d_forward(xd.cast<float>(), ld.cast<float>());
    EXPECT_LE(tog::max_abs_diff(yf.cast<double>(), yd), 1e-5);
}

TEST(Conv, ShapeErrorsNameBothShapes) {
    tog::Rng rng(13);
    auto layer = random_layer<float>(4, 3, 3, 1, 1, Activation::linear, rng);
    tog::Tensor bad({2, 8, 8});
    try {
        tog::conv2d_forward(bad, layer);
        FAIL() << "expected ShapeError";
    } catch (const tog::ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('3'), std::string::npos);
        EXPECT_NE(msg.find('2'), std::string::npos);
    }
}

TEST(Conv, GradientsPassFiniteDifferenceCheck) {
    tog::Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const int s = trial % 2 ? 2 : 1;
        const auto act = trial % 3 ? Activation::leaky_relu : Activation::linear;
        auto layer = random_layer<double>(3, 2, 3, s, 1, act, rng);
        auto x = random_tensor<double>({2, 6, 7}, rng);
        const auto y = tog::conv2d_forward(x, layer);
        auto up = random_tensor<double>(y.shape, rng);
        const auto g = tog::conv2d_backward(x, layer, up);

        const std::function<double(const BasicTensor<double>&)> f_x = [&](const BasicTensor<double>& xi) {
            return dot(tog::conv2d_forward(xi, layer), up);
        };
        const auto rx = tog::grad_check(f_x, g.wrt_input, x, 1e-6);
        EXPECT_TRUE(rx.passed(1e-4)) << "input, trial " << trial << " err " << rx.max_relative_error;

        const std::function<double(const BasicTensor<double>&)> f_k = [&](const BasicTensor<double>& k) {
            auto l2 = layer;
            l2.kernels = k;
            return dot(tog::conv2d_forward(x, l2), up);
        };
        const auto rk = tog::grad_check(f_k, g.wrt_kernels, layer.kernels, 1e-6);
        EXPECT_TRUE(rk.passed(1e-4)) << "kernels, trial " << trial << " err " << rk.max_relative_error;

        BasicTensor<double> bias({static_cast<int>(layer.bias.size())}, layer.bias);
        BasicTensor<double> gb({static_cast<int>(g.wrt_bias.size())}, g.wrt_bias);
        const std::function<double(const BasicTensor<double>&)> f_b = [&](const BasicTensor<double>& b) {
            auto l2 = layer;
            l2.bias = b.data;
            return dot(tog::conv2d_forward(x, l2), up);
        };
        const auto rb = tog::grad_check(f_b, gb, bias, 1e-6);
        EXPECT_TRUE(rb.passed(1e-4)) << "bias, trial " << trial << " err " << rb.max_relative_error;
    }
}

// backward(a*u + b*v) == a*backward(u) + b*backward(v) with the forward fixed.
TEST(Conv, BackwardIsLinearInUpstream) {
    tog::Rng rng(22);
    auto layer = random_layer<double>(4, 3, 3, 2, 1, Activation::leaky_relu, rng);
    auto x = random_tensor<double>({3, 8, 8}, rng);
    const auto y = tog::conv2d_forward(x, layer);
    auto u = random_tensor<double>(y.shape, rng), v = random_tensor<double>(y.shape, rng);
    const double a = 0.7, b = -1.9;
    BasicTensor<double> mix(y.shape);
    for (std::size_t i = 0; i < mix.size(); ++i) mix.data[i] = a * u.data[i] + b * v.data[i];
    const auto gm = tog::conv2d_backward(x, layer, mix);
    const auto gu = tog::conv2d_backward(x, layer, u);
    const auto gv = tog::conv2d_backward(x, layer, v);
    for (std::size_t i = 0; i < gm.wrt_input.size(); ++i) {
        EXPECT_NEAR(gm.wrt_input.data[i], a * gu.wrt_input.data[i] + b * gv.wrt_input.data[i], 1e-12);
    }
    for (std::size_t i = 0; i < gm.wrt_kernels.size(); ++i) {
        EXPECT_NEAR(gm.wrt_kernels.data[i], a * gu.wrt_kernels.data[i] + b * gv.wrt_kernels.data[i], 1e-12);
    }
}

TEST(GradCheck, FlagsAWrongGradient) {
    BasicTensor<double> x({3}, {0.5, -1.0, 2.0});
    const std::function<double(const BasicTensor<double>&)> f = [](const BasicTensor<double>& t) {
        return t.data[0] * t.data[0] + 3 * t.data[1] + std::sin(t.data[2]);
    };
    BasicTensor<double> right({3}, {1.0, 3.0, std::cos(2.0)});
    BasicTensor<double> wrong({3}, {1.0, 3.3, std::cos(2.0)});
    EXPECT_TRUE(tog::grad_check(f, right, x, 1e-6).passed(1e-6));
    const auto r = tog::grad_check(f, wrong, x, 1e-6);
    EXPECT_FALSE(r.passed(1e-4));
    EXPECT_EQ(r.worst_index, 1u);
}
