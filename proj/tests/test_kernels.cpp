#include <doctest.h>

#include <random>

#include "ibf/kernels.hpp"

using namespace ibf;
using namespace ibf::kernels;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::mt19937_64& rng) {
    Tensor t(n, c, h, w);
    std::normal_distribution<double> nd;
    for (auto& v : t.data) v = nd(rng);
    return t;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
    std::vector<double> v(n);
    std::normal_distribution<double> nd;
    for (auto& x : v) x = nd(rng);
    return v;
}

}  // namespace

TEST_CASE("reference conv matches a hand computed sum") {
    // 1x1x3x3 input, single 2x2 kernel, valid.
    Tensor x(1, 1, 3, 3);
    for (int i = 0; i < 9; ++i) x.data[i] = i + 1;
    const std::vector<double> w{1, 0, 0, -1};
    const ConvGeometry g{1, 1, 2, 0};
    const Tensor y = reference::conv2d_forward(x, w, g);
    REQUIRE(y.h == 2);
    REQUIRE(y.w == 2);
    for (double v : y.data) CHECK(v == doctest::Approx(-4.0));
}

TEST_CASE("parallel conv forward and backward agree with the reference") {
    std::mt19937_64 rng(42);
    struct Case { int n, cin, cout, size, k, pad; };
    for (const Case c : {Case{2, 3, 4, 7, 3, 0}, Case{3, 2, 5, 6, 3, 1}, Case{1, 4, 2, 5, 5, 0}, Case{2, 3, 3, 4, 1, 0}}) {
        const ConvGeometry g{c.cin, c.cout, c.k, c.pad};
        const Tensor x = random_tensor(c.n, c.cin, c.size, c.size, rng);
        const auto w = random_vector(g.weight_count(), rng);
        parallel::ConvWorkspace ws;
        const Tensor yr = reference::conv2d_forward(x, w, g);
        const Tensor yp = parallel::conv2d_forward(x, w, g, ws);
        REQUIRE(yr.same_shape(yp));
        for (std::size_t i = 0; i < yr.size(); ++i) CHECK(yp.data[i] == doctest::Approx(yr.data[i]).epsilon(1e-12));

        const Tensor gy = random_tensor(yr.n, yr.c, yr.h, yr.w, rng);
        std::vector<double> gwr(w.size(), 0.0), gwp(w.size(), 0.0);
        const Tensor gxr = reference::conv2d_backward(x, w, g, gy, gwr);
        const Tensor gxp = parallel::conv2d_backward(ws, w, g, gy, gwp);
        REQUIRE(gxr.same_shape(x));
        REQUIRE(gxp.same_shape(x));
        for (std::size_t i = 0; i < gxr.size(); ++i) CHECK(gxp.data[i] == doctest::Approx(gxr.data[i]).epsilon(1e-12));
        for (std::size_t i = 0; i < w.size(); ++i) CHECK(gwp[i] == doctest::Approx(gwr[i]).epsilon(1e-12));
    }
}

TEST_CASE("reference conv backward matches finite differences") {
    std::mt19937_64 rng(7);
    const ConvGeometry g{2, 2, 3, 1};
    Tensor x = random_tensor(1, 2, 4, 4, rng);
    auto w = random_vector(g.weight_count(), rng);
    const Tensor gy = random_tensor(1, 2, 4, 4, rng);
    auto objective = [&] {
        const Tensor y = reference::conv2d_forward(x, w, g);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * gy.data[i];
        return s;
    };
    std::vector<double> gw(w.size(), 0.0);
    const Tensor gx = reference::conv2d_backward(x, w, g, gy, gw);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double o = x.data[i];
        x.data[i] = o + h;
        const double a = objective();
        x.data[i] = o - h;
        const double b = objective();
        x.data[i] = o;
        CHECK(gx.data[i] == doctest::Approx((a - b) / (2 * h)).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double o = w[i];
        w[i] = o + h;
        const double a = objective();
        w[i] = o - h;
        const double b = objective();
        w[i] = o;
        CHECK(gw[i] == doctest::Approx((a - b) / (2 * h)).epsilon(1e-6));
    }
}

TEST_CASE("batchnorm train mode normalizes each channel") {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor(5, 3, 2, 2, rng);
    for (auto& v : x.data) v = 3.0 * v + 2.0;
    const std::vector<double> gamma{1, 1, 1}, beta{0, 0, 0};
    BatchNormCache cache;
    const Tensor y = batchnorm_forward_train(x, gamma, beta, cache);
    for (int c = 0; c < 3; ++c) {
        double m = 0, s = 0;
        int n = 0;
        for (int i = 0; i < 5; ++i)
            for (int p = 0; p < 4; ++p, ++n) {
                const double v = y.at(i, c, p / 2, p % 2);
                m += v;
                s += v * v;
            }
        CHECK(m / n == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(s / n == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("batchnorm eval mode uses the running statistics") {
    Tensor x(1, 1, 1, 2);
    x.data = {1.0, 3.0};
    const std::vector<double> gamma{2.0}, beta{0.5}, mean{1.0}, var{4.0};
    const Tensor y = batchnorm_forward_eval(x, gamma, beta, mean, var);
    const double inv = 1.0 / std::sqrt(4.0 + kBatchNormEps);
    CHECK(y.data[0] == doctest::Approx(0.5));
    CHECK(y.data[1] == doctest::Approx(2.0 * 2.0 * inv + 0.5));
}

TEST_CASE("batchnorm backward matches finite differences") {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor(4, 2, 2, 2, rng);
    auto gamma = random_vector(2, rng), beta = random_vector(2, rng);
    const Tensor gy = random_tensor(4, 2, 2, 2, rng);
    auto objective = [&] {
        BatchNormCache c;
        const Tensor y = batchnorm_forward_train(x, gamma, beta, c);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * gy.data[i];
        return s;
    };
    BatchNormCache cache;
    batchnorm_forward_train(x, gamma, beta, cache);
    std::vector<double> gg(2, 0.0), gb(2, 0.0);
    const Tensor gx = batchnorm_backward(gy, gamma, cache, gg, gb);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double o = x.data[i];
        x.data[i] = o + h;
        const double a = objective();
        x.data[i] = o - h;
        const double b = objective();
        x.data[i] = o;
        CHECK(gx.data[i] == doctest::Approx((a - b) / (2 * h)).epsilon(1e-5));
    }
    for (int c = 0; c < 2; ++c) {
        const double o = gamma[c];
        gamma[c] = o + h;
        const double a = objective();
        gamma[c] = o - h;
        const double b = objective();
        gamma[c] = o;
        CHECK(gg[c] == doctest::Approx((a - b) / (2 * h)).epsilon(1e-6));
    }
}

TEST_CASE("relu and its backward mask") {
    Tensor x(1, 1, 1, 4);
    x.data = {-1.0, 0.0, 2.0, -0.5};
    relu_inplace(x);
    CHECK(x.data == std::vector<double>{0.0, 0.0, 2.0, 0.0});
    Tensor g(1, 1, 1, 4, 1.0);
    relu_backward_inplace(g, x);
    CHECK(g.data == std::vector<double>{0.0, 0.0, 1.0, 0.0});
}
