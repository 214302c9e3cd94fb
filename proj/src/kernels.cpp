#include "ibf/kernels.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>

#include "ibf/error.hpp"

namespace ibf::kernels {

namespace {

void check_conv_input(const Tensor& x, std::span<const double> weights, const ConvGeometry& g) {
    if (x.c != g.in_channels)
        throw ShapeError("conv2d: input has " + std::to_string(x.c) + " channels, expected " +
                         std::to_string(g.in_channels));
    if (weights.size() != g.weight_count())
        throw ShapeError("conv2d: weight count mismatch");
    if (g.out_size(x.h) < 1 || g.out_size(x.w) < 1)
        throw ShapeError("conv2d: input smaller than kernel");
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

}  // namespace

namespace reference {

Tensor conv2d_forward(const Tensor& x, std::span<const double> weights, const ConvGeometry& g) {
    check_conv_input(x, weights, g);
    const int oh = g.out_size(x.h), ow = g.out_size(x.w), k = g.kernel;
    Tensor y(x.n, g.out_channels, oh, ow);
    for (int n = 0; n < x.n; ++n)
        for (int o = 0; o < g.out_channels; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int ci = 0; ci < g.in_channels; ++ci)
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy + ky - g.pad;
                            if (iy < 0 || iy >= x.h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox + kx - g.pad;
                                if (ix < 0 || ix >= x.w) continue;
                                acc += weights[((o * g.in_channels + ci) * k + ky) * k + kx] *
                                       x.at(n, ci, iy, ix);
                            }
                        }
                    y.at(n, o, oy, ox) = acc;
                }
    return y;
}

Tensor conv2d_backward(const Tensor& x, std::span<const double> weights, const ConvGeometry& g,
                       const Tensor& grad_out, std::span<double> grad_weights) {
    check_conv_input(x, weights, g);
    const int oh = g.out_size(x.h), ow = g.out_size(x.w), k = g.kernel;
    if (grad_out.n != x.n || grad_out.c != g.out_channels || grad_out.h != oh || grad_out.w != ow)
        throw ShapeError("conv2d_backward: grad_out shape mismatch");
    Tensor dx(x.n, x.c, x.h, x.w);
    for (int n = 0; n < x.n; ++n)
        for (int o = 0; o < g.out_channels; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const double go = grad_out.at(n, o, oy, ox);
                    for (int ci = 0; ci < g.in_channels; ++ci)
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy + ky - g.pad;
                            if (iy < 0 || iy >= x.h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox + kx - g.pad;
                                if (ix < 0 || ix >= x.w) continue;
                                const std::size_t wi = ((o * g.in_channels + ci) * k + ky) * k + kx;
                                grad_weights[wi] += go * x.at(n, ci, iy, ix);
                                dx.at(n, ci, iy, ix) += go * weights[wi];
                            }
                        }
                }
    return dx;
}

}  // namespace reference

namespace parallel {

Tensor conv2d_forward(const Tensor& x, std::span<const double> weights, const ConvGeometry& g,
                      ConvWorkspace& ws) {
    check_conv_input(x, weights, g);
    const int k = g.kernel;
    const int oh = g.out_size(x.h), ow = g.out_size(x.w);
    const long K = static_cast<long>(g.in_channels) * k * k;
    const long hw = static_cast<long>(oh) * ow;
    const long cols_n = hw * x.n;
    ws.n = x.n;
    ws.in_h = x.h;
    ws.in_w = x.w;
    ws.out_h = oh;
    ws.out_w = ow;
    ws.cols.assign(static_cast<std::size_t>(K * cols_n), 0.0);

#pragma omp parallel for schedule(static)
    for (long row = 0; row < K; ++row) {
        const int ci = static_cast<int>(row / (k * k));
        const int ky = static_cast<int>((row / k) % k);
        const int kx = static_cast<int>(row % k);
        double* dst = ws.cols.data() + row * cols_n;
        for (int n = 0; n < x.n; ++n)
            for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy + ky - g.pad;
                double* out_row = dst + n * hw + static_cast<long>(oy) * ow;
                if (iy < 0 || iy >= x.h) continue;
                const double* src = &x.data[x.index(n, ci, iy, 0)];
                for (int ox = 0; ox < ow; ++ox) {
                    const int ix = ox + kx - g.pad;
                    if (ix >= 0 && ix < x.w) out_row[ox] = src[ix];
                }
            }
    }

    ConstRowMap w(weights.data(), g.out_channels, K);
    ConstRowMap cols(ws.cols.data(), K, cols_n);
    RowMat prod = w * cols;  // [out][N*HW]

    Tensor y(x.n, g.out_channels, oh, ow);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < x.n; ++n)
        for (int o = 0; o < g.out_channels; ++o)
            std::memcpy(&y.data[y.index(n, o, 0, 0)], prod.data() + o * cols_n + n * hw,
                        sizeof(double) * hw);
    return y;
}

Tensor conv2d_backward(const ConvWorkspace& ws, std::span<const double> weights,
                       const ConvGeometry& g, const Tensor& grad_out,
                       std::span<double> grad_weights) {
    const int k = g.kernel;
    const int oh = ws.out_h, ow = ws.out_w;
    const long K = static_cast<long>(g.in_channels) * k * k;
    const long hw = static_cast<long>(oh) * ow;
    const long cols_n = hw * ws.n;
    if (grad_out.n != ws.n || grad_out.c != g.out_channels || grad_out.h != oh ||
        grad_out.w != ow)
        throw ShapeError("conv2d_backward: grad_out shape mismatch");
    if (grad_weights.size() != g.weight_count())
        throw ShapeError("conv2d_backward: grad weight count mismatch");

    RowMat dy(g.out_channels, cols_n);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < ws.n; ++n)
        for (int o = 0; o < g.out_channels; ++o)
            std::memcpy(dy.data() + o * cols_n + n * hw, &grad_out.data[grad_out.index(n, o, 0, 0)],
                        sizeof(double) * hw);

    ConstRowMap cols(ws.cols.data(), K, cols_n);
    RowMap dw(grad_weights.data(), g.out_channels, K);
    dw.noalias() += dy * cols.transpose();

    ConstRowMap w(weights.data(), g.out_channels, K);
    RowMat dcols = w.transpose() * dy;  // [K][N*HW]

    Tensor dx(ws.n, g.in_channels, ws.in_h, ws.in_w);
    // Rows sharing an input channel scatter into the same plane, so the
    // parallel split is over channels.
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < g.in_channels; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const long row = (static_cast<long>(ci) * k + ky) * k + kx;
                const double* src = dcols.data() + row * cols_n;
                for (int n = 0; n < ws.n; ++n)
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy + ky - g.pad;
                        if (iy < 0 || iy >= ws.in_h) continue;
                        double* dst = &dx.data[dx.index(n, ci, iy, 0)];
                        const double* in_row = src + n * hw + static_cast<long>(oy) * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox + kx - g.pad;
                            if (ix >= 0 && ix < ws.in_w) dst[ix] += in_row[ox];
                        }
                    }
            }
    return dx;
}

}  // namespace parallel

Tensor batchnorm_forward_train(const Tensor& x, std::span<const double> gamma,
                               std::span<const double> beta, BatchNormCache& cache) {
    if (gamma.size() != static_cast<std::size_t>(x.c) || beta.size() != gamma.size())
        throw ShapeError("batchnorm: parameter size mismatch");
    const std::size_t plane = x.plane();
    const double count = static_cast<double>(x.n) * plane;
    cache.mean.assign(x.c, 0.0);
    cache.var.assign(x.c, 0.0);
    cache.inv_std.assign(x.c, 0.0);
    cache.xhat = Tensor(x.n, x.c, x.h, x.w);
    Tensor y(x.n, x.c, x.h, x.w);

#pragma omp parallel for schedule(static)
    for (int c = 0; c < x.c; ++c) {
        double sum = 0.0;
        for (int n = 0; n < x.n; ++n) {
            const double* p = &x.data[x.index(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) sum += p[i];
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (int n = 0; n < x.n; ++n) {
            const double* p = &x.data[x.index(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        const double var = sq / count;
        const double inv_std = 1.0 / std::sqrt(var + kBatchNormEps);
        cache.mean[c] = mean;
        cache.var[c] = var;
        cache.inv_std[c] = inv_std;
        for (int n = 0; n < x.n; ++n) {
            const std::size_t base = x.index(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                const double xh = (x.data[base + i] - mean) * inv_std;
                cache.xhat.data[base + i] = xh;
                y.data[base + i] = gamma[c] * xh + beta[c];
            }
        }
    }
    return y;
}

Tensor batchnorm_forward_eval(const Tensor& x, std::span<const double> gamma,
                              std::span<const double> beta, std::span<const double> running_mean,
                              std::span<const double> running_var) {
    if (gamma.size() != static_cast<std::size_t>(x.c))
        throw ShapeError("batchnorm: parameter size mismatch");
    const std::size_t plane = x.plane();
    Tensor y(x.n, x.c, x.h, x.w);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < x.c; ++c) {
        const double scale = gamma[c] / std::sqrt(running_var[c] + kBatchNormEps);
        const double shift = beta[c] - running_mean[c] * scale;
        for (int n = 0; n < x.n; ++n) {
            const std::size_t base = x.index(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) y.data[base + i] = x.data[base + i] * scale + shift;
        }
    }
    return y;
}

Tensor batchnorm_backward(const Tensor& grad_out, std::span<const double> gamma,
                          const BatchNormCache& cache, std::span<double> grad_gamma,
                          std::span<double> grad_beta) {
    const Tensor& xhat = cache.xhat;
    if (!grad_out.same_shape(xhat)) throw ShapeError("batchnorm_backward: shape mismatch");
    const std::size_t plane = xhat.plane();
    const double count = static_cast<double>(xhat.n) * plane;
    Tensor dx(xhat.n, xhat.c, xhat.h, xhat.w);

#pragma omp parallel for schedule(static)
    for (int c = 0; c < xhat.c; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < xhat.n; ++n) {
            const std::size_t base = xhat.index(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                sum_dy += grad_out.data[base + i];
                sum_dy_xhat += grad_out.data[base + i] * xhat.data[base + i];
            }
        }
        grad_gamma[c] += sum_dy_xhat;
        grad_beta[c] += sum_dy;
        const double k = gamma[c] * cache.inv_std[c] / count;
        for (int n = 0; n < xhat.n; ++n) {
            const std::size_t base = xhat.index(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i)
                dx.data[base + i] = k * (count * grad_out.data[base + i] - sum_dy -
                                         xhat.data[base + i] * sum_dy_xhat);
        }
    }
    return dx;
}

void relu_inplace(Tensor& x) {
    for (double& v : x.data)
        if (v < 0.0) v = 0.0;
}

void relu_backward_inplace(Tensor& grad, const Tensor& output) {
    for (std::size_t i = 0; i < grad.data.size(); ++i)
        if (output.data[i] <= 0.0) grad.data[i] = 0.0;
}

}  // namespace ibf::kernels
