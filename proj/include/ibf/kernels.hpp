#pragma once

// Numerical kernels for the encoder. Two implementations of the convolution
// are kept: a direct nested-loop version in `reference` (serial, used as the
// test oracle and the benchmark baseline) and an im2col + GEMM version in
// `parallel` whose data-movement loops are OpenMP-parallel.

#include <span>
#include <vector>

#include "ibf/tensor.hpp"

namespace ibf::kernels {

/// Square-kernel, stride-1 convolution geometry. Weights are laid out
/// [out][in][ky][kx].
struct ConvGeometry {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;
    int pad = 0;

    int out_size(int in) const { return in + 2 * pad - kernel + 1; }
    std::size_t weight_count() const {
        return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
    }
};

namespace reference {

Tensor conv2d_forward(const Tensor& x, std::span<const double> weights,
                      const ConvGeometry& g);

/// Accumulates into grad_weights and returns the gradient w.r.t. x.
Tensor conv2d_backward(const Tensor& x, std::span<const double> weights,
                       const ConvGeometry& g, const Tensor& grad_out,
                       std::span<double> grad_weights);

}  // namespace reference

namespace parallel {

/// Column buffer produced by the forward pass and consumed by backward.
struct ConvWorkspace {
    std::vector<double> cols;  // [K][N*OH*OW], row-major, K = in*k*k
    int n = 0, in_h = 0, in_w = 0, out_h = 0, out_w = 0;
};

Tensor conv2d_forward(const Tensor& x, std::span<const double> weights,
                      const ConvGeometry& g, ConvWorkspace& ws);

Tensor conv2d_backward(const ConvWorkspace& ws, std::span<const double> weights,
                       const ConvGeometry& g, const Tensor& grad_out,
                       std::span<double> grad_weights);

}  // namespace parallel

struct BatchNormCache {
    std::vector<double> mean;
    std::vector<double> var;  // biased batch variance
    std::vector<double> inv_std;
    Tensor xhat;
};

inline constexpr double kBatchNormEps = 1e-5;

Tensor batchnorm_forward_train(const Tensor& x, std::span<const double> gamma,
                               std::span<const double> beta, BatchNormCache& cache);

Tensor batchnorm_forward_eval(const Tensor& x, std::span<const double> gamma,
                              std::span<const double> beta,
                              std::span<const double> running_mean,
                              std::span<const double> running_var);

/// Accumulates into grad_gamma / grad_beta and returns the input gradient.
Tensor batchnorm_backward(const Tensor& grad_out, std::span<const double> gamma,
                          const BatchNormCache& cache, std::span<double> grad_gamma,
                          std::span<double> grad_beta);

void relu_inplace(Tensor& x);
/// Zeroes grad where the forward output was not positive.
void relu_backward_inplace(Tensor& grad, const Tensor& output);

}  // namespace ibf::kernels
