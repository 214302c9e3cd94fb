#pragma once

// Variational IB objective: distortion (decoder cross-entropy) plus beta times
// rate (KL to a factorized standard normal prior), the filter-constraint and
// weight penalties, and the histogram MI estimator used as an ablation
// diagnostic. All information quantities are in nats.

#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "ibf/model.hpp"

namespace ibf {

struct LossWeights {
    double beta = 0.0;
    double lambda = 1.0;  // constraint penalty
    double omega1 = 1e-4; // L1
    double omega2 = 1e-4; // L2 (sum of squares)

    void validate() const;
};

struct LossBreakdown {
    double distortion = 0.0;
    double rate = 0.0;
    double penalty = 0.0;
    double l1 = 0.0;
    double l2 = 0.0;
    double total = 0.0;
    int clamped = 0;  // cross-entropy terms that hit the probability floor

    bool finite() const;
};

/// One JSON-lines record: {step, beta, D, R, penalty, l1, l2, J}.
nlohmann::json loss_record(long step, double beta, const LossBreakdown& b);

inline constexpr double kProbabilityFloor = 1e-12;

/// KL[N(mu, diag(sigma^2)) || N(0, I)].
double rate_kl(const StochasticCode& code);

/// -ln p[label] with p floored at kProbabilityFloor.
double distortion_ce(std::span<const double> probabilities, int label);

struct Batch {
    Tensor patches;
    std::vector<int> labels;

    int size() const { return static_cast<int>(labels.size()); }
};

struct LossOptions {
    int z_samples = 1;
    Mode mode = Mode::Train;
};

/// J = D + beta R + lambda penalty + omega1 |W|_1 + omega2 |W|_2^2, with D and
/// R averaged over the batch. Noise is drawn from `rng` sample-major.
LossBreakdown total_loss(const FingerprintModel& model, const ModelParams& params, const Batch& batch,
                         const LossWeights& weights, std::mt19937_64& rng, LossOptions opts = {});

/// Same value as total_loss; accumulates dJ/dW into `grads`. `cache` is left
/// holding the forward state so callers can update running statistics.
LossBreakdown total_loss_and_gradient(const FingerprintModel& model, const ModelParams& params,
                                      const Batch& batch, const LossWeights& weights,
                                      std::mt19937_64& rng, ParamGrads& grads,
                                      FingerprintModel::Cache& cache, LossOptions opts = {});

/// Observations stored row-major, one row per sample.
struct SampleMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct BinRange {
    double lo = 0.0;
    double hi = 1.0;
};

/// Uniform bins per dimension. `ranges` holds one range per dimension, or a
/// single range shared by all dimensions.
struct BinningConfig {
    int num_bins = 8;
    std::vector<BinRange> ranges{BinRange{}};

    void validate(std::size_t dims) const;
    int bin_of(double v, std::size_t dim) const;
};

/// Plug-in estimate sum p(x,z) ln[p(x,z) / (p(x) p(z))] over the joint
/// histogram of the (multi-dimensional) bin cells.
double binned_mi(const SampleMatrix& x, const BinningConfig& x_bins, const SampleMatrix& z,
                 const BinningConfig& z_bins);

}  // namespace ibf
