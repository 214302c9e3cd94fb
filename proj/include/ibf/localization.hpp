#pragma once

// Splice localization: encode a grid of patches, segment the signatures with
// a two-component Gaussian mixture fitted by EM, and report the posterior of
// the minority component as the per-pixel splice probability.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibf/image.hpp"
#include "ibf/model.hpp"

namespace ibf {

enum class SignatureMode { MeanAndScale, MeanOnly };

struct SignatureField {
    int rows = 0;
    int cols = 0;
    int dim = 0;
    int patch_size = 0;
    int stride = 0;
    std::vector<double> features;  // [rows*cols][dim]

    std::size_t cells() const { return static_cast<std::size_t>(rows) * cols; }
    std::span<const double> cell(std::size_t i) const { return {features.data() + i * dim, static_cast<std::size_t>(dim)}; }
};

/// Eval-mode encoding of every patch at (r*stride, c*stride); feature is
/// [mean | scale], or the mean alone in MeanOnly mode.
SignatureField extract_signatures(const Image& image, const FingerprintModel& model, const ModelParams& params,
                                  int stride, SignatureMode mode = SignatureMode::MeanAndScale);

enum class CovarianceKind { Full, Diagonal };

struct EmConfig {
    int max_iterations = 500;
    double tolerance = 1e-6;
    int restarts = 5;
    double ridge_scale = 1e-6;  // ridge = ridge_scale * trace(global cov) / dim
    CovarianceKind covariance = CovarianceKind::Full;
    std::uint64_t seed = 0;
};

/// Two-component mixture. The covariance update is S_k + ridge * N / (2 N_k),
/// the exact maximizer of the log-likelihood minus
/// (ridge * N / 4) * sum_k tr(Sigma_k^-1); `objective_trace` records that
/// penalized log-likelihood, which EM never decreases.
struct Gmm2 {
    int dim = 0;
    std::array<double, 2> weights{0.5, 0.5};
    std::array<std::vector<double>, 2> means;
    std::array<std::vector<double>, 2> covariances;  // [dim][dim] row-major
    std::vector<double> objective_trace;
    double ridge = 0.0;
    double log_likelihood = 0.0;  // unpenalized, at the final parameters
    int iterations = 0;

    /// Posterior responsibilities [n][2] for row-major samples.
    std::vector<std::array<double, 2>> responsibilities(std::span<const double> samples) const;
    Gmm2 swapped() const;
};

/// Fits on row-major samples [n][dim]. Requires n >= 2*dim + 2.
Gmm2 fit_gmm2(std::span<const double> samples, int dim, const EmConfig& cfg = {});
Gmm2 fit_gmm2(const SignatureField& field, const EmConfig& cfg = {});

enum class Upsampling { Average, Nearest };

struct HeatMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;  // [y][x], probability of spliced
    std::string threshold_method;
    double threshold = 0.5;

    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Index of the component treated as spliced: the one with the smaller total
/// responsibility, ties broken by the larger Mahalanobis distance of its mean
/// from the global sample mean.
int spliced_component(const Gmm2& gmm, std::span<const double> samples);

HeatMap splice_probability(const SignatureField& field, const Gmm2& gmm, int image_height, int image_width,
                           Upsampling mode = Upsampling::Average);

/// Maximizes between-class variance over a 256-bin histogram on [0,1]. Among
/// a run of equally good cut points the middle one is taken.
double otsu_threshold(std::span<const double> values);
double otsu_threshold(const HeatMap& map);

/// value > threshold
Mask binarize(const HeatMap& map, double threshold);

struct LocalizationConfig {
    int stride = 0;  // 0 selects round(patch / 2)
    SignatureMode signature = SignatureMode::MeanAndScale;
    EmConfig em;
    Upsampling upsampling = Upsampling::Average;

    int resolved_stride(int patch) const;
};

nlohmann::json to_json(const LocalizationConfig& c);

struct Localization {
    HeatMap map;
    int grid_rows = 0;
    int grid_cols = 0;
    int stride = 0;
    double gmm_loglik = 0.0;
    bool degenerate = false;  // too few cells or identical signatures: uniform 0.5 map
};

Localization localize(const Image& image, const FingerprintModel& model, const ModelParams& params,
                      const LocalizationConfig& cfg = {});

/// 8-bit grayscale PNG of probability*255 and the JSON sidecar
/// {threshold_method, threshold, gmm_loglik, grid_shape, stride}.
void write_heatmap(const std::filesystem::path& png, const std::filesystem::path& sidecar, const Localization& loc);
HeatMap read_heatmap(const std::filesystem::path& png);

}  // namespace ibf
