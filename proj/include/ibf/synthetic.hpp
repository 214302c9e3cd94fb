#pragma once

// Parametric camera simulator standing in for a real camera-tagged photo
// collection. Each camera model leaves three low-level traces: a tiled 2x2
// per-channel gain pattern (CFA analogue), spatially correlated sensor noise,
// and a storage quantization step.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ibf/image.hpp"

namespace ibf {

struct CameraModelSpec {
    int id = 0;
    /// Indexed [(y%2)*2 + (x%2)][channel].
    std::array<std::array<double, 3>, 4> cfa_gain{};
    /// 3x3 row-major kernel applied to white noise, unit L2 norm.
    std::array<double, 9> noise_kernel{};
    double noise_sigma = 0.01;
    double quant_step = 1.0 / 255.0;
};

nlohmann::json to_json(const CameraModelSpec& s);
CameraModelSpec camera_spec_from_json(const nlohmann::json& j);

struct CameraBankConfig {
    double gain_spread = 0.04;  // gains drawn from 1 +- spread
    double sigma_min = 0.004;
    double sigma_max = 0.03;
    double kernel_spread = 0.5;  // off-center taps drawn from +- spread before normalizing
    double margin = 0.25;        // minimum spec_distance between any two models
    std::vector<double> quant_steps{1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0};

    void validate() const;
};

/// Largest component-wise difference: gains and kernel taps in absolute
/// units, sigma relative to the larger sigma, and 1 for a different
/// quantization step.
double spec_distance(const CameraModelSpec& a, const CameraModelSpec& b);

std::vector<CameraModelSpec> make_camera_bank(int num_models, std::uint64_t seed,
                                              const CameraBankConfig& cfg = {});

struct SyntheticImage {
    Image pixels;
    int camera_id = 0;
    std::uint64_t scene_seed = 0;
};

/// Camera-independent scene: smooth gradients, band-limited texture with a
/// spatially varying envelope, and a few flat shapes with hard edges.
Image render_scene(std::uint64_t scene_seed, int size);

/// Scene -> gain pattern -> correlated noise -> quantization -> clamp, then
/// snapped to 8 bits.
SyntheticImage render(std::uint64_t scene_seed, const CameraModelSpec& spec, int size);

struct SpliceBounds {
    double min_fraction = 0.05;
    double max_fraction = 0.40;
};

struct SpliceCase {
    Image composite;
    Mask mask;
    int host_camera = 0;
    int donor_camera = 0;
    std::string shape;  // "rectangle" or "ellipse"
    double area_fraction = 0.0;
};

/// Replaces a random rectangle or ellipse of `host` with `donor` pixels.
/// Regions whose area fraction falls outside `bounds` are redrawn.
SpliceCase make_splice(const SyntheticImage& host, const SyntheticImage& donor, std::uint64_t region_seed,
                       std::optional<double> requested_fraction = std::nullopt, SpliceBounds bounds = {});

}  // namespace ibf
