#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ibf/tensor.hpp"

namespace ibf {

/// Planar (CHW) image with intensities in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

/// Per-pixel boolean map, true = spliced.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

    bool at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int y, int x, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
    std::size_t count() const;
};

/// Rounds every value to the nearest multiple of 1/255 within [0,1].
void snap_to_8bit(Image& img);

/// Copies the (y0,x0) crop of size p x p into sample `n` of `out`.
void crop_into(const Image& img, int y0, int x0, int p, Tensor& out, int n);

/// 8-bit PNG, gray for one channel and RGB for three.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

/// Grayscale {0,255} PNG.
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
/// Any nonzero gray value reads as true.
Mask read_mask_png(const std::filesystem::path& path);

}  // namespace ibf
