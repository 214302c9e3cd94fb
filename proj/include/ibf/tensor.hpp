#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ibf {

/// Dense NCHW tensor of doubles.
struct Tensor {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::size_t sample_stride() const { return static_cast<std::size_t>(c) * h * w; }

    std::size_t index(int in, int ic, int y, int x) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x;
    }
    double& at(int in, int ic, int y, int x) { return data[index(in, ic, y, x)]; }
    double at(int in, int ic, int y, int x) const { return data[index(in, ic, y, x)]; }

    std::span<double> sample(int in) {
        return {data.data() + in * sample_stride(), sample_stride()};
    }
    std::span<const double> sample(int in) const {
        return {data.data() + in * sample_stride(), sample_stride()};
    }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
};

}  // namespace ibf
