#include "ibf/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ibf/error.hpp"

namespace ibf {

nlohmann::json to_json(const CameraModelSpec& s) {
    nlohmann::json gains = nlohmann::json::array();
    for (const auto& g : s.cfa_gain) gains.push_back(g);
    return {{"id", s.id},
            {"cfa_gain", gains},
            {"noise_kernel", s.noise_kernel},
            {"noise_sigma", s.noise_sigma},
            {"quant_step", s.quant_step}};
}

CameraModelSpec camera_spec_from_json(const nlohmann::json& j) {
    CameraModelSpec s;
    s.id = j.at("id").get<int>();
    const auto& gains = j.at("cfa_gain");
    for (std::size_t i = 0; i < 4; ++i) s.cfa_gain[i] = gains.at(i).get<std::array<double, 3>>();
    s.noise_kernel = j.at("noise_kernel").get<std::array<double, 9>>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.quant_step = j.at("quant_step").get<double>();
    return s;
}

void CameraBankConfig::validate() const {
    if (!(gain_spread >= 0.0 && gain_spread <= 0.2)) throw ConfigError("bank: gain_spread must be in [0, 0.2]");
    if (!(sigma_min > 0.0 && sigma_max <= 0.1 && sigma_min <= sigma_max))
        throw ConfigError("bank: need 0 < sigma_min <= sigma_max <= 0.1");
    if (!(kernel_spread >= 0.0)) throw ConfigError("bank: kernel_spread must be >= 0");
    if (!(margin >= 0.0)) throw ConfigError("bank: margin must be >= 0");
    if (quant_steps.empty()) throw ConfigError("bank: no quantization steps");
    for (double q : quant_steps) {
        const double units = q * 255.0;
        if (std::abs(units - 1.0) > 1e-9 && std::abs(units - 2.0) > 1e-9 && std::abs(units - 4.0) > 1e-9)
            throw ConfigError("bank: quantization steps must be 1/255, 2/255 or 4/255");
    }
}

double spec_distance(const CameraModelSpec& a, const CameraModelSpec& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 3; ++c) d = std::max(d, std::abs(a.cfa_gain[i][c] - b.cfa_gain[i][c]));
    for (std::size_t i = 0; i < 9; ++i) d = std::max(d, std::abs(a.noise_kernel[i] - b.noise_kernel[i]));
    d = std::max(d, std::abs(a.noise_sigma - b.noise_sigma) / std::max(a.noise_sigma, b.noise_sigma));
    if (std::abs(a.quant_step - b.quant_step) > 1e-12) d = std::max(d, 1.0);
    return d;
}

std::vector<CameraModelSpec> make_camera_bank(int num_models, std::uint64_t seed, const CameraBankConfig& cfg) {
    if (num_models < 2) throw ConfigError("num_models must be >= 2 (got " + std::to_string(num_models) + ")");
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<CameraModelSpec> bank;
    const int max_attempts = 100000;
    for (int attempt = 0; static_cast<int>(bank.size()) < num_models; ++attempt) {
        if (attempt >= max_attempts)
            throw ConfigError("could not draw " + std::to_string(num_models) +
                              " camera models separated by margin " + std::to_string(cfg.margin));
        CameraModelSpec s;
        s.id = static_cast<int>(bank.size());
        for (auto& phase : s.cfa_gain)
            for (double& g : phase) g = 1.0 + cfg.gain_spread * (2.0 * unit(rng) - 1.0);
        double norm = 0.0;
        for (std::size_t i = 0; i < 9; ++i) {
            s.noise_kernel[i] = i == 4 ? 1.0 : cfg.kernel_spread * (2.0 * unit(rng) - 1.0);
            norm += s.noise_kernel[i] * s.noise_kernel[i];
        }
        for (double& k : s.noise_kernel) k /= std::sqrt(norm);
        s.noise_sigma = cfg.sigma_min * std::pow(cfg.sigma_max / cfg.sigma_min, unit(rng));
        s.quant_step = cfg.quant_steps[static_cast<std::size_t>(unit(rng) * cfg.quant_steps.size()) %
                                       cfg.quant_steps.size()];
        const bool separated = std::all_of(bank.begin(), bank.end(), [&](const CameraModelSpec& o) {
            return spec_distance(s, o) >= cfg.margin;
        });
        if (separated) bank.push_back(s);
    }
    return bank;
}

Image render_scene(std::uint64_t scene_seed, int size) {
    if (size < 1) throw ConfigError("render: size must be positive");
    std::seed_seq seq{static_cast<std::uint32_t>(scene_seed), static_cast<std::uint32_t>(scene_seed >> 32),
                      0x5ce7u};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
    constexpr double two_pi = 2.0 * std::numbers::pi;

    Image img(size, size, 3);
    std::array<double, 3> base{};
    for (double& b : base) b = uni(0.3, 0.7);
    const double gx = uni(-0.25, 0.25), gy = uni(-0.25, 0.25);

    struct Wave {
        double fx, fy, phase, amp;
        std::array<double, 3> tint;
    };
    std::vector<Wave> waves(10);
    for (auto& w : waves) {
        const double freq = uni(1.0 / 48.0, 1.0 / 5.0), angle = uni(0.0, std::numbers::pi);
        w.fx = freq * std::cos(angle);
        w.fy = freq * std::sin(angle);
        w.phase = uni(0.0, two_pi);
        w.amp = uni(0.01, 0.05);
        for (double& t : w.tint) t = uni(0.6, 1.0);
    }
    const double env_fx = uni(0.5, 2.0) / size, env_fy = uni(0.5, 2.0) / size, env_phase = uni(0.0, two_pi);

    struct Shape {
        bool ellipse;
        double cx, cy, rx, ry;
        std::array<double, 3> offset;
    };
    std::vector<Shape> shapes(static_cast<std::size_t>(2 + unit(rng) * 4));
    for (auto& s : shapes) {
        s.ellipse = unit(rng) < 0.5;
        s.cx = uni(0.0, size);
        s.cy = uni(0.0, size);
        s.rx = uni(0.05, 0.3) * size;
        s.ry = uni(0.05, 0.3) * size;
        for (double& o : s.offset) o = uni(-0.2, 0.2);
    }

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = static_cast<double>(x) / size - 0.5, v = static_cast<double>(y) / size - 0.5;
            const double env = 0.5 + 0.5 * std::sin(two_pi * (env_fx * x + env_fy * y) + env_phase);
            std::array<double, 3> px{};
            for (int c = 0; c < 3; ++c) px[c] = base[c] + gx * u + gy * v;
            for (const auto& w : waves) {
                const double s = w.amp * env * std::sin(two_pi * (w.fx * x + w.fy * y) + w.phase);
                for (int c = 0; c < 3; ++c) px[c] += s * w.tint[c];
            }
            for (const auto& s : shapes) {
                const double dx = (x - s.cx) / s.rx, dy = (y - s.cy) / s.ry;
                const bool inside = s.ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
                if (inside)
                    for (int c = 0; c < 3; ++c) px[c] += s.offset[c];
            }
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(px[c], 0.05, 0.95);
        }
    return img;
}

SyntheticImage render(std::uint64_t scene_seed, const CameraModelSpec& spec, int size) {
    Image img = render_scene(scene_seed, size);

    std::seed_seq seq{static_cast<std::uint32_t>(scene_seed), static_cast<std::uint32_t>(scene_seed >> 32),
                      static_cast<std::uint32_t>(spec.id), 0x401u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);

    Image white(size, size, 3);
    for (double& v : white.data) v = normal(rng);

    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double noise = 0.0;
                for (int ky = -1; ky <= 1; ++ky)
                    for (int kx = -1; kx <= 1; ++kx) {
                        const int yy = std::clamp(y + ky, 0, size - 1), xx = std::clamp(x + kx, 0, size - 1);
                        noise += spec.noise_kernel[(ky + 1) * 3 + (kx + 1)] * white.at(c, yy, xx);
                    }
                double v = img.at(c, y, x) * spec.cfa_gain[(y % 2) * 2 + (x % 2)][c];
                v += spec.noise_sigma * noise;
                v = std::round(v / spec.quant_step) * spec.quant_step;
                img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
            }
    snap_to_8bit(img);
    return {std::move(img), spec.id, scene_seed};
}

SpliceCase make_splice(const SyntheticImage& host, const SyntheticImage& donor, std::uint64_t region_seed,
                       std::optional<double> requested_fraction, SpliceBounds bounds) {
    if (host.camera_id == donor.camera_id)
        throw ConfigError("make_splice: host and donor share camera id " + std::to_string(host.camera_id));
    const Image& h = host.pixels;
    const Image& d = donor.pixels;
    if (h.width != d.width || h.height != d.height || h.channels != d.channels)
        throw ShapeError("make_splice: host and donor dimensions differ");
    if (!(bounds.min_fraction > 0.0 && bounds.min_fraction < bounds.max_fraction && bounds.max_fraction < 0.5))
        throw ConfigError("make_splice: bounds must satisfy 0 < min < max < 0.5");

    std::mt19937_64 rng(region_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double area = static_cast<double>(h.width) * h.height;

    for (int attempt = 0; attempt < 10000; ++attempt) {
        const double f = (attempt == 0 && requested_fraction)
                             ? *requested_fraction
                             : bounds.min_fraction + (bounds.max_fraction - bounds.min_fraction) * unit(rng);
        const bool ellipse = unit(rng) < 0.5;
        const double aspect = std::exp(std::log(0.5) + std::log(4.0) * unit(rng));
        const double target = f * area / (ellipse ? std::numbers::pi / 4.0 : 1.0);
        const double w = std::sqrt(target * aspect), hh = target / w;
        if (w < 2.0 || hh < 2.0 || w > h.width - 2 || hh > h.height - 2) continue;
        const double cx = w / 2 + unit(rng) * (h.width - w), cy = hh / 2 + unit(rng) * (h.height - hh);

        Mask mask(h.width, h.height);
        for (int y = 0; y < h.height; ++y)
            for (int x = 0; x < h.width; ++x) {
                const double dx = (x + 0.5 - cx) / (w / 2), dy = (y + 0.5 - cy) / (hh / 2);
                mask.set(y, x, ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0);
            }
        const double frac = static_cast<double>(mask.count()) / area;
        if (frac < bounds.min_fraction || frac > bounds.max_fraction) continue;

        SpliceCase out;
        out.composite = h;
        for (int c = 0; c < h.channels; ++c)
            for (int y = 0; y < h.height; ++y)
                for (int x = 0; x < h.width; ++x)
                    if (mask.at(y, x)) out.composite.at(c, y, x) = d.at(c, y, x);
        out.mask = std::move(mask);
        out.host_camera = host.camera_id;
        out.donor_camera = donor.camera_id;
        out.shape = ellipse ? "ellipse" : "rectangle";
        out.area_fraction = frac;
        return out;
    }
    throw ConfigError("make_splice: could not place a region within the area bounds");
}

}  // namespace ibf
