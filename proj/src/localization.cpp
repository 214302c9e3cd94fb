#include "ibf/localization.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "ibf/error.hpp"
#include "ibf/log.hpp"

namespace ibf {

SignatureField extract_signatures(const Image& image, const FingerprintModel& model, const ModelParams& params,
                                  int stride, SignatureMode mode) {
    const int p = model.config().encoder.patch_size;
    if (image.width < p || image.height < p)
        throw ShapeError("extract_signatures: image " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " smaller than patch " + std::to_string(p));
    if (stride < 1) throw ConfigError("extract_signatures: stride must be >= 1");
    if (image.channels != model.config().constrained.in_channels)
        throw ShapeError("extract_signatures: channel count does not match the model");

    SignatureField f;
    f.rows = (image.height - p) / stride + 1;
    f.cols = (image.width - p) / stride + 1;
    f.patch_size = p;
    f.stride = stride;
    const int d = model.code_dim();
    f.dim = mode == SignatureMode::MeanAndScale ? 2 * d : d;
    f.features.resize(f.cells() * f.dim);

    constexpr int kChunk = 256;
    const int total = static_cast<int>(f.cells());
    for (int start = 0; start < total; start += kChunk) {
        const int n = std::min(kChunk, total - start);
        Tensor batch(n, image.channels, p, p);
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            const int cell = start + i;
            crop_into(image, (cell / f.cols) * stride, (cell % f.cols) * stride, p, batch, i);
        }
        const CodeBatch codes = model.encode_batch(batch, params, Mode::Eval);
        for (int i = 0; i < n; ++i) {
            double* dst = &f.features[static_cast<std::size_t>(start + i) * f.dim];
            for (int k = 0; k < d; ++k) {
                dst[k] = codes.mean[i * d + k];
                if (mode == SignatureMode::MeanAndScale) dst[d + k] = codes.scale[i * d + k];
            }
        }
    }
    for (double v : f.features)
        if (!std::isfinite(v)) throw DomainError("extract_signatures: non-finite signature");
    return f;
}

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Component {
    double weight = 0.5;
    Vec mean;
    Mat cov;
};

Eigen::Map<const RowMat> as_matrix(std::span<const double> samples, int dim) {
    return {samples.data(), static_cast<Eigen::Index>(samples.size() / dim), dim};
}

/// log N(x | mean, cov) for every row; also returns tr(cov^-1).
Vec log_density(const RowMat& x, const Component& c, double* trace_inv) {
    const int dim = static_cast<int>(x.cols());
    Eigen::LLT<Mat> llt(c.cov);
    if (llt.info() != Eigen::Success) throw DomainError("EM: covariance lost positive definiteness");
    const Mat& L = llt.matrixL();
    double logdet = 0.0;
    for (int i = 0; i < dim; ++i) logdet += 2.0 * std::log(L(i, i));
    Mat centered = (x.rowwise() - c.mean.transpose()).transpose();  // [dim][n]
    llt.matrixL().solveInPlace(centered);
    const Vec maha = centered.colwise().squaredNorm().transpose();
    if (trace_inv) *trace_inv = llt.solve(Mat::Identity(dim, dim)).trace();
    const double norm = -0.5 * (dim * std::log(2.0 * std::numbers::pi) + logdet);
    return (norm - 0.5 * maha.array()).matrix();
}

struct EStep {
    Mat resp;  // [n][2]
    double loglik = 0.0;
    double objective = 0.0;
};

EStep e_step(const RowMat& x, const std::array<Component, 2>& comps, double psi) {
    EStep e;
    const Eigen::Index n = x.rows();
    double tr[2];
    const Vec l0 = log_density(x, comps[0], &tr[0]);
    const Vec l1 = log_density(x, comps[1], &tr[1]);
    e.resp.resize(n, 2);
    const double lw0 = comps[0].weight > 0 ? std::log(comps[0].weight) : -std::numeric_limits<double>::infinity();
    const double lw1 = comps[1].weight > 0 ? std::log(comps[1].weight) : -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double a = lw0 + l0(i), b = lw1 + l1(i);
        const double m = std::max(a, b);
        const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
        e.resp(i, 0) = std::exp(a - lse);
        e.resp(i, 1) = std::exp(b - lse);
        e.loglik += lse;
    }
    e.objective = e.loglik - 0.5 * psi * (tr[0] + tr[1]);
    return e;
}

std::array<Component, 2> m_step(const RowMat& x, const Mat& resp, double psi, CovarianceKind kind,
                                const std::array<Component, 2>* previous) {
    const Eigen::Index n = x.rows();
    std::array<Component, 2> out;
    for (int k = 0; k < 2; ++k) {
        const Vec r = resp.col(k);
        double nk = r.sum();
        Component& c = out[k];
        c.weight = nk / static_cast<double>(n);
        if (nk < 1e-10) {
            c.mean = previous ? (*previous)[k].mean : x.colwise().mean().transpose();
            nk = 1e-10;
        } else {
            c.mean = (x.transpose() * r) / nk;
        }
        const Mat centered = x.rowwise() - c.mean.transpose();
        Mat s = (centered.transpose() * r.asDiagonal() * centered) / nk;
        if (kind == CovarianceKind::Diagonal) s = Mat(s.diagonal().asDiagonal());
        s = 0.5 * (s + s.transpose());
        s.diagonal().array() += psi / nk;
        c.cov = std::move(s);
    }
    return out;
}

/// k-means++ seeding followed by Lloyd iterations; returns hard labels.
std::vector<int> kmeans2(const RowMat& x, std::mt19937_64& rng) {
    const Eigen::Index n = x.rows();
    std::array<Vec, 2> centers;
    centers[0] = x.row(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng)).transpose();
    Vec d2 = (x.rowwise() - centers[0].transpose()).rowwise().squaredNorm();
    if (d2.sum() > 0.0) {
        std::discrete_distribution<Eigen::Index> pick(d2.data(), d2.data() + n);
        centers[1] = x.row(pick(rng)).transpose();
    } else {
        centers[1] = centers[0];
    }
    std::vector<int> label(n, -1);
    for (int it = 0; it < 100; ++it) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double a = (x.row(i).transpose() - centers[0]).squaredNorm();
            const double b = (x.row(i).transpose() - centers[1]).squaredNorm();
            const int l = b < a ? 1 : 0;
            if (l != label[i]) {
                label[i] = l;
                changed = true;
            }
        }
        if (!changed) break;
        for (int k = 0; k < 2; ++k) {
            Vec sum = Vec::Zero(x.cols());
            int count = 0;
            for (Eigen::Index i = 0; i < n; ++i)
                if (label[i] == k) {
                    sum += x.row(i).transpose();
                    ++count;
                }
            if (count > 0) centers[k] = sum / count;
        }
    }
    // Keep both clusters populated.
    for (int k = 0; k < 2; ++k)
        if (std::count(label.begin(), label.end(), k) == 0) {
            Eigen::Index far = 0;
            (x.rowwise() - centers[1 - k].transpose()).rowwise().squaredNorm().maxCoeff(&far);
            label[far] = k;
        }
    return label;
}

Gmm2 to_gmm(const std::array<Component, 2>& comps, int dim) {
    Gmm2 g;
    g.dim = dim;
    for (int k = 0; k < 2; ++k) {
        g.weights[k] = comps[k].weight;
        g.means[k].assign(comps[k].mean.data(), comps[k].mean.data() + dim);
        g.covariances[k].resize(static_cast<std::size_t>(dim) * dim);
        for (int r = 0; r < dim; ++r)
            for (int c = 0; c < dim; ++c) g.covariances[k][r * dim + c] = comps[k].cov(r, c);
    }
    return g;
}

std::array<Component, 2> from_gmm(const Gmm2& g) {
    std::array<Component, 2> comps;
    for (int k = 0; k < 2; ++k) {
        comps[k].weight = g.weights[k];
        comps[k].mean = Eigen::Map<const Vec>(g.means[k].data(), g.dim);
        comps[k].cov = Eigen::Map<const RowMat>(g.covariances[k].data(), g.dim, g.dim);
    }
    return comps;
}

}  // namespace

std::vector<std::array<double, 2>> Gmm2::responsibilities(std::span<const double> samples) const {
    if (dim < 1 || samples.size() % dim != 0) throw ShapeError("responsibilities: sample size mismatch");
    const RowMat x = as_matrix(samples, dim);
    const EStep e = e_step(x, from_gmm(*this), 0.0);
    std::vector<std::array<double, 2>> out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out[i] = {e.resp(i, 0), e.resp(i, 1)};
    return out;
}

Gmm2 Gmm2::swapped() const {
    Gmm2 g = *this;
    std::swap(g.weights[0], g.weights[1]);
    std::swap(g.means[0], g.means[1]);
    std::swap(g.covariances[0], g.covariances[1]);
    return g;
}

Gmm2 fit_gmm2(std::span<const double> samples, int dim, const EmConfig& cfg) {
    if (dim < 1 || samples.size() % dim != 0) throw ShapeError("fit_gmm2: sample size mismatch");
    const auto n = static_cast<Eigen::Index>(samples.size() / dim);
    if (n < 2 * dim + 2)
        throw DataError("fit_gmm2: need at least " + std::to_string(2 * dim + 2) + " samples, got " + std::to_string(n));
    if (cfg.restarts < 1 || cfg.max_iterations < 1) throw ConfigError("fit_gmm2: restarts and iterations must be >= 1");
    const RowMat x = as_matrix(samples, dim);

    const Vec global_mean = x.colwise().mean().transpose();
    const double trace = (x.rowwise() - global_mean.transpose()).squaredNorm() / static_cast<double>(n);
    const double spread = (x.colwise().maxCoeff() - x.colwise().minCoeff()).maxCoeff();
    if (!(spread > 1e-12 * (1.0 + x.cwiseAbs().maxCoeff())))
        throw DomainError("fit_gmm2: no separable classes (all signatures identical)");
    const double ridge = cfg.ridge_scale * trace / dim;
    const double psi = ridge * static_cast<double>(n) / 2.0;

    Gmm2 best;
    double best_objective = -std::numeric_limits<double>::infinity();
    for (int restart = 0; restart < cfg.restarts; ++restart) {
        std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(restart));
        const auto labels = kmeans2(x, rng);
        Mat resp = Mat::Zero(n, 2);
        for (Eigen::Index i = 0; i < n; ++i) resp(i, labels[i]) = 1.0;
        auto comps = m_step(x, resp, psi, cfg.covariance, nullptr);

        std::vector<double> trace_values;
        EStep e;
        int it = 0;
        for (; it < cfg.max_iterations; ++it) {
            e = e_step(x, comps, psi);
            if (!trace_values.empty()) {
                const double gain = e.objective - trace_values.back();
                if (gain < -1e-9 * std::max(1.0, std::abs(e.objective)))
                    log_warn("fit_gmm2: objective decreased by " + std::to_string(-gain));
                trace_values.push_back(e.objective);
                if (gain < cfg.tolerance) break;
            } else {
                trace_values.push_back(e.objective);
            }
            comps = m_step(x, e.resp, psi, cfg.covariance, &comps);
        }
        if (it == cfg.max_iterations) e = e_step(x, comps, psi);
        if (e.objective > best_objective) {
            best_objective = e.objective;
            best = to_gmm(comps, dim);
            best.objective_trace = std::move(trace_values);
            best.ridge = ridge;
            best.log_likelihood = e.loglik;
            best.iterations = it;
        }
    }
    return best;
}

Gmm2 fit_gmm2(const SignatureField& field, const EmConfig& cfg) { return fit_gmm2(field.features, field.dim, cfg); }

int spliced_component(const Gmm2& gmm, std::span<const double> samples) {
    const auto resp = gmm.responsibilities(samples);
    double mass[2] = {0.0, 0.0};
    for (const auto& r : resp) {
        mass[0] += r[0];
        mass[1] += r[1];
    }
    const double tie = 1e-9 * static_cast<double>(resp.size());
    if (std::abs(mass[0] - mass[1]) > tie) return mass[0] < mass[1] ? 0 : 1;

    const RowMat x = as_matrix(samples, gmm.dim);
    const Vec mean = x.colwise().mean().transpose();
    Mat cov = (x.rowwise() - mean.transpose()).transpose() * (x.rowwise() - mean.transpose()) /
              static_cast<double>(std::max<Eigen::Index>(1, x.rows()));
    cov.diagonal().array() += std::max(gmm.ridge, 1e-12);
    Eigen::LLT<Mat> llt(cov);
    double maha[2];
    for (int k = 0; k < 2; ++k) {
        const Vec diff = Eigen::Map<const Vec>(gmm.means[k].data(), gmm.dim) - mean;
        maha[k] = diff.dot(llt.solve(diff));
    }
    return maha[0] > maha[1] ? 0 : 1;
}

HeatMap splice_probability(const SignatureField& field, const Gmm2& gmm, int image_height, int image_width,
                           Upsampling mode) {
    if (field.dim != gmm.dim) throw ShapeError("splice_probability: field and mixture dimensions differ");
    if (field.cells() == 0) throw ShapeError("splice_probability: empty signature field");
    const int spliced = spliced_component(gmm, field.features);
    const auto resp = gmm.responsibilities(field.features);
    std::vector<double> cell(resp.size());
    for (std::size_t i = 0; i < resp.size(); ++i) cell[i] = resp[i][spliced];

    HeatMap map;
    map.width = image_width;
    map.height = image_height;
    map.values.assign(static_cast<std::size_t>(image_width) * image_height, 0.0);
    const int p = field.patch_size, s = field.stride;
    auto nearest = [&](int y, int x) {
        const int r = std::clamp(static_cast<int>(std::lround((y - (p - 1) / 2.0) / s)), 0, field.rows - 1);
        const int c = std::clamp(static_cast<int>(std::lround((x - (p - 1) / 2.0) / s)), 0, field.cols - 1);
        return cell[static_cast<std::size_t>(r) * field.cols + c];
    };

    if (mode == Upsampling::Nearest) {
        for (int y = 0; y < image_height; ++y)
            for (int x = 0; x < image_width; ++x) map.values[static_cast<std::size_t>(y) * image_width + x] = nearest(y, x);
        return map;
    }
    std::vector<double> sum(map.values.size(), 0.0);
    std::vector<int> count(map.values.size(), 0);
    for (int r = 0; r < field.rows; ++r)
        for (int c = 0; c < field.cols; ++c) {
            const double v = cell[static_cast<std::size_t>(r) * field.cols + c];
            for (int y = r * s; y < std::min(r * s + p, image_height); ++y)
                for (int x = c * s; x < std::min(c * s + p, image_width); ++x) {
                    sum[static_cast<std::size_t>(y) * image_width + x] += v;
                    ++count[static_cast<std::size_t>(y) * image_width + x];
                }
        }
    for (int y = 0; y < image_height; ++y)
        for (int x = 0; x < image_width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * image_width + x;
            map.values[i] = count[i] > 0 ? sum[i] / count[i] : nearest(y, x);
        }
    return map;
}

double otsu_threshold(std::span<const double> values) {
    if (values.empty()) throw DomainError("otsu_threshold: degenerate histogram (empty map)");
    constexpr int kBins = 256;
    std::array<double, kBins> hist{};
    for (double v : values) hist[std::clamp(static_cast<int>(v * kBins), 0, kBins - 1)] += 1.0;
    const double total = static_cast<double>(values.size());
    double mu_total = 0.0;
    for (int k = 0; k < kBins; ++k) mu_total += (k + 0.5) / kBins * hist[k] / total;

    std::array<double, kBins> between{};
    double omega = 0.0, mu = 0.0, best = 0.0;
    for (int k = 0; k < kBins - 1; ++k) {
        omega += hist[k] / total;
        mu += (k + 0.5) / kBins * hist[k] / total;
        if (omega <= 0.0 || omega >= 1.0) continue;
        const double num = mu_total * omega - mu;
        between[k] = num * num / (omega * (1.0 - omega));
        best = std::max(best, between[k]);
    }
    if (!(best > 0.0)) throw DomainError("otsu_threshold: degenerate histogram");
    const double tol = best * 1e-12;
    int first = 0;
    while (between[first] < best - tol) ++first;
    int last = first;
    while (last + 1 < kBins - 1 && between[last + 1] >= best - tol) ++last;
    const int mid = (first + last) / 2;
    return static_cast<double>(mid + 1) / kBins;
}

double otsu_threshold(const HeatMap& map) { return otsu_threshold(map.values); }

Mask binarize(const HeatMap& map, double threshold) {
    Mask m(map.width, map.height);
    for (std::size_t i = 0; i < map.values.size(); ++i) m.data[i] = map.values[i] > threshold ? 1 : 0;
    return m;
}

int LocalizationConfig::resolved_stride(int patch) const {
    if (stride < 0) throw ConfigError("stride must be >= 0");
    return stride > 0 ? stride : std::max(1, static_cast<int>(std::lround(patch / 2.0)));
}

nlohmann::json to_json(const LocalizationConfig& c) {
    return {{"stride", c.stride},
            {"signature", c.signature == SignatureMode::MeanAndScale ? "mean+scale" : "mean"},
            {"covariance", c.em.covariance == CovarianceKind::Full ? "full" : "diagonal"},
            {"upsampling", c.upsampling == Upsampling::Average ? "average" : "nearest"},
            {"em_restarts", c.em.restarts},
            {"em_max_iterations", c.em.max_iterations},
            {"em_tolerance", c.em.tolerance},
            {"em_seed", c.em.seed}};
}

Localization localize(const Image& image, const FingerprintModel& model, const ModelParams& params,
                      const LocalizationConfig& cfg) {
    Localization loc;
    loc.stride = cfg.resolved_stride(model.config().encoder.patch_size);
    const SignatureField field = extract_signatures(image, model, params, loc.stride, cfg.signature);
    loc.grid_rows = field.rows;
    loc.grid_cols = field.cols;
    auto uniform = [&] {
        loc.degenerate = true;
        loc.map.width = image.width;
        loc.map.height = image.height;
        loc.map.values.assign(static_cast<std::size_t>(image.width) * image.height, 0.5);
        loc.map.threshold_method = "none";
        loc.map.threshold = 0.5;
    };
    if (field.cells() < static_cast<std::size_t>(2 * field.dim + 2)) {
        log_warn("localize: grid of " + std::to_string(field.cells()) + " cells is too small for EM");
        uniform();
        return loc;
    }
    Gmm2 gmm;
    try {
        gmm = fit_gmm2(field, cfg.em);
    } catch (const DomainError& ex) {
        log_warn(std::string("localize: ") + ex.what());
        uniform();
        return loc;
    }
    loc.gmm_loglik = gmm.log_likelihood;
    loc.map = splice_probability(field, gmm, image.height, image.width, cfg.upsampling);
    try {
        loc.map.threshold = otsu_threshold(loc.map);
        loc.map.threshold_method = "otsu";
    } catch (const DomainError&) {
        loc.map.threshold = 0.5;
        loc.map.threshold_method = "fixed";
    }
    return loc;
}

void write_heatmap(const std::filesystem::path& png, const std::filesystem::path& sidecar, const Localization& loc) {
    Image img(loc.map.width, loc.map.height, 1);
    img.data = loc.map.values;
    write_png(png, img);
    const nlohmann::json j = {{"threshold_method", loc.map.threshold_method},
                              {"threshold", loc.map.threshold},
                              {"gmm_loglik", loc.gmm_loglik},
                              {"grid_shape", {loc.grid_rows, loc.grid_cols}},
                              {"stride", loc.stride},
                              {"degenerate", loc.degenerate}};
    std::ofstream os(sidecar, std::ios::trunc);
    if (!os) throw DataError("cannot write " + sidecar.string());
    os << j.dump(2) << '\n';
}

HeatMap read_heatmap(const std::filesystem::path& png) {
    const Image img = read_png(png);
    HeatMap m;
    m.width = img.width;
    m.height = img.height;
    m.values.assign(img.data.begin(), img.data.begin() + static_cast<std::ptrdiff_t>(img.width) * img.height);
    return m;
}

}  // namespace ibf
