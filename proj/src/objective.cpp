#include "ibf/objective.hpp"

#include <cmath>
#include <map>

#include "ibf/error.hpp"

namespace ibf {

void LossWeights::validate() const {
    if (!(beta >= 0.0) || !(lambda >= 0.0) || !(omega1 >= 0.0) || !(omega2 >= 0.0))
        throw ConfigError("loss weights must be nonnegative");
}

bool LossBreakdown::finite() const {
    return std::isfinite(distortion) && std::isfinite(rate) && std::isfinite(penalty) &&
           std::isfinite(l1) && std::isfinite(l2) && std::isfinite(total);
}

nlohmann::json loss_record(long step, double beta, const LossBreakdown& b) {
    return {{"step", step}, {"beta", beta},     {"D", b.distortion}, {"R", b.rate},
            {"penalty", b.penalty}, {"l1", b.l1}, {"l2", b.l2},      {"J", b.total}};
}

double rate_kl(const StochasticCode& code) {
    if (code.mean.size() != code.scale.size()) throw ShapeError("rate_kl: mean/scale length mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < code.mean.size(); ++i) {
        const double s = code.scale[i];
        if (!(s > 0.0)) throw DomainError("rate_kl: scale must be strictly positive");
        const double s2 = s * s;
        kl += code.mean[i] * code.mean[i] + s2 - std::log(s2) - 1.0;
    }
    return 0.5 * kl;
}

double distortion_ce(std::span<const double> probabilities, int label) {
    if (label < 0 || label >= static_cast<int>(probabilities.size()))
        throw DomainError("distortion_ce: label out of range");
    return -std::log(std::max(probabilities[label], kProbabilityFloor));
}

namespace {

struct Penalties {
    double penalty = 0.0;
    double l1 = 0.0;
    double l2 = 0.0;
};

Penalties weight_penalties(const FingerprintModel& model, const ModelParams& params) {
    Penalties p;
    p.penalty = constraint_penalty(model.constrained_weights(params), model.config().constrained);
    for (const auto& t : params.tensors) {
        if (!t.regularized()) continue;
        for (double v : t.values) {
            p.l1 += std::abs(v);
            p.l2 += v * v;
        }
    }
    return p;
}

LossBreakdown evaluate(const FingerprintModel& model, const ModelParams& params, const Batch& batch,
                       const LossWeights& weights, std::mt19937_64& rng, LossOptions opts,
                       ParamGrads* grads, FingerprintModel::Cache* cache) {
    weights.validate();
    if (batch.size() == 0) throw DataError("total_loss: empty batch");
    if (batch.patches.n != batch.size()) throw ShapeError("total_loss: patches and labels differ in count");
    if (opts.z_samples < 1) throw ConfigError("total_loss: z_samples must be >= 1");

    FingerprintModel::Cache local;
    FingerprintModel::Cache* c = cache ? cache : (opts.mode == Mode::Train ? &local : nullptr);
    const CodeBatch codes = model.encode_batch(batch.patches, params, opts.mode, c);
    const int n = codes.n, d = codes.d, m = model.num_classes();

    std::vector<double> grad_mean, grad_scale;
    if (grads) {
        grad_mean.assign(static_cast<std::size_t>(n) * d, 0.0);
        grad_scale.assign(grad_mean.size(), 0.0);
    }

    LossBreakdown out;
    std::normal_distribution<double> normal(0.0, 1.0);
    const double ce_weight = 1.0 / (static_cast<double>(n) * opts.z_samples);
    double ce_sum = 0.0, kl_sum = 0.0;
    std::vector<double> eps(d);
    for (int i = 0; i < n; ++i) {
        const StochasticCode code = codes.code(i);
        const int label = batch.labels[i];
        if (label < 0 || label >= m) throw DomainError("total_loss: label out of range");
        for (int s = 0; s < opts.z_samples; ++s) {
            for (double& e : eps) e = normal(rng);
            const auto z = sample_code(code, eps);
            const auto probs = model.decode(z, params);
            ce_sum += distortion_ce(probs, label);
            const bool floored = probs[label] < kProbabilityFloor;
            if (floored) ++out.clamped;
            if (grads && !floored) {
                std::vector<double> gl(probs);
                gl[label] -= 1.0;
                for (double& v : gl) v *= ce_weight;
                const auto gz = model.decode_backward(z, gl, params, *grads);
                for (int k = 0; k < d; ++k) {
                    grad_mean[i * d + k] += gz[k];
                    grad_scale[i * d + k] += gz[k] * eps[k];
                }
            }
        }
        kl_sum += rate_kl(code);
        if (grads && weights.beta != 0.0) {
            const double w = weights.beta / n;
            for (int k = 0; k < d; ++k) {
                const double mu = code.mean[k], sg = code.scale[k];
                grad_mean[i * d + k] += w * mu;
                grad_scale[i * d + k] += w * (sg - 1.0 / sg);
            }
        }
    }
    out.distortion = ce_sum / (static_cast<double>(n) * opts.z_samples);
    out.rate = kl_sum / n;

    const Penalties pen = weight_penalties(model, params);
    out.penalty = pen.penalty;
    out.l1 = pen.l1;
    out.l2 = pen.l2;
    out.total = out.distortion + weights.beta * out.rate + weights.lambda * out.penalty +
                weights.omega1 * out.l1 + weights.omega2 * out.l2;

    if (grads) {
        model.backward(*c, params, grad_mean, grad_scale, *grads);
        if (weights.lambda != 0.0)
            constraint_penalty_gradient(model.constrained_weights(params), model.config().constrained,
                                        weights.lambda, grads->values[model.constrained_index()]);
        for (std::size_t t = 0; t < params.tensors.size(); ++t) {
            const auto& pt = params.tensors[t];
            if (!pt.regularized()) continue;
            auto& g = grads->values[t];
            for (std::size_t i = 0; i < pt.values.size(); ++i) {
                const double v = pt.values[i];
                const double sign = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                g[i] += weights.omega1 * sign + 2.0 * weights.omega2 * v;
            }
        }
    }
    return out;
}

}  // namespace

LossBreakdown total_loss(const FingerprintModel& model, const ModelParams& params, const Batch& batch,
                         const LossWeights& weights, std::mt19937_64& rng, LossOptions opts) {
    return evaluate(model, params, batch, weights, rng, opts, nullptr, nullptr);
}

LossBreakdown total_loss_and_gradient(const FingerprintModel& model, const ModelParams& params,
                                      const Batch& batch, const LossWeights& weights,
                                      std::mt19937_64& rng, ParamGrads& grads,
                                      FingerprintModel::Cache& cache, LossOptions opts) {
    if (opts.mode != Mode::Train) throw ConfigError("gradients require training mode");
    return evaluate(model, params, batch, weights, rng, opts, &grads, &cache);
}

void BinningConfig::validate(std::size_t dims) const {
    if (num_bins < 2) throw ConfigError("binning: num_bins must be >= 2");
    if (ranges.empty() || (ranges.size() != 1 && ranges.size() != dims))
        throw ConfigError("binning: need one range, or one range per dimension");
    for (const auto& r : ranges)
        if (!(r.hi > r.lo)) throw ConfigError("binning: empty value range");
}

int BinningConfig::bin_of(double v, std::size_t dim) const {
    const BinRange& r = ranges.size() == 1 ? ranges[0] : ranges[dim];
    if (!(v >= r.lo && v <= r.hi)) throw DomainError("binning: value outside configured range");
    const int b = static_cast<int>((v - r.lo) / (r.hi - r.lo) * num_bins);
    return std::min(b, num_bins - 1);
}

namespace {

std::vector<std::int64_t> cell_ids(const SampleMatrix& m, const BinningConfig& cfg) {
    cfg.validate(m.cols);
    std::vector<std::int64_t> ids(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) {
        std::int64_t id = 0;
        for (std::size_t c = 0; c < m.cols; ++c) id = id * cfg.num_bins + cfg.bin_of(m.at(r, c), c);
        ids[r] = id;
    }
    return ids;
}

}  // namespace

double binned_mi(const SampleMatrix& x, const BinningConfig& x_bins, const SampleMatrix& z,
                 const BinningConfig& z_bins) {
    if (x.rows == 0 || z.rows == 0) throw DataError("binned_mi: empty sample set");
    if (x.rows != z.rows) throw ShapeError("binned_mi: sample counts differ");
    const auto xi = cell_ids(x, x_bins);
    const auto zi = cell_ids(z, z_bins);

    std::map<std::int64_t, double> px, pz;
    std::map<std::pair<std::int64_t, std::int64_t>, double> pxz;
    for (std::size_t r = 0; r < xi.size(); ++r) {
        px[xi[r]] += 1.0;
        pz[zi[r]] += 1.0;
        pxz[{xi[r], zi[r]}] += 1.0;
    }
    const double n = static_cast<double>(xi.size());
    double mi = 0.0;
    for (const auto& [key, count] : pxz)
        mi += count / n * std::log(count * n / (px[key.first] * pz[key.second]));
    return std::max(mi, 0.0);
}

}  // namespace ibf
