#include "ibf/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "ibf/error.hpp"

namespace ibf {

void ConstrainedConvSpec::validate() const {
    if (num_filters < 1) throw ConfigError("constrained conv: num_filters must be >= 1");
    if (support < 1 || support % 2 == 0)
        throw ConfigError("constrained conv: support must be a positive odd integer");
    if (in_channels < 1) throw ConfigError("constrained conv: in_channels must be >= 1");
}

ModelConfig ModelConfig::toy_default() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
    ModelConfig c;
    c.constrained = {64, 3, 3};
    c.encoder.patch_size = 49;
    c.encoder.channels = 64;
    c.encoder.num_residual_groups = 4;
    c.encoder.code_dim = 36;
    c.num_classes = 27;
    return c;
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.constrained = {3, 3, 3};
    c.encoder.patch_size = 9;
    c.encoder.channels = 3;
    c.encoder.num_residual_groups = 1;
    c.encoder.code_dim = 4;
    c.encoder.group_kernel_a = 3;
    c.encoder.group_kernel_b = 3;
    c.num_classes = 3;
    return c;
}

int ModelConfig::final_kernel() const {
    int size = encoder.patch_size - constrained.support + 1;
    size -= encoder.num_residual_groups * ((encoder.group_kernel_a - 1) + (encoder.group_kernel_b - 1));
    return size;
}

void ModelConfig::validate() const {
    constrained.validate();
    const auto& e = encoder;
    if (e.patch_size < constrained.support)
        throw ConfigError("encoder: patch_size smaller than constrained support");
    if (e.channels < 1) throw ConfigError("encoder: channels must be >= 1");
    if (e.num_residual_groups < 0) throw ConfigError("encoder: num_residual_groups must be >= 0");
    if (e.code_dim < 1) throw ConfigError("encoder: code_dim must be >= 1");
    if (e.group_kernel_a < 1 || e.group_kernel_b < 1)
        throw ConfigError("encoder: group kernels must be >= 1");
    if (num_classes < 2) throw ConfigError("decoder: num_classes must be >= 2");
    if (final_kernel() < 1)
        throw ConfigError("encoder: patch_size " + std::to_string(e.patch_size) +
                          " too small for the configured groups to reach a 1x1 output");
}

std::size_t ModelConfig::parameter_count() const {
    const FingerprintModel m(*this);
    return m.init_params(0).trainable_count();
}

nlohmann::json to_json(const ModelConfig& cfg) {
    return {
        {"constrained",
         {{"num_filters", cfg.constrained.num_filters},
          {"support", cfg.constrained.support},
          {"in_channels", cfg.constrained.in_channels}}},
        {"encoder",
         {{"patch_size", cfg.encoder.patch_size},
          {"channels", cfg.encoder.channels},
          {"num_residual_groups", cfg.encoder.num_residual_groups},
          {"code_dim", cfg.encoder.code_dim},
          {"group_kernel_a", cfg.encoder.group_kernel_a},
          {"group_kernel_b", cfg.encoder.group_kernel_b},
          {"scale", cfg.encoder.scale == ScaleParameterization::Softplus ? "softplus"
                                                                         : "exp-half-logvar"}}},
        {"num_classes", cfg.num_classes},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        const auto& cc = j.at("constrained");
        c.constrained.num_filters = cc.at("num_filters").get<int>();
        c.constrained.support = cc.at("support").get<int>();
        c.constrained.in_channels = cc.at("in_channels").get<int>();
        const auto& e = j.at("encoder");
        c.encoder.patch_size = e.at("patch_size").get<int>();
        c.encoder.channels = e.at("channels").get<int>();
        c.encoder.num_residual_groups = e.at("num_residual_groups").get<int>();
        c.encoder.code_dim = e.at("code_dim").get<int>();
        c.encoder.group_kernel_a = e.at("group_kernel_a").get<int>();
        c.encoder.group_kernel_b = e.at("group_kernel_b").get<int>();
        const auto scale = e.at("scale").get<std::string>();
        if (scale == "softplus")
            c.encoder.scale = ScaleParameterization::Softplus;
        else if (scale == "exp-half-logvar")
            c.encoder.scale = ScaleParameterization::ExpHalfLogVar;
        else
            throw ConfigError("unknown scale parameterization: " + scale);
        c.num_classes = j.at("num_classes").get<int>();
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("model config: ") + ex.what());
    }
    c.validate();
    return c;
}

std::size_t ModelParams::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
        if (tensors[i].name == name) return i;
    throw DataError("no parameter tensor named " + name);
}

std::size_t ModelParams::trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors)
        if (t.trainable()) n += t.values.size();
    return n;
}

ParamGrads ParamGrads::zeros_like(const ModelParams& p) {
    ParamGrads g;
    g.values.reserve(p.tensors.size());
    for (const auto& t : p.tensors) g.values.emplace_back(t.trainable() ? t.values.size() : 0, 0.0);
    return g;
}

void ParamGrads::set_zero() {
    for (auto& v : values) std::fill(v.begin(), v.end(), 0.0);
}

StochasticCode CodeBatch::code(int i) const {
    StochasticCode c;
    c.mean.assign(mean.begin() + i * d, mean.begin() + (i + 1) * d);
    c.scale.assign(scale.begin() + i * d, scale.begin() + (i + 1) * d);
    return c;
}

double scale_from_pre(double pre, ScaleParameterization p) {
    double s = 0.0;
    if (p == ScaleParameterization::Softplus)
        s = pre > 0.0 ? pre + std::log1p(std::exp(-pre)) : std::log1p(std::exp(pre));
    else
        s = std::exp(0.5 * pre);
    return std::max(s, kMinScale);
}

double scale_derivative(double pre, ScaleParameterization p) {
    if (p == ScaleParameterization::Softplus) {
        const double s = pre > 0.0 ? pre + std::log1p(std::exp(-pre)) : std::log1p(std::exp(pre));
        if (s < kMinScale) return 0.0;
        return 1.0 / (1.0 + std::exp(-pre));
    }
    const double s = std::exp(0.5 * pre);
    return s < kMinScale ? 0.0 : 0.5 * s;
}

Tensor constrained_conv_forward(const Tensor& patch, const ConstrainedConvSpec& spec,
                                std::span<const double> weights) {
    spec.validate();
    if (weights.size() != spec.weight_count())
        throw ConfigError("constrained conv: expected " + std::to_string(spec.weight_count()) +
                          " weights, got " + std::to_string(weights.size()));
    if (patch.c != spec.in_channels)
        throw ConfigError("constrained conv: patch channels do not match spec");
    if (patch.h < spec.support || patch.w < spec.support)
        throw ConfigError("constrained conv: patch smaller than filter support");
    kernels::parallel::ConvWorkspace ws;
    return kernels::parallel::conv2d_forward(
        patch, weights, {spec.in_channels, spec.num_filters, spec.support, 0}, ws);
}

namespace {

std::vector<double> filter_sums(std::span<const double> weights, const ConstrainedConvSpec& spec) {
    if (weights.size() != spec.weight_count())
        throw ConfigError("constrained conv: weight count does not match spec");
    const std::size_t per = weights.size() / spec.num_filters;
    std::vector<double> sums(spec.num_filters, 0.0);
    for (int k = 0; k < spec.num_filters; ++k)
        for (std::size_t i = 0; i < per; ++i) sums[k] += weights[k * per + i];
    return sums;
}

}  // namespace

double constraint_penalty(std::span<const double> weights, const ConstrainedConvSpec& spec) {
    double sq = 0.0;
    for (double r : filter_sums(weights, spec)) sq += r * r;
    return std::sqrt(sq);
}

void constraint_penalty_gradient(std::span<const double> weights, const ConstrainedConvSpec& spec,
                                 double scale, std::span<double> grad) {
    const auto sums = filter_sums(weights, spec);
    double sq = 0.0;
    for (double r : sums) sq += r * r;
    if (sq == 0.0) return;  // subgradient 0 at the kink
    const double norm = std::sqrt(sq);
    const std::size_t per = weights.size() / spec.num_filters;
    for (int k = 0; k < spec.num_filters; ++k)
        for (std::size_t i = 0; i < per; ++i) grad[k * per + i] += scale * sums[k] / norm;
}

void project_zero_sum(std::span<double> weights, const ConstrainedConvSpec& spec) {
    const auto sums = filter_sums(weights, spec);
    const std::size_t per = weights.size() / spec.num_filters;
    for (int k = 0; k < spec.num_filters; ++k) {
        const double mean = sums[k] / static_cast<double>(per);
        for (std::size_t i = 0; i < per; ++i) weights[k * per + i] -= mean;
        // Rounding can leave a residue; fold it into the center tap.
        double residue = 0.0;
        for (std::size_t i = 0; i < per; ++i) residue += weights[k * per + i];
        weights[k * per + per / 2] -= residue;
    }
}

StochasticCode make_code(std::vector<double> mean, std::vector<double> scale) {
    if (mean.size() != scale.size()) throw ShapeError("code: mean and scale lengths differ");
    for (double s : scale)
        if (!(s > 0.0)) throw DomainError("code: scale must be strictly positive");
    return {std::move(mean), std::move(scale)};
}

std::vector<double> sample_code(const StochasticCode& code, std::span<const double> noise) {
    if (noise.size() != code.mean.size()) throw ShapeError("sample_code: noise length mismatch");
    std::vector<double> z(code.mean.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = code.mean[i] + code.scale[i] * noise[i];
    return z;
}

std::vector<double> softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

FingerprintModel::FingerprintModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& e = cfg_.encoder;
    const auto& cs = cfg_.constrained;

    Stage first;
    first.a = add_conv_unit("constrained", {cs.in_channels, cs.num_filters, cs.support, 0},
                            ParamKind::ConstrainedKernel, true);
    constrained_w_ = first.a.w;
    stages_.push_back(first);

    int ch = cs.num_filters;
    auto conv_stage = [&](const std::string& name, int kernel) {
        Stage s;
        s.a = add_conv_unit(name, {ch, e.channels, kernel, 0}, ParamKind::Kernel, true);
        stages_.push_back(s);
        ch = e.channels;
    };
    auto res_stage = [&](const std::string& name) {
        Stage s;
        s.kind = Stage::Kind::Residual;
        s.a = add_conv_unit(name + ".a", {ch, ch, 3, 1}, ParamKind::Kernel, true);
        s.b = add_conv_unit(name + ".b", {ch, ch, 3, 1}, ParamKind::Kernel, false);
        stages_.push_back(s);
    };
    for (int g = 0; g < e.num_residual_groups; ++g) {
        const std::string p = "group" + std::to_string(g);
        conv_stage(p + ".conv_a", e.group_kernel_a);
        res_stage(p + ".res_a");
        conv_stage(p + ".conv_b", e.group_kernel_b);
        res_stage(p + ".res_b");
    }
    conv_stage("final", cfg_.final_kernel());

    head_geom_ = {ch, 2 * e.code_dim, 1, 0};
    head_w_ = add_tensor("head.weight", ParamKind::Kernel, {2 * e.code_dim, ch, 1, 1});
    head_b_ = add_tensor("head.bias", ParamKind::Bias, {2 * e.code_dim});
    dec_w_ = add_tensor("decoder.weight", ParamKind::Kernel, {cfg_.num_classes, e.code_dim});
    dec_b_ = add_tensor("decoder.bias", ParamKind::Bias, {cfg_.num_classes});
}

std::size_t FingerprintModel::add_tensor(std::string name, ParamKind kind, std::vector<int> shape) {
    ParamTensor t;
    t.name = std::move(name);
    t.kind = kind;
    t.shape = std::move(shape);
    layout_.tensors.push_back(std::move(t));
    return layout_.tensors.size() - 1;
}

FingerprintModel::ConvUnit FingerprintModel::add_conv_unit(const std::string& prefix,
                                                           kernels::ConvGeometry g,
                                                           ParamKind kernel_kind, bool relu) {
    ConvUnit u;
    u.geom = g;
    u.relu = relu;
    u.w = add_tensor(prefix + ".weight", kernel_kind, {g.out_channels, g.in_channels, g.kernel, g.kernel});
    u.gamma = add_tensor(prefix + ".bn.scale", ParamKind::NormScale, {g.out_channels});
    u.beta = add_tensor(prefix + ".bn.shift", ParamKind::NormShift, {g.out_channels});
    u.mean = add_tensor(prefix + ".bn.running_mean", ParamKind::RunningMean, {g.out_channels});
    u.var = add_tensor(prefix + ".bn.running_var", ParamKind::RunningVar, {g.out_channels});
    return u;
}

ModelParams FingerprintModel::init_params(std::uint64_t seed) const {
    ModelParams p = layout_;
    std::mt19937_64 rng(seed);
    for (auto& t : p.tensors) {
        std::size_t count = 1;
        for (int s : t.shape) count *= static_cast<std::size_t>(s);
        t.values.assign(count, 0.0);
        switch (t.kind) {
            case ParamKind::ConstrainedKernel:
            case ParamKind::Kernel: {
                const std::size_t fan_in = count / static_cast<std::size_t>(t.shape[0]);
                double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
                if (&t - p.tensors.data() == static_cast<std::ptrdiff_t>(dec_w_) ||
                    &t - p.tensors.data() == static_cast<std::ptrdiff_t>(head_w_))
                    stddev = std::sqrt(1.0 / static_cast<double>(fan_in));
                std::normal_distribution<double> nd(0.0, stddev);
                for (double& v : t.values) v = nd(rng);
                break;
            }
            case ParamKind::NormScale:
            case ParamKind::RunningVar:
                std::fill(t.values.begin(), t.values.end(), 1.0);
                break;
            default:
                break;
        }
    }
    project_zero_sum(p.tensors[constrained_w_].values, cfg_.constrained);
    return p;
}

Tensor FingerprintModel::unit_forward(const ConvUnit& u, const Tensor& x, const ModelParams& params,
                                      Mode mode, ConvUnitCache* cache) const {
    const auto& w = params.tensors[u.w].values;
    const auto& gamma = params.tensors[u.gamma].values;
    const auto& beta = params.tensors[u.beta].values;
    Tensor y;
    if (mode == Mode::Train) {
        Tensor conv = kernels::parallel::conv2d_forward(x, w, u.geom, cache->conv);
        y = kernels::batchnorm_forward_train(conv, gamma, beta, cache->bn);
    } else {
        kernels::parallel::ConvWorkspace ws;
        Tensor conv = kernels::parallel::conv2d_forward(x, w, u.geom, ws);
        y = kernels::batchnorm_forward_eval(conv, gamma, beta, params.tensors[u.mean].values,
                                            params.tensors[u.var].values);
    }
    if (u.relu) kernels::relu_inplace(y);
    if (cache != nullptr && u.relu) cache->out = y;
    return y;
}

Tensor FingerprintModel::unit_backward(const ConvUnit& u, Tensor grad, const ModelParams& params,
                                       const ConvUnitCache& cache, ParamGrads& grads) const {
    if (u.relu) kernels::relu_backward_inplace(grad, cache.out);
    Tensor g = kernels::batchnorm_backward(grad, params.tensors[u.gamma].values, cache.bn,
                                           grads.values[u.gamma], grads.values[u.beta]);
    return kernels::parallel::conv2d_backward(cache.conv, params.tensors[u.w].values, u.geom, g,
                                              grads.values[u.w]);
}

CodeBatch FingerprintModel::encode_batch(const Tensor& x, const ModelParams& params, Mode mode,
                                         Cache* cache) const {
    const int p = cfg_.encoder.patch_size;
    if (x.c != cfg_.constrained.in_channels || x.h != p || x.w != p)
        throw ShapeError("encode: expected patches of " + std::to_string(cfg_.constrained.in_channels) +
                         "x" + std::to_string(p) + "x" + std::to_string(p) + ", got " +
                         std::to_string(x.c) + "x" + std::to_string(x.h) + "x" + std::to_string(x.w));
    if (mode == Mode::Train && cache == nullptr)
        throw ConfigError("encode_batch: training mode requires a cache");
    if (cache != nullptr) {
        cache->n = x.n;
        cache->a.assign(stages_.size(), {});
        cache->b.assign(stages_.size(), {});
        cache->stage_out.assign(stages_.size(), {});
    }

    Tensor h = x;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const Stage& st = stages_[s];
        ConvUnitCache* ca = cache ? &cache->a[s] : nullptr;
        if (st.kind == Stage::Kind::Conv) {
            h = unit_forward(st.a, h, params, mode, ca);
        } else {
            Tensor t = unit_forward(st.a, h, params, mode, ca);
            t = unit_forward(st.b, t, params, mode, cache ? &cache->b[s] : nullptr);
            for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += h.data[i];
            kernels::relu_inplace(t);
            h = std::move(t);
            if (cache) cache->stage_out[s] = h;
        }
    }

    kernels::parallel::ConvWorkspace local;
    Tensor head = kernels::parallel::conv2d_forward(h, params.tensors[head_w_].values, head_geom_,
                                                    cache ? cache->head : local);
    const int d = cfg_.encoder.code_dim;
    const auto& bias = params.tensors[head_b_].values;
    CodeBatch out;
    out.n = x.n;
    out.d = d;
    out.mean.resize(static_cast<std::size_t>(x.n) * d);
    out.pre_scale.resize(out.mean.size());
    out.scale.resize(out.mean.size());
    for (int n = 0; n < x.n; ++n)
        for (int i = 0; i < d; ++i) {
            out.mean[n * d + i] = head.at(n, i, 0, 0) + bias[i];
            const double pre = head.at(n, d + i, 0, 0) + bias[d + i];
            out.pre_scale[n * d + i] = pre;
            out.scale[n * d + i] = scale_from_pre(pre, cfg_.encoder.scale);
        }
    if (cache) cache->head_out = std::move(head);
    return out;
}

void FingerprintModel::backward(const Cache& cache, const ModelParams& params,
                                std::span<const double> grad_mean, std::span<const double> grad_scale,
                                ParamGrads& grads) const {
    const int d = cfg_.encoder.code_dim;
    const int n = cache.n;
    Tensor gh(n, 2 * d, 1, 1);
    auto& gbias = grads.values[head_b_];
    for (int s = 0; s < n; ++s)
        for (int i = 0; i < d; ++i) {
            const double pre = cache.head_out.at(s, d + i, 0, 0) + params.tensors[head_b_].values[d + i];
            gh.at(s, i, 0, 0) = grad_mean[s * d + i];
            gh.at(s, d + i, 0, 0) = grad_scale[s * d + i] * scale_derivative(pre, cfg_.encoder.scale);
            gbias[i] += gh.at(s, i, 0, 0);
            gbias[d + i] += gh.at(s, d + i, 0, 0);
        }
    Tensor g = kernels::parallel::conv2d_backward(cache.head, params.tensors[head_w_].values, head_geom_,
                                                  gh, grads.values[head_w_]);

    for (std::size_t s = stages_.size(); s-- > 0;) {
        const Stage& st = stages_[s];
        if (st.kind == Stage::Kind::Conv) {
            g = unit_backward(st.a, std::move(g), params, cache.a[s], grads);
        } else {
            kernels::relu_backward_inplace(g, cache.stage_out[s]);
            Tensor skip = g;
            Tensor t = unit_backward(st.b, std::move(g), params, cache.b[s], grads);
            t = unit_backward(st.a, std::move(t), params, cache.a[s], grads);
            for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += skip.data[i];
            g = std::move(t);
        }
    }
}

void FingerprintModel::update_running_stats(const Cache& cache, ModelParams& params,
                                            double momentum) const {
    auto update = [&](const ConvUnit& u, const ConvUnitCache& c) {
        const double count = static_cast<double>(c.bn.xhat.n) * static_cast<double>(c.bn.xhat.plane());
        const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
        auto& rm = params.tensors[u.mean].values;
        auto& rv = params.tensors[u.var].values;
        for (std::size_t i = 0; i < rm.size(); ++i) {
            rm[i] = (1.0 - momentum) * rm[i] + momentum * c.bn.mean[i];
            rv[i] = (1.0 - momentum) * rv[i] + momentum * c.bn.var[i] * unbias;
        }
    };
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        update(stages_[s].a, cache.a[s]);
        if (stages_[s].kind == Stage::Kind::Residual) update(stages_[s].b, cache.b[s]);
    }
}

StochasticCode FingerprintModel::encode(const Tensor& patch, const ModelParams& params) const {
    Tensor x = patch;
    x.n = 1;
    if (patch.n > 1) throw ShapeError("encode: expected a single patch");
    return encode_batch(x, params, Mode::Eval).code(0);
}

std::vector<double> FingerprintModel::decode_logits(std::span<const double> z,
                                                    const ModelParams& params) const {
    const int d = cfg_.encoder.code_dim, m = cfg_.num_classes;
    if (static_cast<int>(z.size()) != d) throw ShapeError("decode: code length mismatch");
    const auto& w = params.tensors[dec_w_].values;
    const auto& b = params.tensors[dec_b_].values;
    std::vector<double> logits(m);
    for (int c = 0; c < m; ++c) {
        double acc = b[c];
        for (int i = 0; i < d; ++i) acc += w[c * d + i] * z[i];
        logits[c] = acc;
    }
    return logits;
}

std::vector<double> FingerprintModel::decode(std::span<const double> z, const ModelParams& params) const {
    return softmax(decode_logits(z, params));
}

std::vector<double> FingerprintModel::decode_backward(std::span<const double> z,
                                                      std::span<const double> grad_logits,
                                                      const ModelParams& params,
                                                      ParamGrads& grads) const {
    const int d = cfg_.encoder.code_dim, m = cfg_.num_classes;
    const auto& w = params.tensors[dec_w_].values;
    auto& gw = grads.values[dec_w_];
    auto& gb = grads.values[dec_b_];
    std::vector<double> gz(d, 0.0);
    for (int c = 0; c < m; ++c) {
        gb[c] += grad_logits[c];
        for (int i = 0; i < d; ++i) {
            gw[c * d + i] += grad_logits[c] * z[i];
            gz[i] += grad_logits[c] * w[c * d + i];
        }
    }
    return gz;
}

std::span<const double> FingerprintModel::constrained_weights(const ModelParams& params) const {
    return params.tensors[constrained_w_].values;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[8] = {'I', 'B', 'F', 'C', 'K', 'P', 'T', '\0'};

const char* kind_name(ParamKind k) {
    switch (k) {
        case ParamKind::ConstrainedKernel: return "constrained_kernel";
        case ParamKind::Kernel: return "kernel";
        case ParamKind::Bias: return "bias";
        case ParamKind::NormScale: return "norm_scale";
        case ParamKind::NormShift: return "norm_shift";
        case ParamKind::RunningMean: return "running_mean";
        case ParamKind::RunningVar: return "running_var";
    }
    return "kernel";
}

ParamKind kind_from_name(const std::string& s) {
    for (auto k : {ParamKind::ConstrainedKernel, ParamKind::Kernel, ParamKind::Bias, ParamKind::NormScale,
                   ParamKind::NormShift, ParamKind::RunningMean, ParamKind::RunningVar})
        if (s == kind_name(k)) return k;
    throw DataError("checkpoint: unknown tensor kind " + s);
}

template <class T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw DataError("checkpoint: truncated file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["config"] = to_json(ckpt.config);
    header["metadata"] = ckpt.metadata;
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : ckpt.params.tensors)
        header["tensors"].push_back({{"name", t.name}, {"kind", kind_name(t.kind)}, {"shape", t.shape}});
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(os, kCheckpointVersion);
    write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ckpt.params.tensors) {
        write_le<std::uint64_t>(os, t.values.size());
        for (double v : t.values) write_le<double>(os, v);
    }
    write_le<std::uint64_t>(os, ckpt.rng_state.size());
    os.write(ckpt.rng_state.data(), static_cast<std::streamsize>(ckpt.rng_state.size()));
    if (!os) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("not a checkpoint file: " + path.string());
    const auto version = read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = read_le<std::uint64_t>(is);
    std::string text(header_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(header_len)))
        throw DataError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("checkpoint: bad header: ") + ex.what());
    }

    Checkpoint ck;
    ck.config = model_config_from_json(header.at("config"));
    ck.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& tj : header.at("tensors")) {
        ParamTensor t;
        t.name = tj.at("name").get<std::string>();
        t.kind = kind_from_name(tj.at("kind").get<std::string>());
        t.shape = tj.at("shape").get<std::vector<int>>();
        const auto count = read_le<std::uint64_t>(is);
        t.values.resize(count);
        for (auto& v : t.values) v = read_le<double>(is);
        ck.params.tensors.push_back(std::move(t));
    }
    const auto rng_len = read_le<std::uint64_t>(is);
    ck.rng_state.assign(rng_len, '\0');
    if (rng_len > 0 && !is.read(ck.rng_state.data(), static_cast<std::streamsize>(rng_len)))
        throw DataError("checkpoint: truncated rng state");

    const FingerprintModel model(ck.config);
    const ModelParams layout = model.init_params(0);
    if (layout.tensors.size() != ck.params.tensors.size())
        throw DataError("checkpoint: tensor count does not match config");
    for (std::size_t i = 0; i < layout.tensors.size(); ++i)
        if (layout.tensors[i].name != ck.params.tensors[i].name ||
            layout.tensors[i].values.size() != ck.params.tensors[i].values.size())
            throw DataError("checkpoint: tensor " + ck.params.tensors[i].name + " does not match config");
    return ck;
}

}  // namespace ibf
