#pragma once

// Constrained-convolution front end, residual encoder producing a Gaussian
// code, and the softmax decoder.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibf/kernels.hpp"
#include "ibf/tensor.hpp"

namespace ibf {

enum class ScaleParameterization { Softplus, ExpHalfLogVar };

struct ConstrainedConvSpec {
    int num_filters = 16;
    int support = 3;
    int in_channels = 3;

    void validate() const;
    std::size_t weight_count() const {
        return static_cast<std::size_t>(num_filters) * in_channels * support * support;
    }
};

/// Encoder layout. Each residual group is: conv(kernel_a, valid) -> res block
/// -> conv(kernel_b, valid) -> res block. A final valid conv whose kernel is
/// derived from the remaining spatial extent reduces the map to 1x1, and a
/// 1x1 head emits 2*code_dim channels.
struct EncoderConfig {
    int patch_size = 17;
    int channels = 16;
    int num_residual_groups = 1;
    int code_dim = 8;
    int group_kernel_a = 7;
    int group_kernel_b = 5;
    ScaleParameterization scale = ScaleParameterization::Softplus;
};

struct ModelConfig {
    ConstrainedConvSpec constrained;
    EncoderConfig encoder;
    int num_classes = 4;

    /// Desk-scale default: 17x17 patches, 16 channels, one group, d=8, M=4.
    static ModelConfig toy_default();
    /// 49x49 patches, 64 filters, four groups, d=36, 27 camera models.
    static ModelConfig full_scale();
    /// 9x9 patches, d=4; small enough for finite-difference checks.
    static ModelConfig tiny();

    /// Throws ConfigError when the layout cannot reach a 1x1 output.
    void validate() const;
    int final_kernel() const;
    std::size_t parameter_count() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class ParamKind {
    ConstrainedKernel,
    Kernel,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
};

struct ParamTensor {
    std::string name;
    ParamKind kind = ParamKind::Kernel;
    std::vector<int> shape;
    std::vector<double> values;

    bool trainable() const { return kind != ParamKind::RunningMean && kind != ParamKind::RunningVar; }
    /// Weights that enter the L1/L2 penalties.
    bool regularized() const { return kind == ParamKind::ConstrainedKernel || kind == ParamKind::Kernel; }
};

struct ModelParams {
    std::vector<ParamTensor> tensors;

    std::size_t index_of(const std::string& name) const;
    ParamTensor& at(const std::string& name) { return tensors[index_of(name)]; }
    const ParamTensor& at(const std::string& name) const { return tensors[index_of(name)]; }
    std::size_t trainable_count() const;
};

/// Gradient buffers aligned with ModelParams::tensors.
struct ParamGrads {
    std::vector<std::vector<double>> values;

    static ParamGrads zeros_like(const ModelParams& p);
    void set_zero();
};

struct StochasticCode {
    std::vector<double> mean;
    std::vector<double> scale;
};

/// Batched encoder head, split into mean and scale. Row-major [n][d].
struct CodeBatch {
    int n = 0;
    int d = 0;
    std::vector<double> mean;
    std::vector<double> pre_scale;
    std::vector<double> scale;

    StochasticCode code(int i) const;
};

enum class Mode { Train, Eval };

inline constexpr double kMinScale = 1e-6;

double scale_from_pre(double pre, ScaleParameterization p);
/// d(scale)/d(pre), zero where the clamp is active.
double scale_derivative(double pre, ScaleParameterization p);

Tensor constrained_conv_forward(const Tensor& patch, const ConstrainedConvSpec& spec,
                                std::span<const double> weights);

/// (sum_k R_k^2)^(1/2), R_k the sum of all weights of filter k over space and
/// input channels.
double constraint_penalty(std::span<const double> weights, const ConstrainedConvSpec& spec);
/// Adds scale * d(penalty)/d(weights) into grad.
void constraint_penalty_gradient(std::span<const double> weights, const ConstrainedConvSpec& spec,
                                 double scale, std::span<double> grad);
/// Subtracts each filter's mean so that every filter sums to zero.
void project_zero_sum(std::span<double> weights, const ConstrainedConvSpec& spec);

StochasticCode make_code(std::vector<double> mean, std::vector<double> scale);
std::vector<double> sample_code(const StochasticCode& code, std::span<const double> noise);
std::vector<double> softmax(std::span<const double> logits);

struct ConvUnitCache {
    kernels::parallel::ConvWorkspace conv;
    kernels::BatchNormCache bn;
    Tensor out;  // post-activation output
};

class FingerprintModel {
public:
    explicit FingerprintModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    int code_dim() const { return cfg_.encoder.code_dim; }
    int num_classes() const { return cfg_.num_classes; }

    ModelParams init_params(std::uint64_t seed) const;

    struct Cache;

    /// Runs the encoder on a batch [N,in_channels,P,P]. In Train mode, batch
    /// statistics are used and `cache` (required) receives what backward needs.
    CodeBatch encode_batch(const Tensor& x, const ModelParams& params, Mode mode,
                           Cache* cache = nullptr) const;
    /// Back-propagates gradients w.r.t. the code mean and scale ([n][d]).
    void backward(const Cache& cache, const ModelParams& params, std::span<const double> grad_mean,
                  std::span<const double> grad_scale, ParamGrads& grads) const;
    /// Exponential moving average of batch statistics into the running buffers.
    void update_running_stats(const Cache& cache, ModelParams& params, double momentum = 0.1) const;

    /// Deterministic eval-mode encoding of one patch [1,C,P,P] or [C,P,P].
    StochasticCode encode(const Tensor& patch, const ModelParams& params) const;

    std::vector<double> decode_logits(std::span<const double> z, const ModelParams& params) const;
    std::vector<double> decode(std::span<const double> z, const ModelParams& params) const;
    /// Adds d(loss)/d(W,b) for the given logit gradient; returns d(loss)/dz.
    std::vector<double> decode_backward(std::span<const double> z, std::span<const double> grad_logits,
                                        const ModelParams& params, ParamGrads& grads) const;

    std::span<const double> constrained_weights(const ModelParams& params) const;
    std::size_t constrained_index() const { return constrained_w_; }

private:
    struct ConvUnit {
        kernels::ConvGeometry geom;
        std::size_t w = 0, gamma = 0, beta = 0, mean = 0, var = 0;
        bool relu = true;
    };
    struct Stage {
        enum class Kind { Conv, Residual } kind = Kind::Conv;
        ConvUnit a;
        ConvUnit b;  // residual only
    };

    ConvUnit add_conv_unit(const std::string& prefix, kernels::ConvGeometry g,
                           ParamKind kernel_kind, bool relu);
    std::size_t add_tensor(std::string name, ParamKind kind, std::vector<int> shape);
    Tensor unit_forward(const ConvUnit& u, const Tensor& x, const ModelParams& params, Mode mode,
                        ConvUnitCache* cache) const;
    Tensor unit_backward(const ConvUnit& u, Tensor grad, const ModelParams& params,
                         const ConvUnitCache& cache, ParamGrads& grads) const;

    ModelConfig cfg_;
    ModelParams layout_;  // names, shapes and kinds; values unset
    std::vector<Stage> stages_;
    kernels::ConvGeometry head_geom_;
    std::size_t head_w_ = 0, head_b_ = 0, dec_w_ = 0, dec_b_ = 0, constrained_w_ = 0;
};

struct FingerprintModel::Cache {
    std::vector<ConvUnitCache> a;  // per stage
    std::vector<ConvUnitCache> b;  // per stage (residual only)
    std::vector<Tensor> stage_out;
    kernels::parallel::ConvWorkspace head;
    Tensor head_out;
    int n = 0;
};

/// Binary checkpoint: magic, format version, JSON header (model config and
/// caller metadata), tensors as little-endian doubles, RNG state text.
struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    std::string rng_state;
    nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ibf
