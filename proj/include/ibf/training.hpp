#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibf/dataset.hpp"
#include "ibf/model.hpp"
#include "ibf/objective.hpp"

namespace ibf {

enum class OptimizerKind { Adam, Sgd };

/// Three-phase schedule: constant base_lr, then linear to final_linear_lr,
/// then multiplied by exp_decay once per epoch.
struct TrainingConfig {
    int epochs = 40;
    int patches_per_epoch = 9984;  // 156 batches of 64
    int batch_size = 64;
    double base_lr = 1e-3;
    double final_linear_lr = 5e-5;
    int constant_epochs = 10;
    int linear_epochs = 25;
    int exponential_epochs = 5;
    double exp_decay = 0.9;
    LossWeights loss;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double sgd_momentum = 0.9;
    std::uint64_t seed = 1;       // model init and noise
    std::uint64_t data_seed = 2;  // patch sampling
    int validation_patches = 2000;
    int checkpoint_every = 0;     // epochs; 0 writes only the final checkpoint
    int log_every = 50;           // steps between loss records

    /// 700 epochs of 100,000 patches, batch 200, 1e-4 for 100 epochs, linear
    /// to 5e-6 over 530, x0.9 per epoch for the last 70.
    static TrainingConfig full_scale();
    void validate() const;
};

nlohmann::json to_json(const TrainingConfig& c);

double lr_at(int epoch, const TrainingConfig& cfg);

/// Uniform class, then uniform image within the class, then uniform crop.
/// Images smaller than the patch are skipped with a warning.
Batch sample_patches(const std::vector<LabeledImage>& images, int count, int patch_size, std::mt19937_64& rng);

struct RDPoint {
    double rate = 0.0;
    double distortion = 0.0;
    double beta = 0.0;
    int epoch = 0;
    std::string split;
};

nlohmann::json to_json(const RDPoint& p);

struct SplitEvaluation {
    double accuracy = 0.0;
    double rate = 0.0;
    double distortion = 0.0;
};

/// Eval-mode pass with z = mean: classification accuracy, mean rate and mean
/// cross-entropy of the decoder.
SplitEvaluation evaluate_patches(const FingerprintModel& model, const ModelParams& params, const Batch& batch);

class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, LossBreakdown snapshot)
        : std::runtime_error(what), breakdown(snapshot) {}
    LossBreakdown breakdown;
};

struct TrainResult {
    ModelParams params;
    std::vector<RDPoint> rd_trace;
    std::vector<double> val_accuracy;  // one per epoch
    std::vector<LossBreakdown> epoch_loss;  // training-batch means
    LossBreakdown final_loss;               // last optimization step
    std::optional<std::filesystem::path> final_checkpoint;
};

struct TrainOptions {
    /// When set: loss.jsonl, trace.jsonl, checkpoints.
    std::optional<std::filesystem::path> out_dir;
    bool verbose = false;
};

/// Fixed validation patches drawn with the data seed.
Batch validation_batch(const Dataset& data, const TrainingConfig& cfg, int patch_size);

TrainResult train(const FingerprintModel& model, const Dataset& data, const TrainingConfig& cfg,
                  const TrainOptions& opts = {});

struct SweepRun {
    double beta = 0.0;
    std::uint64_t model_seed = 0;
    bool ok = false;
    std::string error;
    RDPoint final_point;  // validation split, last epoch
    double val_accuracy = 0.0;
    double mean_rate_tail = 0.0;  // validation rate averaged over the last 10% of epochs
    std::optional<std::filesystem::path> checkpoint;
    ModelParams params;
};

/// One independent run per beta (duplicates included). Data sampling shares
/// cfg.data_seed; run i initializes from a seed derived from cfg.seed and i.
std::vector<SweepRun> beta_sweep(const FingerprintModel& model, const Dataset& data,
                                 const std::vector<double>& betas, const TrainingConfig& cfg,
                                 const TrainOptions& opts = {});

std::uint64_t sweep_seed(std::uint64_t base, std::size_t run_index);

}  // namespace ibf
