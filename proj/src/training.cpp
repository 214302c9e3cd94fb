#include "ibf/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ibf/error.hpp"
#include "ibf/log.hpp"

namespace ibf {

TrainingConfig TrainingConfig::full_scale() {
    TrainingConfig c;
    c.epochs = 700;
    c.patches_per_epoch = 100000;
    c.batch_size = 200;
    c.base_lr = 1e-4;
    c.final_linear_lr = 5e-6;
    c.constant_epochs = 100;
    c.linear_epochs = 530;
    c.exponential_epochs = 70;
    c.exp_decay = 0.9;
    c.loss = {1e-3, 1.0, 1e-4, 1e-4};
    return c;
}

void TrainingConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (constant_epochs < 0 || linear_epochs < 0 || exponential_epochs < 0 ||
        constant_epochs + linear_epochs + exponential_epochs != epochs)
        throw ConfigError("schedule phase lengths must be nonnegative and sum to epochs");
    if (batch_size < 1 || patches_per_epoch < batch_size || patches_per_epoch % batch_size != 0)
        throw ConfigError("batch_size must divide patches_per_epoch");
    if (!(base_lr > 0.0) || !(final_linear_lr > 0.0) || !(exp_decay > 0.0))
        throw ConfigError("learning rates and decay factor must be positive");
    if (validation_patches < 1) throw ConfigError("validation_patches must be >= 1");
    if (checkpoint_every < 0 || log_every < 1) throw ConfigError("checkpoint_every >= 0 and log_every >= 1 required");
    loss.validate();
}

nlohmann::json to_json(const TrainingConfig& c) {
    return {{"epochs", c.epochs},
            {"patches_per_epoch", c.patches_per_epoch},
            {"batch_size", c.batch_size},
            {"base_lr", c.base_lr},
            {"final_linear_lr", c.final_linear_lr},
            {"constant_epochs", c.constant_epochs},
            {"linear_epochs", c.linear_epochs},
            {"exponential_epochs", c.exponential_epochs},
            {"exp_decay", c.exp_decay},
            {"beta", c.loss.beta},
            {"lambda", c.loss.lambda},
            {"omega1", c.loss.omega1},
            {"omega2", c.loss.omega2},
            {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
            {"sgd_momentum", c.sgd_momentum},
            {"seed", c.seed},
            {"data_seed", c.data_seed},
            {"validation_patches", c.validation_patches},
            {"checkpoint_every", c.checkpoint_every},
            {"log_every", c.log_every}};
}

double lr_at(int epoch, const TrainingConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.epochs)
        throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
    if (epoch < cfg.constant_epochs) return cfg.base_lr;
    const int linear_end = cfg.constant_epochs + cfg.linear_epochs - 1;  // last linear epoch
    if (epoch <= linear_end) {
        if (cfg.linear_epochs == 1) return cfg.final_linear_lr;
        const double t = static_cast<double>(epoch - cfg.constant_epochs) / (cfg.linear_epochs - 1);
        return cfg.base_lr * (1.0 - t) + cfg.final_linear_lr * t;
    }
    const double start = cfg.linear_epochs > 0 ? cfg.final_linear_lr : cfg.base_lr;
    return start * std::pow(cfg.exp_decay, epoch - linear_end);
}

Batch sample_patches(const std::vector<LabeledImage>& images, int count, int patch_size, std::mt19937_64& rng) {
    Batch batch;
    if (count <= 0) return batch;
    std::vector<std::vector<const LabeledImage*>> by_class;
    std::size_t skipped = 0;
    for (const auto& li : images) {
        if (li.image.width < patch_size || li.image.height < patch_size) {
            ++skipped;
            continue;
        }
        if (li.label >= static_cast<int>(by_class.size())) by_class.resize(li.label + 1);
        by_class[li.label].push_back(&li);
    }
    if (skipped > 0) log_warn("sample_patches: skipped " + std::to_string(skipped) + " undersized images");
    std::vector<int> classes;
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (!by_class[c].empty()) classes.push_back(static_cast<int>(c));
    if (classes.empty()) throw DataError("sample_patches: no image is large enough for the patch size");

    const int channels = by_class[classes.front()].front()->image.channels;
    batch.patches = Tensor(count, channels, patch_size, patch_size);
    batch.labels.resize(count);
    for (int i = 0; i < count; ++i) {
        const int cls = classes[std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng)];
        const auto& pool = by_class[cls];
        const LabeledImage& li = *pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        const int y0 = std::uniform_int_distribution<int>(0, li.image.height - patch_size)(rng);
        const int x0 = std::uniform_int_distribution<int>(0, li.image.width - patch_size)(rng);
        crop_into(li.image, y0, x0, patch_size, batch.patches, i);
        batch.labels[i] = li.label;
    }
    return batch;
}

nlohmann::json to_json(const RDPoint& p) {
    return {{"epoch", p.epoch}, {"split", p.split}, {"beta", p.beta}, {"rate", p.rate}, {"distortion", p.distortion}};
}

SplitEvaluation evaluate_patches(const FingerprintModel& model, const ModelParams& params, const Batch& batch) {
    if (batch.size() == 0) throw DataError("evaluate_patches: empty batch");
    constexpr int kChunk = 256;
    const auto& x = batch.patches;
    double correct = 0.0, rate = 0.0, ce = 0.0;
    for (int start = 0; start < batch.size(); start += kChunk) {
        const int n = std::min(kChunk, batch.size() - start);
        Tensor chunk(n, x.c, x.h, x.w);
        std::copy(x.data.begin() + start * x.sample_stride(), x.data.begin() + (start + n) * x.sample_stride(),
                  chunk.data.begin());
        const CodeBatch codes = model.encode_batch(chunk, params, Mode::Eval);
        for (int i = 0; i < n; ++i) {
            const StochasticCode code = codes.code(i);
            const auto probs = model.decode(code.mean, params);
            const int label = batch.labels[start + i];
            const auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
            if (best == label) correct += 1.0;
            rate += rate_kl(code);
            ce += distortion_ce(probs, label);
        }
    }
    const double n = batch.size();
    return {correct / n, rate / n, ce / n};
}

Batch validation_batch(const Dataset& data, const TrainingConfig& cfg, int patch_size) {
    std::mt19937_64 rng(cfg.data_seed ^ 0x76616c6964ULL);
    const auto& pool = data.val.empty() ? data.train : data.val;
    return sample_patches(pool, cfg.validation_patches, patch_size, rng);
}

namespace {

class Optimizer {
public:
    Optimizer(const ModelParams& p, const TrainingConfig& cfg) : cfg_(cfg) {
        for (const auto& t : p.tensors) {
            m_.emplace_back(t.trainable() ? t.values.size() : 0, 0.0);
            v_.emplace_back(cfg.optimizer == OptimizerKind::Adam && t.trainable() ? t.values.size() : 0, 0.0);
        }
    }

    void step(ModelParams& p, const ParamGrads& g, double lr) {
        ++t_;
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
        for (std::size_t k = 0; k < p.tensors.size(); ++k) {
            auto& t = p.tensors[k];
            if (!t.trainable()) continue;
            auto& m = m_[k];
            const auto& gk = g.values[k];
            if (cfg_.optimizer == OptimizerKind::Adam) {
                auto& v = v_[k];
                for (std::size_t i = 0; i < t.values.size(); ++i) {
                    m[i] = b1 * m[i] + (1.0 - b1) * gk[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * gk[i] * gk[i];
                    t.values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
                }
            } else {
                for (std::size_t i = 0; i < t.values.size(); ++i) {
                    m[i] = cfg_.sgd_momentum * m[i] + gk[i];
                    t.values[i] -= lr * m[i];
                }
            }
        }
    }

private:
    const TrainingConfig& cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

std::string epoch_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "epoch_%04d.ckpt", epoch);
    return buf;
}

void append_line(std::ofstream& os, const nlohmann::json& j) { os << j.dump() << '\n'; }

}  // namespace

TrainResult train(const FingerprintModel& model, const Dataset& data, const TrainingConfig& cfg,
                  const TrainOptions& opts) {
    cfg.validate();
    if (data.num_classes < 2) throw DataError("train: dataset needs at least two classes");
    if (data.num_classes != model.num_classes())
        throw ConfigError("train: dataset has " + std::to_string(data.num_classes) + " classes, model decodes " +
                          std::to_string(model.num_classes()));
    const int patch = model.config().encoder.patch_size;

    TrainResult result;
    result.params = model.init_params(cfg.seed);
    std::mt19937_64 data_rng(cfg.data_seed);
    std::mt19937_64 noise_rng(cfg.seed ^ 0x6e6f697365ULL);
    const Batch val = validation_batch(data, cfg, patch);

    std::ofstream loss_log, trace_log;
    if (opts.out_dir) {
        std::filesystem::create_directories(*opts.out_dir);
        loss_log.open(*opts.out_dir / "loss.jsonl", std::ios::trunc);
        trace_log.open(*opts.out_dir / "trace.jsonl", std::ios::trunc);
        if (!loss_log || !trace_log) throw DataError("cannot write logs under " + opts.out_dir->string());
    }
    auto write_checkpoint = [&](const std::filesystem::path& path, int epoch) {
        Checkpoint ck{model.config(), result.params, rng_state(noise_rng),
                      {{"epoch", epoch}, {"training", to_json(cfg)}}};
        save_checkpoint(path, ck);
        return path;
    };

    Optimizer opt(result.params, cfg);
    ParamGrads grads = ParamGrads::zeros_like(result.params);
    FingerprintModel::Cache cache;
    const int steps = cfg.patches_per_epoch / cfg.batch_size;
    long global_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        LossBreakdown sum;
        for (int s = 0; s < steps; ++s, ++global_step) {
            const Batch batch = sample_patches(data.train, cfg.batch_size, patch, data_rng);
            grads.set_zero();
            const LossBreakdown b =
                total_loss_and_gradient(model, result.params, batch, cfg.loss, noise_rng, grads, cache);
            if (!b.finite()) {
                const auto snap = loss_record(global_step, cfg.loss.beta, b).dump();
                throw TrainingError("non-finite loss at step " + std::to_string(global_step) + ": " + snap, b);
            }
            if (b.clamped > 0)
                log_warn("step " + std::to_string(global_step) + ": " + std::to_string(b.clamped) +
                         " probabilities hit the cross-entropy floor");
            opt.step(result.params, grads, lr);
            model.update_running_stats(cache, result.params);
            result.final_loss = b;
            sum.distortion += b.distortion;
            sum.rate += b.rate;
            sum.penalty += b.penalty;
            sum.l1 += b.l1;
            sum.l2 += b.l2;
            sum.total += b.total;
            if (opts.out_dir && global_step % cfg.log_every == 0)
                append_line(loss_log, loss_record(global_step, cfg.loss.beta, b));
        }
        LossBreakdown mean = sum;
        for (double* v : {&mean.distortion, &mean.rate, &mean.penalty, &mean.l1, &mean.l2, &mean.total})
            *v /= steps;
        result.epoch_loss.push_back(mean);

        const SplitEvaluation ev = evaluate_patches(model, result.params, val);
        result.val_accuracy.push_back(ev.accuracy);
        result.rd_trace.push_back({mean.rate, mean.distortion, cfg.loss.beta, epoch, "train"});
        result.rd_trace.push_back({ev.rate, ev.distortion, cfg.loss.beta, epoch, "val"});

        if (opts.out_dir) {
            auto j = to_json(result.rd_trace[result.rd_trace.size() - 2]);
            append_line(trace_log, j);
            j = to_json(result.rd_trace.back());
            j["accuracy"] = ev.accuracy;
            j["lr"] = lr;
            append_line(trace_log, j);
            if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs)
                write_checkpoint(*opts.out_dir / epoch_name(epoch), epoch);
        }
        if (opts.verbose) {
            char line[200];
            std::snprintf(line, sizeof(line), "beta=%g epoch %d lr=%.3g  D=%.4f R=%.3f J=%.4f  val acc=%.3f D=%.4f R=%.3f",
                          cfg.loss.beta, epoch, lr, mean.distortion, mean.rate, mean.total, ev.accuracy,
                          ev.distortion, ev.rate);
            log_info(line);
        }
    }
    if (opts.out_dir) result.final_checkpoint = write_checkpoint(*opts.out_dir / "final.ckpt", cfg.epochs - 1);
    return result;
}

std::uint64_t sweep_seed(std::uint64_t base, std::size_t run_index) {
    std::uint64_t x = base + 0x9e3779b97f4a7c15ULL * (run_index + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::vector<SweepRun> beta_sweep(const FingerprintModel& model, const Dataset& data, const std::vector<double>& betas,
                                 const TrainingConfig& cfg, const TrainOptions& opts) {
    if (betas.empty()) throw ConfigError("beta_sweep: no beta values");
    for (double b : betas)
        if (!(b >= 0.0)) throw ConfigError("beta_sweep: beta values must be nonnegative");
    std::vector<SweepRun> runs;
    for (std::size_t i = 0; i < betas.size(); ++i) {
        SweepRun run;
        run.beta = betas[i];
        run.model_seed = sweep_seed(cfg.seed, i);
        TrainingConfig rc = cfg;
        rc.loss.beta = betas[i];
        rc.seed = run.model_seed;
        TrainOptions ro = opts;
        if (opts.out_dir) {
            char name[64];
            std::snprintf(name, sizeof(name), "run_%02zu_beta_%g", i, betas[i]);
            ro.out_dir = *opts.out_dir / name;
        }
        try {
            TrainResult tr = train(model, data, rc, ro);
            run.ok = true;
            run.final_point = tr.rd_trace.back();
            run.val_accuracy = tr.val_accuracy.back();
            const int tail = std::max(1, static_cast<int>(std::ceil(0.1 * rc.epochs)));
            double acc = 0.0;
            int count = 0;
            for (const auto& p : tr.rd_trace)
                if (p.split == "val" && p.epoch >= rc.epochs - tail) {
                    acc += p.rate;
                    ++count;
                }
            run.mean_rate_tail = acc / count;
            run.checkpoint = tr.final_checkpoint;
            run.params = std::move(tr.params);
        } catch (const std::exception& ex) {
            run.error = ex.what();
            log_warn("sweep run beta=" + std::to_string(betas[i]) + " failed: " + ex.what());
        }
        runs.push_back(std::move(run));
    }
    return runs;
}

}  // namespace ibf
