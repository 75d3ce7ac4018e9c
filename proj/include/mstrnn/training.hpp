#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mstrnn/dataset.hpp"
#include "mstrnn/model.hpp"

namespace mstrnn {

struct TrainConfig {
    double lr0 = 0.01;
    double lr_decay = 0.06;       // per-epoch multiplicative decay (0.06 or 0.02)
    double weight_decay = 0.0005; // biases exempt
    double dropout_p = 0.5;       // fully-connected activations only
    int crop_margin = 10;         // random crop shrink in pixels (0 = off)
    int epochs = 40;
    int minibatch = 8;            // whole videos per update, gradients averaged
    int delay = 5;                // delay-response window length
    uint64_t seed = 1;
    int jobs = 0;                 // parallel sample evaluations; 0 = hardware
    bool grad_clip = false;       // surfaced divergence is the default
    double clip_norm = 5.0;
    bool checkpoint_every_epoch = false;  // else best-so-far + last only

    void validate() const;
};

struct EpochRow {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::vector<double> val_acc_heads;  // percent
    double val_acc_joint = 0.0;         // percent
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<std::string> head_names;
    std::vector<EpochRow> rows;

    /// CSV schema: epoch,lr,train_loss,val_acc_head_0..k,val_acc_joint,seconds
    void save_csv(const std::filesystem::path& path) const;
    static TrainLog load_csv(const std::filesystem::path& path);
};

struct TrainResult {
    TrainLog log;
    int best_epoch = -1;  // highest joint validation accuracy, earliest tie
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
    bool diverged = false;
};

/// lr0 * (1 - decay)^epoch.
double lr_at_epoch(double lr0, double decay, int epoch);

/// theta' = theta - lr * (g + wd * theta) for weights; biases skip the decay
/// term. Throws NumericError (naming the tensor) on a non-finite update.
void sgd_update(std::vector<ParamRef>& params, const GradientBundle& grads, double lr,
                double weight_decay);

/// One offset pair per video, uniform on [0, margin]^2; all frames share it.
/// Output extents shrink by margin in each dimension.
std::vector<Tensor> random_crop(const std::vector<Tensor>& frames, int margin, SeededRng& rng);

/// Deterministic evaluation-time crop at the centered offset.
std::vector<Tensor> center_crop(const std::vector<Tensor>& frames, int margin);

/// Inverted dropout: zero units with probability p and scale survivors by
/// 1/(1-p) while training; identity in evaluation.
Tensor dropout_apply(const Tensor& activations, double p, SeededRng& rng, bool training);

/// Seeded-shuffle SGD over minibatches of whole videos. Per-epoch validation
/// on val_ids feeds the log's accuracy columns; checkpoints land in out_dir.
/// Minibatch members are evaluated in parallel but reduced in sample order,
/// so results do not depend on the job count.
TrainResult train(Model& model, const Dataset& dataset, const std::vector<int>& train_ids,
                  const std::vector<int>& val_ids, const TrainConfig& config,
                  const std::filesystem::path& out_dir);

}  // namespace mstrnn
