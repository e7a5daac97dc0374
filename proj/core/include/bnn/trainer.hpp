#pragma once

#include <optional>
#include <random>
#include <string>

#include "bnn/dataset.hpp"
#include "bnn/loss.hpp"
#include "bnn/model.hpp"
#include "bnn/optimizer.hpp"

namespace bnn {

/// Two-stage training: stage 1 binarizes features only, stage 2 both.
/// Entering stage 2 also zeroes the optimizer's weight decay. When disabled,
/// training runs entirely in stage 2 (features and weights binarized).
struct StageController {
    bool enabled = false;
    double split_fraction = 0.5;

    int stage_at(int epoch, int total_epochs) const {
        if (!enabled) return 2;
        return epoch < split_fraction * total_epochs ? 1 : 2;
    }
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    bool failed = false;
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 128;
    int warmup_epochs = 2;
    double peak_lr = 0.1;
    OptimizerState opt;  // kind and hyperparameters; buffers set up internally
    LossSpec loss;
    StageController stages;
    AugmentOptions train_aug, eval_aug;
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    bool failed = false;
    std::string failure;
    double final_test_acc = 0.0;
};

/// Latent weights of the binarized convolutions, the regularizers' domain.
std::vector<TensorPtr> latent_conv_weights(const Model& model);

double evaluate(Model& model, const Dataset& ds, const AugmentOptions& aug, int batch_size,
                const std::optional<TrainingProgress>& progress, int stage);

/// One pass over the training set. TrainingProgress advances per batch as the
/// completed fraction of total training; the learning rate follows the cosine
/// schedule at fractional-epoch resolution.
EpochMetrics train_epoch(Model& model, const Dataset& train_set, OptimizerState& opt,
                         const TrainConfig& cfg, int epoch, std::mt19937_64& rng);

TrainResult train_model(Model& model, const Dataset& train_set, const Dataset& test_set,
                        const TrainConfig& cfg, std::uint64_t seed);

/// CSV with header epoch,lr,train_loss,train_acc,test_acc. Formatting is
/// fixed so reruns with the same seed are byte-identical.
std::string metrics_csv(const std::vector<EpochMetrics>& rows);

}  // namespace bnn
