#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bnn/dataset.hpp"
#include "bnn/trainer.hpp"

namespace bnn {

enum class DatasetKind { IDX, CIFAR_BIN };

/// One experiment: a fixed repair configuration trained once per seed.
struct ExperimentConfig {
    std::string name = "experiment";
    Arch arch = Arch::RESNET20;
    double width = 1.0;
    int num_classes = 10;
    bool imagenet_stem = false;
    BlockConfig block;

    OptKind optimizer = OptKind::SGD;
    double lr = -1.0;  // negative = optimizer default (0.1 SGD, 1e-3 ADAM)
    double momentum = 0.9, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double weight_decay = 1e-4;
    int epochs = 30, batch_size = 128, warmup_epochs = 2;
    LossSpec loss;
    bool two_stage = false;
    double stage_split = 0.5;

    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::string dataset_path;
    DatasetKind dataset_kind = DatasetKind::IDX;
    bool aug_flip = true, aug_crop = true, aug_norm = true;
    std::string out_dir = "runs";

    double peak_lr() const { return lr >= 0 ? lr : (optimizer == OptKind::SGD ? 0.1 : 1e-3); }
};

std::map<std::string, std::string> parse_kv_text(const std::string& text);
ExperimentConfig parse_config_map(const std::map<std::string, std::string>& kv);
ExperimentConfig load_config_file(const std::string& path);
std::map<std::string, std::string> config_to_map(const ExperimentConfig& cfg);
std::string config_to_text(const ExperimentConfig& cfg);

ModelConfig to_model_config(const ExperimentConfig& cfg, const Shape& input_shape);
TrainConfig to_train_config(const ExperimentConfig& cfg, const DatasetStats& stats);

struct SeedResult {
    std::uint64_t seed = 0;
    bool failed = false;
    std::string failure;
    double final_test_acc = 0.0;
    std::string csv;  // per-epoch metrics
};

struct RunSummary {
    std::string name;
    std::vector<SeedResult> per_seed;
    int completed = 0;
    bool degraded = false;  // at least one seed failed
    double min_acc = 0, median_acc = 0, max_acc = 0, mean_acc = 0, std_acc = 0;
};

RunSummary summarize_seeds(const std::string& name, std::vector<SeedResult> seeds);

/// Trains every seed (optionally in parallel; results are independent of the
/// schedule) and computes the summary. Failed seeds mark the experiment
/// degraded but do not abort the others.
RunSummary run_experiment_on(const ExperimentConfig& cfg, const Dataset& train,
                             const Dataset& test, int max_threads = 0);

/// Loads the dataset named by the config, runs all seeds, and writes
/// out/<name>/seed_<s>.csv plus out/<name>/summary.json.
RunSummary run_experiment(const ExperimentConfig& cfg, int max_threads = 0);

void write_experiment_outputs(const ExperimentConfig& cfg, const RunSummary& summary);

struct Report {
    std::string text;
    std::string csv;
};

/// min/median/max/mean/std table, sorted by median descending, with each
/// row's median delta against the first (baseline) experiment.
Report summarize(const std::vector<RunSummary>& results);

/// One-factor sweep: the base config with `factor_key` swapped through
/// `values`, first value acting as the baseline. Enforces that consecutive
/// experiments differ in exactly that one field.
std::vector<RunSummary> sweep(const ExperimentConfig& base, const std::string& factor_key,
                              const std::vector<std::string>& values, int max_threads = 0);

}  // namespace bnn
