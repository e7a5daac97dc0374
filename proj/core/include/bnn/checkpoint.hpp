#pragma once

#include <string>

#include "bnn/experiment.hpp"
#include "bnn/model.hpp"

namespace bnn {

/// Trained float model plus everything needed to rebuild and rerun it.
struct Checkpoint {
    ExperimentConfig cfg;
    Shape input_shape;  // [1,C,H,W]
    DatasetStats stats;
    std::uint64_t seed = 0;
    Model model;
};

void save_checkpoint(const std::string& path, const Model& model, const ExperimentConfig& cfg,
                     const DatasetStats& stats, std::uint64_t seed);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace bnn
