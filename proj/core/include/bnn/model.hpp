#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnn/block.hpp"

namespace bnn {

enum class Arch { RESNET18, RESNET20, RESNET_TINY };

Arch parse_arch(const std::string& name);
std::string arch_name(Arch arch);

struct ModelConfig {
    Arch arch = Arch::RESNET20;
    BlockConfig block;
    int num_classes = 10;
    Shape input_shape = {1, 3, 32, 32};  // leading N is ignored
    double width_multiplier = 1.0;
    bool imagenet_stem = false;  // RESNET18 only: 7x7 stride-2 conv + maxpool
};

struct NamedParam {
    std::string name;
    TensorPtr tensor;
};

struct ParamSummaryRow {
    std::string layer;
    std::int64_t real_params = 0;
    std::int64_t binarizable_params = 0;
};

struct ParamSummary {
    std::vector<ParamSummaryRow> rows;
    std::int64_t real_total = 0;
    std::int64_t binarizable_total = 0;
    std::string to_text() const;
};

/// First convolution and the classifier stay real-valued; the binarized
/// region is exactly the building blocks.
struct Model {
    ModelConfig cfg;

    TensorPtr stem_w;
    std::shared_ptr<BatchNormParams> stem_bn;
    int stem_stride = 1, stem_padding = 1;
    bool stem_maxpool = false;

    std::vector<BuildingBlock> blocks;

    TensorPtr fc_w, fc_b;

    TensorPtr forward(Tape* tape, const TensorPtr& x,
                      const std::optional<TrainingProgress>& progress, int stage, bool train);

    /// All learnable tensors in a fixed order with stable names.
    std::vector<NamedParam> parameters() const;

    ParamSummary param_summary() const;
};

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

}  // namespace bnn
