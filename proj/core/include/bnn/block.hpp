#pragma once

#include <memory>
#include <optional>
#include <string>

#include "bnn/binarizer.hpp"
#include "bnn/normalizer.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class ScalingKind { NONE, AM, LF, LFI };

struct ScalingFactorSpec {
    ScalingKind kind = ScalingKind::NONE;
    TensorPtr value;           // [O] parameter for LF / LFI
    bool initialized = false;  // LFI calibration done

    static ScalingKind parse_kind(const std::string& name);
    static std::string kind_name(ScalingKind kind);
};

/// Per-output-channel scaling factor. AM is recomputed from the current
/// weights; LF returns the stored parameter; LFI initializes the parameter
/// from the ratio mean|y_real| / mean|y_bin| on its first call.
std::vector<double> scaling_factor(ScalingFactorSpec& spec, const Tensor& w, const Tensor* y_real,
                                   const Tensor* y_bin);

enum class ActivationVariant { NONE, HTANH_ID, RELU, PRELU, RPRELU, DPRELU };

/// max(alpha*x, beta*(x - gamma)) + zeta with per-channel parameters.
/// A null tensor means the corresponding *_const value is used instead.
struct ActivationSpec {
    ActivationVariant variant = ActivationVariant::NONE;
    TensorPtr alpha, beta, gamma, zeta;
    double alpha_const = 1.0, beta_const = 1.0, gamma_const = 0.0, zeta_const = 0.0;

    static ActivationVariant parse_variant(const std::string& name);
    static std::string variant_name(ActivationVariant v);
};

ActivationSpec make_activation(ActivationVariant variant, int channels);
TensorPtr activation_apply(Tape* tape, const ActivationSpec& spec, const TensorPtr& x);

enum class ResidualMode { SINGLE, DOUBLE };

/// One block's repair configuration; channel counts and strides come from
/// the architecture builder.
struct BlockConfig {
    BinarizerSpec feature_binarizer = BinarizerSpec::parse("LC_1");
    BinarizerSpec weight_binarizer = BinarizerSpec::parse("LC_1");
    NormalizerKind feature_norm = NormalizerKind::NONE;
    NormalizerKind weight_norm = NormalizerKind::NONE;
    double mstdb_b = 1.4142135623730951;
    CenterKind mstd_center = CenterKind::MEAN;
    ScalingKind scaling = ScalingKind::NONE;
    ActivationVariant activation = ActivationVariant::NONE;
    ResidualMode residual = ResidualMode::SINGLE;
};

/// feature_norm -> feature binarizer -> conv(pad -1) -> alpha -> batch norm.
/// In stage 1 the weights bypass their binarizer and reach the convolution
/// real-valued; features are binarized in both stages.
struct BinaryConvUnit {
    BinarizerSpec feature_bin, weight_bin;
    NormalizerSpec feature_norm, weight_norm;
    TensorPtr weight;  // latent real weights [O,I,Kh,Kw]
    ScalingFactorSpec scaling;
    std::shared_ptr<BatchNormParams> bn;
    int in_ch = 0, out_ch = 0, stride = 1, padding = 1;

    TensorPtr forward(Tape* tape, const TensorPtr& x,
                      const std::optional<TrainingProgress>& progress, int stage, bool train);

    BinarizerKind effective_weight_binarizer(int stage) const {
        return stage == 1 ? BinarizerKind::IDENTITY : weight_bin.kind;
    }
};

/// Two binary convolutions with residual wiring. SINGLE adds the block input
/// after the second convolution; DOUBLE re-injects the running value after
/// each convolution. Downsampling blocks use a real-valued 1x1 stride-2
/// projection shortcut with its own batch norm.
struct BuildingBlock {
    BinaryConvUnit conv1, conv2;
    ActivationSpec act1, act2;
    ResidualMode residual = ResidualMode::SINGLE;
    bool has_down = false;
    TensorPtr down_w;  // [O,I,1,1]
    std::shared_ptr<BatchNormParams> down_bn;

    TensorPtr shortcut(Tape* tape, const TensorPtr& x, bool train);
    TensorPtr forward(Tape* tape, const TensorPtr& x,
                      const std::optional<TrainingProgress>& progress, int stage, bool train);
};

}  // namespace bnn
