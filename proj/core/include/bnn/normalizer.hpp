#pragma once

#include <cmath>
#include <memory>
#include <string>

#include "bnn/autograd.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class NormalizerKind { NONE, LB, STD, MSTD, MSTDB, BN };
enum class CenterKind { MEAN, MEDIAN };

struct BatchNormParams {
    TensorPtr gamma;  // [C], init 1
    TensorPtr beta;   // [C], init 0
    std::vector<double> running_mu;   // [C]
    std::vector<double> running_var;  // [C], never negative
    double momentum = 0.1;            // new = momentum*batch + (1-momentum)*old
    double eps = 1e-5;

    static std::shared_ptr<BatchNormParams> create(int channels, double momentum = 0.1,
                                                   double eps = 1e-5);
};

/// One batch-norm element, shared between the training graph (eval mode) and
/// the packed executor so both paths round identically. s = sqrt(var + eps).
inline double bn_apply(double gamma, double beta, double mu, double s, double y) {
    return gamma * ((y - mu) / s) + beta;
}

struct NormalizerSpec {
    NormalizerKind kind = NormalizerKind::NONE;
    double b = std::sqrt(2.0);              // MSTDB divisor
    CenterKind mstd_center = CenterKind::MEAN;
    TensorPtr lb_bias;                      // LB, [C] parameter, init 0
    std::shared_ptr<BatchNormParams> bn;    // BN

    /// Config spellings use the FN_/WN_ prefix convention: FN_LB, FN_STD,
    /// FN_BN, WN_MSTD, WN_MSTDB, or NONE.
    static NormalizerKind parse_kind(const std::string& name);
    static std::string kind_name(NormalizerKind kind, bool for_weight);
};

/// Batch normalization over [N,C,H,W]. Train mode uses batch statistics and
/// updates the running averages; eval mode reads the stored running stats.
TensorPtr batchnorm2d(Tape* tape, const TensorPtr& x, BatchNormParams& bn, bool train);

/// Feature normalization ahead of the binarizer. STD divides each channel by
/// its batch standard deviation in train mode and is an identity in eval mode
/// (a positive per-channel scale cannot change the downstream sign).
TensorPtr normalize_feature(Tape* tape, const NormalizerSpec& spec, const TensorPtr& x, bool train);

/// Weight normalization over the whole layer tensor: MSTD = (w - center)/sigma,
/// MSTDB additionally divides by spec.b. Population statistics, sigma floored
/// at 1e-12.
TensorPtr normalize_weight(Tape* tape, const NormalizerSpec& spec, const TensorPtr& w);

}  // namespace bnn
