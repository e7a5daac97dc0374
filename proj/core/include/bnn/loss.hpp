#pragma once

#include <string>
#include <vector>

#include "bnn/autograd.hpp"

namespace bnn {

enum class RegKind { NONE, R1, R2, RE };

RegKind parse_reg(const std::string& name);
std::string reg_name(RegKind kind);

/// Total loss is L_CE + reg_lambda * L_R.
struct LossSpec {
    RegKind reg_kind = RegKind::NONE;
    double reg_alpha = 1.0;       // R1/R2 target magnitude
    double reg_lambda = 0.0;      // balancing coefficient
    double wanted_entropy = 1.0;  // RE target H_e
    double re_sharpness = 10.0;   // k in the relaxed sign frequency
};

/// Regularization loss over the given latent weight tensors.
///  R1 = sum |alpha - |W||,  R2 = sum (alpha - |W|)^2,
///  RE = sum over layers |H_e - H(p)| with the differentiable relaxation
///  p = mean((tanh(k W)+1)/2) and H the base-2 Shannon entropy.
TensorPtr regularization_loss(Tape* tape, const LossSpec& spec,
                              const std::vector<TensorPtr>& weights);

/// Hard-count sign entropy, for reporting only: p = fraction of W >= 0.
double weight_sign_entropy_hard(const std::vector<TensorPtr>& weights, double wanted_entropy);

/// a + c*b for scalar tensors.
TensorPtr add_scaled_scalar(Tape* tape, const TensorPtr& a, const TensorPtr& b, double c);

}  // namespace bnn
