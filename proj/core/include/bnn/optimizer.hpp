#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnn/model.hpp"

namespace bnn {

enum class OptKind { SGD, ADAM };

OptKind parse_optimizer(const std::string& name);
std::string optimizer_name(OptKind kind);

struct OptimizerState {
    OptKind kind = OptKind::SGD;
    double lr = 0.1;
    double momentum = 0.9;  // SGD
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // ADAM
    double weight_decay = 1e-4;
    std::int64_t t = 0;  // completed steps
    std::vector<std::vector<double>> m, v;  // per-parameter buffers

    void init(const std::vector<NamedParam>& params);
};

/// SGD with momentum: m = momentum*m - lr*(g + wd*W); W += m.
void sgd_step(OptimizerState& state, const std::vector<NamedParam>& params);

/// ADAM with bias correction; epsilon sits inside the square root:
/// W -= lr * m_hat / sqrt(v_hat + eps).
void adam_step(OptimizerState& state, const std::vector<NamedParam>& params);

void optimizer_step(OptimizerState& state, const std::vector<NamedParam>& params);

/// Cosine decay with a linear warmup: ramps 0 -> peak over warmup_epochs,
/// then peak * (1 + cos(pi*s))/2 with s = (epoch-warmup)/(total-warmup).
/// Accepts fractional epochs for per-batch scheduling.
double lr_at(double epoch, int total_epochs, int warmup_epochs, double peak_lr);

}  // namespace bnn
