#pragma once

#include <optional>
#include <span>
#include <string>

#include "bnn/autograd.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class BinarizerKind { IDENTITY, LC, LC_A, PN, GPN, T, EDE, SS, EWGS };

/// Fraction of total training completed, in [0,1]. Drives the gradual
/// binarizer schedules; snapshotted once per batch.
struct TrainingProgress {
    double t = 0.0;
};

/// lambda schedule for the gradual binarizers. EDE and T use
/// 10^(-3 + 4T) (1e-3 .. 10), GPN uses 10^(-2 + 3T) (1e-2 .. 10).
double schedule_lambda(BinarizerKind kind, const TrainingProgress& progress);

struct BinarizerSpec {
    BinarizerKind kind = BinarizerKind::LC;
    double clip_width = 1.0;       // LC
    TensorPtr learnable_clip;      // LC_A, scalar parameter, init 1.0
    double ss_beta = 5.0;          // SS
    double ewgs_delta = 1e-3;      // EWGS
    bool gpn_k_clamp_at_one = false;

    /// Parses the config-file spelling: LC_1, LC_1.3, LC_2, LC_3, LC_A,
    /// PN, GPN, T, EDE, SS, EWGS, IDENTITY.
    static BinarizerSpec parse(const std::string& name);
    std::string name() const;

    bool needs_schedule() const {
        return kind == BinarizerKind::GPN || kind == BinarizerKind::T || kind == BinarizerKind::EDE;
    }
};

/// sign(x): +1 where x >= 0, -1 elsewhere.
void sign_forward(const Tensor& x, Tensor& out);
inline Tensor sign_forward(const Tensor& x) {
    Tensor out(x.shape);
    sign_forward(x, out);
    return out;
}

/// Surrogate backward of the sign function: writes g_in (not accumulated).
/// For LC_A, *clip_grad receives the summed gradient of the clip parameter.
/// Kinds with a schedule (T, EDE, GPN) require a resolved TrainingProgress.
void ste_backward(const BinarizerSpec& spec, const std::optional<TrainingProgress>& progress,
                  std::span<const double> x_r, std::span<const double> g_out,
                  std::span<double> g_in, double* clip_grad = nullptr);

/// Tape op: sign forward with the spec's surrogate recorded as the backward
/// rule. IDENTITY passes values through unchanged.
TensorPtr binarize(Tape* tape, const BinarizerSpec& spec, const TensorPtr& x,
                   const std::optional<TrainingProgress>& progress);

}  // namespace bnn
