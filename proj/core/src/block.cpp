#include "bnn/block.hpp"

#include <cmath>

namespace bnn {

ScalingKind ScalingFactorSpec::parse_kind(const std::string& name) {
    if (name == "NONE") return ScalingKind::NONE;
    if (name == "AM") return ScalingKind::AM;
    if (name == "LF") return ScalingKind::LF;
    if (name == "LFI") return ScalingKind::LFI;
    throw std::invalid_argument("scaling factor: unknown kind '" + name + "'");
}

std::string ScalingFactorSpec::kind_name(ScalingKind kind) {
    switch (kind) {
        case ScalingKind::NONE: return "NONE";
        case ScalingKind::AM: return "AM";
        case ScalingKind::LF: return "LF";
        case ScalingKind::LFI: return "LFI";
    }
    return "?";
}

std::vector<double> scaling_factor(ScalingFactorSpec& spec, const Tensor& w, const Tensor* y_real,
                                   const Tensor* y_bin) {
    const int o = w.shape[0];
    switch (spec.kind) {
        case ScalingKind::NONE:
            return std::vector<double>(static_cast<std::size_t>(o), 1.0);
        case ScalingKind::AM: {
            std::vector<double> alpha(static_cast<std::size_t>(o));
            const std::int64_t per = w.size() / o;
            for (int ch = 0; ch < o; ++ch) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < per; ++i) acc += std::abs(w.data[ch * per + i]);
                alpha[static_cast<std::size_t>(ch)] = acc / static_cast<double>(per);
            }
            return alpha;
        }
        case ScalingKind::LF:
            if (!spec.value) throw std::logic_error("scaling_factor: LF has no parameter");
            return spec.value->data;
        case ScalingKind::LFI: {
            if (!spec.value) throw std::logic_error("scaling_factor: LFI has no parameter");
            if (!spec.initialized) {
                if (!y_real || !y_bin)
                    throw std::logic_error(
                        "scaling_factor: LFI initialization needs a calibration forward pass");
                // y_* are [N,O,H,W]; ratio of mean absolute outputs per channel.
                const int n = y_real->shape[0];
                const std::int64_t hw =
                    static_cast<std::int64_t>(y_real->shape[2]) * y_real->shape[3];
                for (int ch = 0; ch < o; ++ch) {
                    double num = 0.0, den = 0.0;
                    for (int i = 0; i < n; ++i) {
                        const std::int64_t base = (static_cast<std::int64_t>(i) * o + ch) * hw;
                        for (std::int64_t k = 0; k < hw; ++k) {
                            num += std::abs(y_real->data[base + k]);
                            den += std::abs(y_bin->data[base + k]);
                        }
                    }
                    if (den == 0.0)
                        throw std::runtime_error(
                            "scaling_factor: LFI initialization with all-zero binary output "
                            "(channel " + std::to_string(ch) + ")");
                    spec.value->data[static_cast<std::size_t>(ch)] = num / den;
                }
                spec.initialized = true;
            }
            return spec.value->data;
        }
    }
    return {};
}

ActivationVariant ActivationSpec::parse_variant(const std::string& name) {
    if (name == "NONE") return ActivationVariant::NONE;
    if (name == "I&H" || name == "HTANH_ID") return ActivationVariant::HTANH_ID;
    if (name == "RELU" || name == "ReLU") return ActivationVariant::RELU;
    if (name == "PRELU" || name == "PReLU") return ActivationVariant::PRELU;
    if (name == "RPRELU" || name == "RPReLU") return ActivationVariant::RPRELU;
    if (name == "DPRELU" || name == "DPReLU") return ActivationVariant::DPRELU;
    throw std::invalid_argument("activation: unknown variant '" + name + "'");
}

std::string ActivationSpec::variant_name(ActivationVariant v) {
    switch (v) {
        case ActivationVariant::NONE: return "NONE";
        case ActivationVariant::HTANH_ID: return "I&H";
        case ActivationVariant::RELU: return "RELU";
        case ActivationVariant::PRELU: return "PRELU";
        case ActivationVariant::RPRELU: return "RPRELU";
        case ActivationVariant::DPRELU: return "DPRELU";
    }
    return "?";
}

ActivationSpec make_activation(ActivationVariant variant, int channels) {
    ActivationSpec spec;
    spec.variant = variant;
    switch (variant) {
        case ActivationVariant::NONE:
        case ActivationVariant::HTANH_ID:
            break;  // identity forward; the hard-tanh lives in the LC binarizer backward
        case ActivationVariant::RELU:
            spec.alpha_const = 0.0;
            break;
        case ActivationVariant::PRELU:
            spec.alpha = make_tensor({channels}, 0.25);
            break;
        case ActivationVariant::RPRELU:
            spec.alpha = make_tensor({channels}, 0.25);
            spec.gamma = make_tensor({channels}, 0.0);
            spec.zeta = make_tensor({channels}, 0.0);
            break;
        case ActivationVariant::DPRELU:
            spec.alpha = make_tensor({channels}, 0.25);
            spec.beta = make_tensor({channels}, 1.0);
            spec.gamma = make_tensor({channels}, 0.0);
            spec.zeta = make_tensor({channels}, 0.0);
            break;
    }
    return spec;
}

TensorPtr activation_apply(Tape* tape, const ActivationSpec& spec, const TensorPtr& x) {
    if (spec.variant == ActivationVariant::NONE || spec.variant == ActivationVariant::HTANH_ID)
        return x;

    const int n = x->shape[0], c = x->shape[1];
    const std::int64_t hw = x->shape.size() == 4
                                ? static_cast<std::int64_t>(x->shape[2]) * x->shape[3]
                                : 1;
    auto param_at = [c](const TensorPtr& t, double cst, int ch) {
        if (!t) return cst;
        if (t->size() != c) throw std::invalid_argument("activation: parameter length mismatch");
        return t->data[ch];
    };

    auto y = make_tensor(x->shape);
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const double a = param_at(spec.alpha, spec.alpha_const, ch);
            const double b = param_at(spec.beta, spec.beta_const, ch);
            const double g0 = param_at(spec.gamma, spec.gamma_const, ch);
            const double z = param_at(spec.zeta, spec.zeta_const, ch);
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) {
                const double v = x->data[base + k];
                y->data[base + k] = std::max(a * v, b * (v - g0)) + z;
            }
        }

    if (tape) {
        ActivationSpec s = spec;
        tape->record([x, y, s, n, c, hw]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            if (s.alpha) s.alpha->ensure_grad();
            if (s.beta) s.beta->ensure_grad();
            if (s.gamma) s.gamma->ensure_grad();
            if (s.zeta) s.zeta->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const double a = s.alpha ? s.alpha->data[ch] : s.alpha_const;
                    const double b = s.beta ? s.beta->data[ch] : s.beta_const;
                    const double g0 = s.gamma ? s.gamma->data[ch] : s.gamma_const;
                    const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
                    double da = 0.0, db = 0.0, dg = 0.0, dz = 0.0;
                    for (std::int64_t k = 0; k < hw; ++k) {
                        const double g = y->grad[base + k];
                        if (g == 0.0) continue;
                        const double v = x->data[base + k];
                        // ties take the positive-slope branch
                        if (b * (v - g0) >= a * v) {
                            x->grad[base + k] += g * b;
                            db += g * (v - g0);
                            dg -= g * b;
                        } else {
                            x->grad[base + k] += g * a;
                            da += g * v;
                        }
                        dz += g;
                    }
                    if (s.alpha) s.alpha->grad[ch] += da;
                    if (s.beta) s.beta->grad[ch] += db;
                    if (s.gamma) s.gamma->grad[ch] += dg;
                    if (s.zeta) s.zeta->grad[ch] += dz;
                }
        });
    }
    return y;
}

TensorPtr BinaryConvUnit::forward(Tape* tape, const TensorPtr& x,
                                  const std::optional<TrainingProgress>& progress, int stage,
                                  bool train) {
    auto xf = normalize_feature(tape, feature_norm, x, train);
    auto xb = binarize(tape, feature_bin, xf, progress);
    auto wn = normalize_weight(tape, weight_norm, weight);
    const TensorPtr wb = stage == 1 ? wn : binarize(tape, weight_bin, wn, progress);
    auto y = conv2d(tape, xb, wb, stride, padding, -1.0);

    switch (scaling.kind) {
        case ScalingKind::NONE:
            break;
        case ScalingKind::AM:
            y = scale_channels(tape, y, channel_mean_abs(tape, wn));
            break;
        case ScalingKind::LF:
            y = scale_channels(tape, y, scaling.value);
            break;
        case ScalingKind::LFI: {
            if (!scaling.initialized) {
                auto y_real = conv2d(nullptr, xb, wn, stride, padding, -1.0);
                Tensor wsign = sign_forward(*wn);
                auto y_bin = conv2d(nullptr, xb, std::make_shared<Tensor>(std::move(wsign)),
                                    stride, padding, -1.0);
                scaling_factor(scaling, *wn, y_real.get(), y_bin.get());
            }
            y = scale_channels(tape, y, scaling.value);
            break;
        }
    }
    return batchnorm2d(tape, y, *bn, train);
}

TensorPtr BuildingBlock::shortcut(Tape* tape, const TensorPtr& x, bool train) {
    if (!has_down) return x;
    auto p = conv2d(tape, x, down_w, conv1.stride, 0, 0.0);
    return batchnorm2d(tape, p, *down_bn, train);
}

TensorPtr BuildingBlock::forward(Tape* tape, const TensorPtr& x,
                                 const std::optional<TrainingProgress>& progress, int stage,
                                 bool train) {
    auto sc = shortcut(tape, x, train);
    auto u1 = conv1.forward(tape, x, progress, stage, train);
    TensorPtr h1 = residual == ResidualMode::DOUBLE
                       ? activation_apply(tape, act1, add(tape, u1, sc))
                       : activation_apply(tape, act1, u1);
    auto u2 = conv2.forward(tape, h1, progress, stage, train);
    TensorPtr h2 = residual == ResidualMode::DOUBLE
                       ? activation_apply(tape, act2, add(tape, u2, h1))
                       : activation_apply(tape, act2, add(tape, u2, sc));
    return h2;
}

}  // namespace bnn
