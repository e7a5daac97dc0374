#include "bnn/loss.hpp"

#include <cmath>

namespace bnn {

RegKind parse_reg(const std::string& name) {
    if (name == "NONE") return RegKind::NONE;
    if (name == "R1") return RegKind::R1;
    if (name == "R2") return RegKind::R2;
    if (name == "RE") return RegKind::RE;
    throw std::invalid_argument("regularization: unknown kind '" + name + "'");
}

std::string reg_name(RegKind kind) {
    switch (kind) {
        case RegKind::NONE: return "NONE";
        case RegKind::R1: return "R1";
        case RegKind::R2: return "R2";
        case RegKind::RE: return "RE";
    }
    return "?";
}

namespace {

double entropy_bits(double p) {
    if (p <= 0.0 || p >= 1.0) return 0.0;
    return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

}  // namespace

TensorPtr regularization_loss(Tape* tape, const LossSpec& spec,
                              const std::vector<TensorPtr>& weights) {
    if (spec.reg_kind == RegKind::NONE)
        throw std::invalid_argument("regularization_loss: spec has kind NONE");

    auto loss = make_scalar(0.0);
    double acc = 0.0;

    if (spec.reg_kind == RegKind::R1 || spec.reg_kind == RegKind::R2) {
        const double a = spec.reg_alpha;
        const bool squared = spec.reg_kind == RegKind::R2;
        for (const auto& w : weights)
            for (double v : w->data) {
                const double d = a - std::abs(v);
                acc += squared ? d * d : std::abs(d);
            }
        loss->data[0] = acc;
        if (tape) {
            tape->record([weights, loss, a, squared]() {
                if (loss->grad.empty()) return;
                const double g = loss->grad[0];
                for (const auto& w : weights) {
                    w->ensure_grad();
                    for (std::int64_t i = 0; i < w->size(); ++i) {
                        const double v = w->data[i];
                        const double sw = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
                        const double d = a - std::abs(v);
                        if (squared) {
                            w->grad[i] += g * (-2.0 * d * sw);
                        } else {
                            const double sd = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                            w->grad[i] += g * (-sd * sw);
                        }
                    }
                }
            });
        }
        return loss;
    }

    // RE: per-layer entropy of the relaxed sign frequency.
    const double k = spec.re_sharpness;
    const double he = spec.wanted_entropy;
    auto ps = std::make_shared<std::vector<double>>();
    for (const auto& w : weights) {
        double p = 0.0;
        for (double v : w->data) p += (std::tanh(k * v) + 1.0) * 0.5;
        p /= static_cast<double>(w->size());
        ps->push_back(p);
        acc += std::abs(he - entropy_bits(p));
    }
    loss->data[0] = acc;
    if (tape) {
        tape->record([weights, loss, ps, k, he]() {
            if (loss->grad.empty()) return;
            const double g = loss->grad[0];
            for (std::size_t li = 0; li < weights.size(); ++li) {
                const auto& w = weights[li];
                w->ensure_grad();
                const double p = std::min(1.0 - 1e-12, std::max(1e-12, (*ps)[li]));
                const double h = entropy_bits(p);
                const double sd = (he - h) > 0 ? 1.0 : ((he - h) < 0 ? -1.0 : 0.0);
                const double dh_dp = std::log2((1.0 - p) / p);
                const double dloss_dp = -sd * dh_dp;
                const double n = static_cast<double>(w->size());
                for (std::int64_t i = 0; i < w->size(); ++i) {
                    const double th = std::tanh(k * w->data[i]);
                    w->grad[i] += g * dloss_dp * k * (1.0 - th * th) / (2.0 * n);
                }
            }
        });
    }
    return loss;
}

double weight_sign_entropy_hard(const std::vector<TensorPtr>& weights, double wanted_entropy) {
    double acc = 0.0;
    for (const auto& w : weights) {
        std::int64_t pos = 0;
        for (double v : w->data)
            if (v >= 0.0) ++pos;
        const double p = static_cast<double>(pos) / static_cast<double>(w->size());
        acc += std::abs(wanted_entropy - entropy_bits(p));
    }
    return acc;
}

TensorPtr add_scaled_scalar(Tape* tape, const TensorPtr& a, const TensorPtr& b, double c) {
    if (a->size() != 1 || b->size() != 1)
        throw std::invalid_argument("add_scaled_scalar: operands must be scalars");
    auto y = make_scalar(a->data[0] + c * b->data[0]);
    if (tape) {
        tape->record([a, b, y, c]() {
            if (y->grad.empty()) return;
            a->ensure_grad();
            b->ensure_grad();
            a->grad[0] += y->grad[0];
            b->grad[0] += c * y->grad[0];
        });
    }
    return y;
}

}  // namespace bnn
