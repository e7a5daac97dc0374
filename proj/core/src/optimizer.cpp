#include "bnn/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace bnn {

OptKind parse_optimizer(const std::string& name) {
    if (name == "SGD") return OptKind::SGD;
    if (name == "ADAM") return OptKind::ADAM;
    throw std::invalid_argument("optimizer: unknown kind '" + name + "'");
}

std::string optimizer_name(OptKind kind) { return kind == OptKind::SGD ? "SGD" : "ADAM"; }

void OptimizerState::init(const std::vector<NamedParam>& params) {
    m.clear();
    v.clear();
    t = 0;
    for (const auto& p : params) {
        m.emplace_back(p.tensor->data.size(), 0.0);
        if (kind == OptKind::ADAM) v.emplace_back(p.tensor->data.size(), 0.0);
    }
}

namespace {

double grad_at(const NamedParam& p, std::size_t i, double wd) {
    const double g = p.tensor->grad.empty() ? 0.0 : p.tensor->grad[i];
    if (!std::isfinite(g))
        throw std::runtime_error("optimizer: non-finite gradient in parameter '" + p.name + "'");
    return g + wd * p.tensor->data[i];
}

}  // namespace

void sgd_step(OptimizerState& state, const std::vector<NamedParam>& params) {
    if (state.m.size() != params.size()) state.init(params);
    state.t += 1;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& w = params[pi].tensor->data;
        auto& m = state.m[pi];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = grad_at(params[pi], i, state.weight_decay);
            m[i] = state.momentum * m[i] - state.lr * g;
            w[i] += m[i];
        }
    }
}

void adam_step(OptimizerState& state, const std::vector<NamedParam>& params) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) state.init(params);
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& w = params[pi].tensor->data;
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = grad_at(params[pi], i, state.weight_decay);
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            w[i] -= state.lr * m_hat / std::sqrt(v_hat + state.eps);
        }
    }
}

void optimizer_step(OptimizerState& state, const std::vector<NamedParam>& params) {
    if (state.kind == OptKind::SGD)
        sgd_step(state, params);
    else
        adam_step(state, params);
}

double lr_at(double epoch, int total_epochs, int warmup_epochs, double peak_lr) {
    if (warmup_epochs < 0 || total_epochs <= warmup_epochs)
        throw std::invalid_argument("lr_at: need total_epochs > warmup_epochs >= 0");
    if (epoch < 0) epoch = 0;
    if (epoch < warmup_epochs) return peak_lr * epoch / warmup_epochs;
    if (epoch >= total_epochs) return 0.0;
    const double s = (epoch - warmup_epochs) / static_cast<double>(total_epochs - warmup_epochs);
    return peak_lr * 0.5 * (1.0 + std::cos(M_PI * s));
}

}  // namespace bnn
