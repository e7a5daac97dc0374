#include "bnn/normalizer.hpp"

#include <algorithm>
#include <cmath>

namespace bnn {

namespace {
constexpr double kSigmaFloor = 1e-12;
}

std::shared_ptr<BatchNormParams> BatchNormParams::create(int channels, double momentum, double eps) {
    auto bn = std::make_shared<BatchNormParams>();
    bn->gamma = make_tensor({channels}, 1.0);
    bn->beta = make_tensor({channels}, 0.0);
    bn->running_mu.assign(static_cast<std::size_t>(channels), 0.0);
    bn->running_var.assign(static_cast<std::size_t>(channels), 1.0);
    bn->momentum = momentum;
    bn->eps = eps;
    return bn;
}

NormalizerKind NormalizerSpec::parse_kind(const std::string& name) {
    if (name == "NONE" || name == "FN_NONE" || name == "WN_NONE") return NormalizerKind::NONE;
    if (name == "FN_LB" || name == "LB") return NormalizerKind::LB;
    if (name == "FN_STD" || name == "STD") return NormalizerKind::STD;
    if (name == "FN_BN" || name == "BN") return NormalizerKind::BN;
    if (name == "WN_MSTD" || name == "MSTD") return NormalizerKind::MSTD;
    if (name == "WN_MSTDB" || name == "MSTDB") return NormalizerKind::MSTDB;
    throw std::invalid_argument("normalizer: unknown kind '" + name + "'");
}

std::string NormalizerSpec::kind_name(NormalizerKind kind, bool for_weight) {
    const char* prefix = for_weight ? "WN_" : "FN_";
    switch (kind) {
        case NormalizerKind::NONE: return "NONE";
        case NormalizerKind::LB: return std::string(prefix) + "LB";
        case NormalizerKind::STD: return std::string(prefix) + "STD";
        case NormalizerKind::MSTD: return std::string(prefix) + "MSTD";
        case NormalizerKind::MSTDB: return std::string(prefix) + "MSTDB";
        case NormalizerKind::BN: return std::string(prefix) + "BN";
    }
    return "?";
}

TensorPtr batchnorm2d(Tape* tape, const TensorPtr& x, BatchNormParams& bn, bool train) {
    const int n = x->shape[0], c = x->shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x->shape[2]) * x->shape[3];
    const std::int64_t m = static_cast<std::int64_t>(n) * hw;
    if (static_cast<int>(bn.running_mu.size()) != c)
        throw std::invalid_argument("batchnorm2d: channel count " + std::to_string(c) +
                                    " does not match parameters (" +
                                    std::to_string(bn.running_mu.size()) + ")");

    auto y = make_tensor(x->shape);
    auto mu = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    auto sdev = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));

    if (train) {
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0, acc2 = 0.0;
            for (int i = 0; i < n; ++i) {
                const double* base = x->data.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
                for (std::int64_t k = 0; k < hw; ++k) {
                    acc += base[k];
                    acc2 += base[k] * base[k];
                }
            }
            const double mean = acc / static_cast<double>(m);
            const double var = std::max(0.0, acc2 / static_cast<double>(m) - mean * mean);
            (*mu)[ch] = mean;
            (*sdev)[ch] = std::sqrt(var + bn.eps);
            bn.running_mu[ch] = bn.momentum * mean + (1.0 - bn.momentum) * bn.running_mu[ch];
            bn.running_var[ch] = bn.momentum * var + (1.0 - bn.momentum) * bn.running_var[ch];
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            (*mu)[ch] = bn.running_mu[ch];
            (*sdev)[ch] = std::sqrt(bn.running_var[ch] + bn.eps);
        }
    }

    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
            const double g = bn.gamma->data[ch], b = bn.beta->data[ch];
            const double mc = (*mu)[ch], s = (*sdev)[ch];
            for (std::int64_t k = 0; k < hw; ++k)
                y->data[base + k] = bn_apply(g, b, mc, s, x->data[base + k]);
        }

    if (tape) {
        auto gamma = bn.gamma;
        auto beta = bn.beta;
        tape->record([x, y, gamma, beta, mu, sdev, n, c, hw, m, train]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            gamma->ensure_grad();
            beta->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                const double mc = (*mu)[ch], s = (*sdev)[ch], g = gamma->data[ch];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int i = 0; i < n; ++i) {
                    const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k) {
                        const double dy = y->grad[base + k];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (x->data[base + k] - mc) / s;
                    }
                }
                gamma->grad[ch] += sum_dy_xhat;
                beta->grad[ch] += sum_dy;
                if (train) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (int i = 0; i < n; ++i) {
                        const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
                        for (std::int64_t k = 0; k < hw; ++k) {
                            const double xhat = (x->data[base + k] - mc) / s;
                            x->grad[base + k] += (g / s) * (y->grad[base + k] - inv_m * sum_dy -
                                                            xhat * inv_m * sum_dy_xhat);
                        }
                    }
                } else {
                    for (int i = 0; i < n; ++i) {
                        const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
                        for (std::int64_t k = 0; k < hw; ++k)
                            x->grad[base + k] += (g / s) * y->grad[base + k];
                    }
                }
            }
        });
    }
    return y;
}

namespace {

// Per-channel division by the batch standard deviation, differentiated
// through sigma. dx_j = g_j/s - (x_j - mu) * sum(g*x) / (m * s^3).
TensorPtr std_feature(Tape* tape, const TensorPtr& x) {
    const int n = x->shape[0], c = x->shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x->shape[2]) * x->shape[3];
    const std::int64_t m = static_cast<std::int64_t>(n) * hw;
    auto y = make_tensor(x->shape);
    auto mu = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    auto sdev = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0, acc2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* base = x->data.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) {
                acc += base[k];
                acc2 += base[k] * base[k];
            }
        }
        const double mean = acc / static_cast<double>(m);
        const double var = std::max(0.0, acc2 / static_cast<double>(m) - mean * mean);
        (*mu)[ch] = mean;
        (*sdev)[ch] = std::max(std::sqrt(var), kSigmaFloor);
    }
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
            const double s = (*sdev)[ch];
            for (std::int64_t k = 0; k < hw; ++k) y->data[base + k] = x->data[base + k] / s;
        }
    if (tape) {
        tape->record([x, y, mu, sdev, n, c, hw, m]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                const double s = (*sdev)[ch], mc = (*mu)[ch];
                const bool floored = s <= kSigmaFloor;
                double sum_gx = 0.0;
                for (int i = 0; i < n; ++i) {
                    const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k)
                        sum_gx += y->grad[base + k] * x->data[base + k];
                }
                const double coef = floored ? 0.0 : sum_gx / (static_cast<double>(m) * s * s * s);
                for (int i = 0; i < n; ++i) {
                    const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k)
                        x->grad[base + k] +=
                            y->grad[base + k] / s - (x->data[base + k] - mc) * coef;
                }
            }
        });
    }
    return y;
}

}  // namespace

TensorPtr normalize_feature(Tape* tape, const NormalizerSpec& spec, const TensorPtr& x, bool train) {
    switch (spec.kind) {
        case NormalizerKind::NONE:
            return x;
        case NormalizerKind::LB:
            if (!spec.lb_bias) throw std::logic_error("normalize_feature: LB spec has no bias");
            return add_channel_bias(tape, x, spec.lb_bias);
        case NormalizerKind::STD:
            return train ? std_feature(tape, x) : x;
        case NormalizerKind::BN:
            if (!spec.bn) throw std::logic_error("normalize_feature: BN spec has no parameters");
            return batchnorm2d(tape, x, *spec.bn, train);
        default:
            throw std::invalid_argument("normalize_feature: " +
                                        NormalizerSpec::kind_name(spec.kind, false) +
                                        " is not a feature normalizer");
    }
}

TensorPtr normalize_weight(Tape* tape, const NormalizerSpec& spec, const TensorPtr& w) {
    if (spec.kind == NormalizerKind::NONE) return w;
    if (spec.kind != NormalizerKind::MSTD && spec.kind != NormalizerKind::MSTDB)
        throw std::invalid_argument("normalize_weight: " +
                                    NormalizerSpec::kind_name(spec.kind, true) +
                                    " is not a weight normalizer");
    const double divisor = spec.kind == NormalizerKind::MSTDB ? spec.b : 1.0;
    if (divisor <= 0) throw std::invalid_argument("normalize_weight: divisor b must be positive");

    const std::int64_t m = w->size();
    double mean = 0.0;
    for (double v : w->data) mean += v;
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (double v : w->data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(m);
    const double s = std::max(std::sqrt(var), kSigmaFloor);

    double center = mean;
    const bool median_center = spec.mstd_center == CenterKind::MEDIAN;
    if (median_center) {
        std::vector<double> sorted(w->data);
        std::nth_element(sorted.begin(), sorted.begin() + m / 2, sorted.end());
        center = sorted[static_cast<std::size_t>(m / 2)];
        if (m % 2 == 0) {
            const double hi = center;
            std::nth_element(sorted.begin(), sorted.begin() + (m / 2 - 1), sorted.end());
            center = 0.5 * (sorted[static_cast<std::size_t>(m / 2 - 1)] + hi);
        }
    }

    auto y = make_tensor(w->shape);
    const double sb = s * divisor;
    for (std::int64_t i = 0; i < m; ++i) y->data[i] = (w->data[i] - center) / sb;

    if (tape) {
        tape->record([w, y, mean, center, s, sb, m, median_center]() {
            if (y->grad.empty()) return;
            w->ensure_grad();
            const bool floored = s <= kSigmaFloor;
            double sum_g = 0.0, sum_g_dev = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                sum_g += y->grad[i];
                sum_g_dev += y->grad[i] * (w->data[i] - center);
            }
            // The median center is treated as a constant in backward (its
            // derivative is a zero-measure selector); the mean center is
            // differentiated exactly.
            const double center_coef = median_center ? 0.0 : sum_g / static_cast<double>(m);
            const double sigma_coef =
                floored ? 0.0 : sum_g_dev / (static_cast<double>(m) * s * s * sb);
            for (std::int64_t i = 0; i < m; ++i)
                w->grad[i] += (y->grad[i] - center_coef) / sb -
                              (w->data[i] - mean) * sigma_coef;
        });
    }
    return y;
}

}  // namespace bnn
