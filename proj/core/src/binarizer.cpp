#include "bnn/binarizer.hpp"

#include <cmath>

namespace bnn {

double schedule_lambda(BinarizerKind kind, const TrainingProgress& progress) {
    if (progress.t < 0.0 || progress.t > 1.0)
        throw std::out_of_range("schedule_lambda: training progress " + std::to_string(progress.t) +
                                " outside [0,1]");
    switch (kind) {
        case BinarizerKind::EDE:
        case BinarizerKind::T:
            return std::pow(10.0, -3.0 + 4.0 * progress.t);
        case BinarizerKind::GPN:
            return std::pow(10.0, -2.0 + 3.0 * progress.t);
        default:
            throw std::invalid_argument("schedule_lambda: binarizer kind has no schedule");
    }
}

BinarizerSpec BinarizerSpec::parse(const std::string& name) {
    BinarizerSpec spec;
    if (name == "IDENTITY") {
        spec.kind = BinarizerKind::IDENTITY;
    } else if (name == "LC_A") {
        spec.kind = BinarizerKind::LC_A;
    } else if (name.rfind("LC_", 0) == 0) {
        spec.kind = BinarizerKind::LC;
        try {
            spec.clip_width = std::stod(name.substr(3));
        } catch (const std::exception&) {
            throw std::invalid_argument("binarizer: bad clip width in '" + name + "'");
        }
        if (spec.clip_width <= 0)
            throw std::invalid_argument("binarizer: clip width must be positive in '" + name + "'");
    } else if (name == "PN") {
        spec.kind = BinarizerKind::PN;
    } else if (name == "GPN") {
        spec.kind = BinarizerKind::GPN;
    } else if (name == "T") {
        spec.kind = BinarizerKind::T;
    } else if (name == "EDE") {
        spec.kind = BinarizerKind::EDE;
    } else if (name == "SS") {
        spec.kind = BinarizerKind::SS;
    } else if (name == "EWGS") {
        spec.kind = BinarizerKind::EWGS;
    } else {
        throw std::invalid_argument("binarizer: unknown kind '" + name + "'");
    }
    return spec;
}

std::string BinarizerSpec::name() const {
    switch (kind) {
        case BinarizerKind::IDENTITY: return "IDENTITY";
        case BinarizerKind::LC: {
            // Trim trailing zeros so LC_1.0 prints as LC_1 and LC_1.3 stays LC_1.3.
            std::string v = std::to_string(clip_width);
            v.erase(v.find_last_not_of('0') + 1);
            if (!v.empty() && v.back() == '.') v.pop_back();
            return "LC_" + v;
        }
        case BinarizerKind::LC_A: return "LC_A";
        case BinarizerKind::PN: return "PN";
        case BinarizerKind::GPN: return "GPN";
        case BinarizerKind::T: return "T";
        case BinarizerKind::EDE: return "EDE";
        case BinarizerKind::SS: return "SS";
        case BinarizerKind::EWGS: return "EWGS";
    }
    return "?";
}

void sign_forward(const Tensor& x, Tensor& out) {
    if (out.shape != x.shape) out = Tensor(x.shape);
    for (std::int64_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] >= 0.0 ? 1.0 : -1.0;
}

namespace {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double resolved_lambda(const BinarizerSpec& spec, const std::optional<TrainingProgress>& progress) {
    if (!progress)
        throw std::logic_error("ste_backward: " + spec.name() +
                               " requires a resolved training progress");
    return schedule_lambda(spec.kind, *progress);
}

}  // namespace

void ste_backward(const BinarizerSpec& spec, const std::optional<TrainingProgress>& progress,
                  std::span<const double> x_r, std::span<const double> g_out,
                  std::span<double> g_in, double* clip_grad) {
    const std::size_t n = x_r.size();
    if (g_out.size() != n || g_in.size() != n)
        throw std::invalid_argument("ste_backward: span length mismatch");

    switch (spec.kind) {
        case BinarizerKind::IDENTITY:
            for (std::size_t i = 0; i < n; ++i) g_in[i] = g_out[i];
            break;

        case BinarizerKind::LC: {
            const double X = spec.clip_width;
            for (std::size_t i = 0; i < n; ++i)
                g_in[i] = std::abs(x_r[i]) <= X ? g_out[i] : 0.0;
            break;
        }

        case BinarizerKind::LC_A: {
            if (!spec.learnable_clip)
                throw std::logic_error("ste_backward: LC_A spec has no clip parameter");
            const double X = spec.learnable_clip->data[0];
            double cg = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (std::abs(x_r[i]) <= X) {
                    g_in[i] = g_out[i];
                } else {
                    g_in[i] = 0.0;
                    cg += g_out[i] * (x_r[i] > 0 ? 1.0 : -1.0);
                }
            }
            if (clip_grad) *clip_grad += cg;
            break;
        }

        case BinarizerKind::PN:
            for (std::size_t i = 0; i < n; ++i) {
                const double x = x_r[i];
                double d = 0.0;
                if (x >= -1.0 && x < 0.0)
                    d = 2.0 + 2.0 * x;
                else if (x >= 0.0 && x < 1.0)
                    d = 2.0 - 2.0 * x;
                g_in[i] = g_out[i] * d;
            }
            break;

        case BinarizerKind::GPN: {
            const double lambda = resolved_lambda(spec, progress);
            const double k = spec.gpn_k_clamp_at_one ? std::max(1.0 / lambda, 1.0)
                                                     : std::max(1.0 / lambda, 0.0);
            const double bound = std::sqrt(2.0) / lambda;
            for (std::size_t i = 0; i < n; ++i) {
                const double ax = std::abs(x_r[i]);
                const double d = ax < bound ? k * lambda * (std::sqrt(2.0) - lambda * ax) : 0.0;
                g_in[i] = g_out[i] * d;
            }
            break;
        }

        case BinarizerKind::T: {
            const double lambda = resolved_lambda(spec, progress);
            for (std::size_t i = 0; i < n; ++i) {
                const double th = std::tanh(lambda * x_r[i]);
                g_in[i] = g_out[i] * lambda * (1.0 - th * th);
            }
            break;
        }

        case BinarizerKind::EDE: {
            const double lambda = resolved_lambda(spec, progress);
            const double scale = std::max(1.0 / lambda, 1.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double th = std::tanh(lambda * x_r[i]);
                g_in[i] = g_out[i] * scale * lambda * (1.0 - th * th);
            }
            break;
        }

        case BinarizerKind::SS: {
            const double b = spec.ss_beta;
            for (std::size_t i = 0; i < n; ++i) {
                const double s = sigmoid(b * x_r[i]);
                const double d = 2.0 * b * s * (1.0 - s) * (2.0 + b * x_r[i] * (1.0 - 2.0 * s));
                g_in[i] = g_out[i] * d;
            }
            break;
        }

        case BinarizerKind::EWGS: {
            const double delta = spec.ewgs_delta;
            for (std::size_t i = 0; i < n; ++i) {
                const double g = g_out[i];
                const double xb = x_r[i] >= 0.0 ? 1.0 : -1.0;
                const double sg = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
                g_in[i] = g * (1.0 + delta * sg * (x_r[i] - xb));
            }
            break;
        }
    }
}

TensorPtr binarize(Tape* tape, const BinarizerSpec& spec, const TensorPtr& x,
                   const std::optional<TrainingProgress>& progress) {
    if (spec.needs_schedule() && !progress)
        throw std::logic_error("binarize: " + spec.name() + " requires a resolved training progress");

    auto y = make_tensor(x->shape);
    if (spec.kind == BinarizerKind::IDENTITY) {
        y->data = x->data;
    } else {
        sign_forward(*x, *y);
    }

    if (tape) {
        BinarizerSpec s = spec;
        std::optional<TrainingProgress> p = progress;
        tape->record([x, y, s, p]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            std::vector<double> g_in(x->data.size());
            double clip_grad = 0.0;
            ste_backward(s, p, x->data, y->grad, g_in, &clip_grad);
            for (std::size_t i = 0; i < g_in.size(); ++i) x->grad[i] += g_in[i];
            if (s.kind == BinarizerKind::LC_A && s.learnable_clip) {
                s.learnable_clip->ensure_grad();
                s.learnable_clip->grad[0] += clip_grad;
            }
        });
    }
    return y;
}

}  // namespace bnn
