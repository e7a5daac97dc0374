#include "bnn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bnn {

void Tape::backward(const TensorPtr& loss) {
    if (!loss || loss->size() != 1)
        throw std::invalid_argument("tape_backward: loss must be a scalar tensor");
    if (nodes_.empty()) throw std::logic_error("tape_backward: tape is empty");
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

namespace {

struct ConvDims {
    int n, c, h, w, o, kh, kw, oh, ow;
    std::int64_t m, k;  // im2col extents: m = oh*ow, k = c*kh*kw
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int padding) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        throw std::invalid_argument("conv2d: expected 4-D input " + shape_str(x.shape) +
                                    " and 4-D weight " + shape_str(w.shape));
    if (x.shape[1] != w.shape[1])
        throw std::invalid_argument("conv2d: input channels " + std::to_string(x.shape[1]) +
                                    " do not match weight channels " + std::to_string(w.shape[1]));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");
    ConvDims d{};
    d.n = x.shape[0];
    d.c = x.shape[1];
    d.h = x.shape[2];
    d.w = x.shape[3];
    d.o = w.shape[0];
    d.kh = w.shape[2];
    d.kw = w.shape[3];
    d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
    d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
    if (d.h + 2 * padding < d.kh || d.w + 2 * padding < d.kw || d.oh < 1 || d.ow < 1)
        throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape) +
                                    " does not fit input " + shape_str(x.shape) + " with padding " +
                                    std::to_string(padding));
    d.m = static_cast<std::int64_t>(d.oh) * d.ow;
    d.k = static_cast<std::int64_t>(d.c) * d.kh * d.kw;
    return d;
}

// Gather one image's patches into col[m][k], k = (c*Kh + kh)*Kw + kw.
void im2col(const double* x, const ConvDims& d, int stride, int padding, double pad_value,
            double* col) {
    for (int oh = 0; oh < d.oh; ++oh) {
        for (int ow = 0; ow < d.ow; ++ow) {
            double* row = col + (static_cast<std::int64_t>(oh) * d.ow + ow) * d.k;
            for (int c = 0; c < d.c; ++c) {
                const double* xc = x + static_cast<std::int64_t>(c) * d.h * d.w;
                for (int kh = 0; kh < d.kh; ++kh) {
                    const int ih = oh * stride - padding + kh;
                    if (ih < 0 || ih >= d.h) {
                        for (int kw = 0; kw < d.kw; ++kw) *row++ = pad_value;
                        continue;
                    }
                    const double* xrow = xc + static_cast<std::int64_t>(ih) * d.w;
                    for (int kw = 0; kw < d.kw; ++kw) {
                        const int iw = ow * stride - padding + kw;
                        *row++ = (iw < 0 || iw >= d.w) ? pad_value : xrow[iw];
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const double* col, const ConvDims& d, int stride, int padding, double* dx) {
    for (int oh = 0; oh < d.oh; ++oh) {
        for (int ow = 0; ow < d.ow; ++ow) {
            const double* row = col + (static_cast<std::int64_t>(oh) * d.ow + ow) * d.k;
            for (int c = 0; c < d.c; ++c) {
                double* xc = dx + static_cast<std::int64_t>(c) * d.h * d.w;
                for (int kh = 0; kh < d.kh; ++kh) {
                    const int ih = oh * stride - padding + kh;
                    for (int kw = 0; kw < d.kw; ++kw, ++row) {
                        const int iw = ow * stride - padding + kw;
                        if (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w)
                            xc[static_cast<std::int64_t>(ih) * d.w + iw] += *row;
                    }
                }
            }
        }
    }
}

inline double dot(const double* a, const double* b, std::int64_t n) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

inline void axpy(double alpha, const double* x, double* y, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

TensorPtr conv2d(Tape* tape, const TensorPtr& x, const TensorPtr& w, int stride, int padding,
                 double pad_value) {
    const ConvDims d = conv_dims(*x, *w, stride, padding);
    auto y = make_tensor({d.n, d.o, d.oh, d.ow});

    std::vector<double> col(static_cast<std::size_t>(d.m * d.k));
    for (int n = 0; n < d.n; ++n) {
        im2col(x->data.data() + static_cast<std::int64_t>(n) * d.c * d.h * d.w, d, stride, padding,
               pad_value, col.data());
        double* yn = y->data.data() + static_cast<std::int64_t>(n) * d.o * d.m;
        for (std::int64_t m = 0; m < d.m; ++m) {
            const double* patch = col.data() + m * d.k;
            for (int o = 0; o < d.o; ++o)
                yn[static_cast<std::int64_t>(o) * d.m + m] = dot(patch, w->data.data() + o * d.k, d.k);
        }
    }

    if (tape) {
        tape->record([x, w, y, d, stride, padding, pad_value]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            w->ensure_grad();
            std::vector<double> col(static_cast<std::size_t>(d.m * d.k));
            std::vector<double> dcol(static_cast<std::size_t>(d.m * d.k));
            for (int n = 0; n < d.n; ++n) {
                im2col(x->data.data() + static_cast<std::int64_t>(n) * d.c * d.h * d.w, d, stride,
                       padding, pad_value, col.data());
                const double* dyn = y->grad.data() + static_cast<std::int64_t>(n) * d.o * d.m;
                std::fill(dcol.begin(), dcol.end(), 0.0);
                for (std::int64_t m = 0; m < d.m; ++m) {
                    double* drow = dcol.data() + m * d.k;
                    const double* crow = col.data() + m * d.k;
                    for (int o = 0; o < d.o; ++o) {
                        const double g = dyn[static_cast<std::int64_t>(o) * d.m + m];
                        if (g == 0.0) continue;
                        axpy(g, w->data.data() + o * d.k, drow, d.k);
                        axpy(g, crow, w->grad.data() + o * d.k, d.k);
                    }
                }
                col2im_accumulate(dcol.data(), d, stride, padding,
                                  x->grad.data() + static_cast<std::int64_t>(n) * d.c * d.h * d.w);
            }
        });
    }
    return y;
}

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(*a, *b, "add");
    auto y = make_tensor(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) y->data[i] = a->data[i] + b->data[i];
    if (tape) {
        tape->record([a, b, y]() {
            if (y->grad.empty()) return;
            a->ensure_grad();
            b->ensure_grad();
            for (std::int64_t i = 0; i < y->size(); ++i) {
                a->grad[i] += y->grad[i];
                b->grad[i] += y->grad[i];
            }
        });
    }
    return y;
}

TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(*a, *b, "mul");
    auto y = make_tensor(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) y->data[i] = a->data[i] * b->data[i];
    if (tape) {
        tape->record([a, b, y]() {
            if (y->grad.empty()) return;
            a->ensure_grad();
            b->ensure_grad();
            for (std::int64_t i = 0; i < y->size(); ++i) {
                a->grad[i] += y->grad[i] * b->data[i];
                b->grad[i] += y->grad[i] * a->data[i];
            }
        });
    }
    return y;
}

TensorPtr identity(Tape* tape, const TensorPtr& x) {
    auto y = make_tensor(x->shape, x->data);
    if (tape) {
        tape->record([x, y]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            for (std::int64_t i = 0; i < y->size(); ++i) x->grad[i] += y->grad[i];
        });
    }
    return y;
}

TensorPtr sum(Tape* tape, const TensorPtr& x) {
    auto y = make_scalar(0.0);
    double acc = 0.0;
    for (double v : x->data) acc += v;
    y->data[0] = acc;
    if (tape) {
        tape->record([x, y]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            const double g = y->grad[0];
            for (std::int64_t i = 0; i < x->size(); ++i) x->grad[i] += g;
        });
    }
    return y;
}

TensorPtr add_channel_bias(Tape* tape, const TensorPtr& x, const TensorPtr& bias) {
    const int c = x->shape[1];
    if (bias->size() != c)
        throw std::invalid_argument("add_channel_bias: bias length " + std::to_string(bias->size()) +
                                    " does not match channels " + std::to_string(c));
    auto y = make_tensor(x->shape);
    const std::int64_t hw = static_cast<std::int64_t>(x->shape[2]) * x->shape[3];
    for (int n = 0; n < x->shape[0]; ++n)
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * c + ch) * hw;
            const double b = bias->data[ch];
            for (std::int64_t i = 0; i < hw; ++i) y->data[base + i] = x->data[base + i] + b;
        }
    if (tape) {
        tape->record([x, bias, y, c, hw]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            bias->ensure_grad();
            for (int n = 0; n < x->shape[0]; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * c + ch) * hw;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        x->grad[base + i] += y->grad[base + i];
                        acc += y->grad[base + i];
                    }
                    bias->grad[ch] += acc;
                }
        });
    }
    return y;
}

TensorPtr scale_channels(Tape* tape, const TensorPtr& x, const TensorPtr& scale) {
    const int c = x->shape[1];
    if (scale->size() != c)
        throw std::invalid_argument("scale_channels: scale length " + std::to_string(scale->size()) +
                                    " does not match channels " + std::to_string(c));
    auto y = make_tensor(x->shape);
    const std::int64_t hw = static_cast<std::int64_t>(x->shape[2]) * x->shape[3];
    for (int n = 0; n < x->shape[0]; ++n)
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * c + ch) * hw;
            const double s = scale->data[ch];
            for (std::int64_t i = 0; i < hw; ++i) y->data[base + i] = x->data[base + i] * s;
        }
    if (tape) {
        tape->record([x, scale, y, c, hw]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            scale->ensure_grad();
            for (int n = 0; n < x->shape[0]; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * c + ch) * hw;
                    const double s = scale->data[ch];
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        x->grad[base + i] += y->grad[base + i] * s;
                        acc += y->grad[base + i] * x->data[base + i];
                    }
                    scale->grad[ch] += acc;
                }
        });
    }
    return y;
}

TensorPtr channel_mean_abs(Tape* tape, const TensorPtr& w) {
    const int o = w->shape[0];
    const std::int64_t per = w->size() / o;
    auto y = make_tensor({o});
    for (int ch = 0; ch < o; ++ch) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < per; ++i) acc += std::abs(w->data[ch * per + i]);
        y->data[ch] = acc / static_cast<double>(per);
    }
    if (tape) {
        tape->record([w, y, o, per]() {
            if (y->grad.empty()) return;
            w->ensure_grad();
            for (int ch = 0; ch < o; ++ch) {
                const double g = y->grad[ch] / static_cast<double>(per);
                for (std::int64_t i = 0; i < per; ++i) {
                    const double v = w->data[ch * per + i];
                    if (v > 0)
                        w->grad[ch * per + i] += g;
                    else if (v < 0)
                        w->grad[ch * per + i] -= g;
                }
            }
        });
    }
    return y;
}

TensorPtr global_avg_pool(Tape* tape, const TensorPtr& x) {
    const int n = x->shape[0], c = x->shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x->shape[2]) * x->shape[3];
    auto y = make_tensor({n, c});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
            double acc = 0.0;
            for (std::int64_t k = 0; k < hw; ++k) acc += x->data[base + k];
            y->data[static_cast<std::int64_t>(i) * c + ch] = acc / static_cast<double>(hw);
        }
    if (tape) {
        tape->record([x, y, n, c, hw]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const double g = y->grad[static_cast<std::int64_t>(i) * c + ch] /
                                     static_cast<double>(hw);
                    const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k) x->grad[base + k] += g;
                }
        });
    }
    return y;
}

TensorPtr max_pool2d(Tape* tape, const TensorPtr& x, int kernel, int stride, int padding) {
    const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    const int oh = (h + 2 * padding - kernel) / stride + 1;
    const int ow = (w + 2 * padding - kernel) / stride + 1;
    if (oh < 1 || ow < 1) throw std::invalid_argument("max_pool2d: kernel does not fit input");
    auto y = make_tensor({n, c, oh, ow});
    auto arg = std::make_shared<std::vector<std::int64_t>>(y->data.size());
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t xbase = (static_cast<std::int64_t>(i) * c + ch) * h * w;
            for (int po = 0; po < oh; ++po)
                for (int qo = 0; qo < ow; ++qo) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (int kh = 0; kh < kernel; ++kh)
                        for (int kw = 0; kw < kernel; ++kw) {
                            const int ih = po * stride - padding + kh;
                            const int iw = qo * stride - padding + kw;
                            if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                            const double v = x->data[xbase + static_cast<std::int64_t>(ih) * w + iw];
                            if (v > best) {
                                best = v;
                                best_idx = xbase + static_cast<std::int64_t>(ih) * w + iw;
                            }
                        }
                    const std::int64_t yi =
                        ((static_cast<std::int64_t>(i) * c + ch) * oh + po) * ow + qo;
                    y->data[yi] = best;
                    (*arg)[yi] = best_idx;
                }
        }
    if (tape) {
        tape->record([x, y, arg]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < y->data.size(); ++i)
                if ((*arg)[i] >= 0) x->grad[(*arg)[i]] += y->grad[i];
        });
    }
    return y;
}

TensorPtr linear(Tape* tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias) {
    const int n = x->shape[0], f = x->shape[1];
    const int k = weight->shape[0];
    if (weight->shape[1] != f)
        throw std::invalid_argument("linear: weight features " + std::to_string(weight->shape[1]) +
                                    " do not match input features " + std::to_string(f));
    auto y = make_tensor({n, k});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j)
            y->data[static_cast<std::int64_t>(i) * k + j] =
                dot(x->data.data() + static_cast<std::int64_t>(i) * f,
                    weight->data.data() + static_cast<std::int64_t>(j) * f, f) +
                bias->data[j];
    if (tape) {
        tape->record([x, weight, bias, y, n, f, k]() {
            if (y->grad.empty()) return;
            x->ensure_grad();
            weight->ensure_grad();
            bias->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j) {
                    const double g = y->grad[static_cast<std::int64_t>(i) * k + j];
                    if (g == 0.0) continue;
                    axpy(g, weight->data.data() + static_cast<std::int64_t>(j) * f,
                         x->grad.data() + static_cast<std::int64_t>(i) * f, f);
                    axpy(g, x->data.data() + static_cast<std::int64_t>(i) * f,
                         weight->grad.data() + static_cast<std::int64_t>(j) * f, f);
                    bias->grad[j] += g;
                }
        });
    }
    return y;
}

TensorPtr softmax_cross_entropy(Tape* tape, const TensorPtr& logits,
                                const std::vector<int>& labels) {
    const int n = logits->shape[0], k = logits->shape[1];
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("softmax_cross_entropy: label count does not match batch");
    auto probs = std::make_shared<std::vector<double>>(logits->data.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw std::invalid_argument("softmax_cross_entropy: label out of range");
        const double* row = logits->data.data() + static_cast<std::int64_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double logz = std::log(z) + mx;
        for (int j = 0; j < k; ++j)
            (*probs)[static_cast<std::int64_t>(i) * k + j] = std::exp(row[j] - logz);
        loss -= row[labels[i]] - logz;
    }
    auto y = make_scalar(loss / n);
    if (tape) {
        auto lab = std::make_shared<std::vector<int>>(labels);
        tape->record([logits, y, probs, lab, n, k]() {
            if (y->grad.empty()) return;
            logits->ensure_grad();
            const double g = y->grad[0] / n;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j) {
                    double p = (*probs)[static_cast<std::int64_t>(i) * k + j];
                    if (j == (*lab)[i]) p -= 1.0;
                    logits->grad[static_cast<std::int64_t>(i) * k + j] += g * p;
                }
        });
    }
    return y;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const int n = logits.shape[0], k = logits.shape[1];
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data.data() + static_cast<std::int64_t>(i) * k;
        int best = 0;
        for (int j = 1; j < k; ++j)
            if (row[j] > row[best]) best = j;
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0) throw std::invalid_argument("finite_diff_grad: h must be positive");
    Tensor g(x.shape);
    Tensor probe = x;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double v = x.data[i];
        probe.data[i] = v + h;
        const double fp = f(probe);
        probe.data[i] = v - h;
        const double fm = f(probe);
        probe.data[i] = v;
        g.data[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace bnn
