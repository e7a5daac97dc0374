#pragma once

#include <cmath>
#include <random>

#include "bnn/tensor.hpp"

namespace testutil {

// Independent 7-loop convolution oracle with explicit border padding.
inline bnn::Tensor naive_conv2d(const bnn::Tensor& x, const bnn::Tensor& w, int stride,
                                int padding, double pad_value) {
    const int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const int o = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (wd + 2 * padding - kw) / stride + 1;
    bnn::Tensor y({n, o, oh, ow});
    for (int ni = 0; ni < n; ++ni)
        for (int oc = 0; oc < o; ++oc)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx) {
                    double acc = 0.0;
                    for (int ic = 0; ic < c; ++ic)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = yy * stride - padding + ky;
                                const int ix = xx * stride - padding + kx;
                                const double v = (iy < 0 || iy >= h || ix < 0 || ix >= wd)
                                                     ? pad_value
                                                     : x.at(ni, ic, iy, ix);
                                acc += v * w.at(oc, ic, ky, kx);
                            }
                    y.at(ni, oc, yy, xx) = acc;
                }
    return y;
}

inline bnn::TensorPtr random_tensor(bnn::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
    auto t = bnn::make_tensor(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t->data) v = dist(rng);
    return t;
}

inline bnn::TensorPtr random_pm1(bnn::Shape shape, std::mt19937_64& rng) {
    auto t = bnn::make_tensor(std::move(shape));
    std::uniform_int_distribution<int> bit(0, 1);
    for (auto& v : t->data) v = bit(rng) ? 1.0 : -1.0;
    return t;
}

inline double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

inline double max_abs_diff(const bnn::Tensor& a, const bnn::Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace testutil
