#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnn {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense real-valued tensor, row-major. Feature maps are [N,C,H,W],
/// convolution weights [O,I,Kh,Kw]. `grad` is empty until backward touches it.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    // NCHW / OIKK element access, bounds unchecked.
    double& at(int a, int b, int c, int d) {
        return data[((static_cast<std::int64_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
    double at(int a, int b, int c, int d) const {
        return data[((static_cast<std::int64_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s, double fill = 0.0) {
    return std::make_shared<Tensor>(std::move(s), fill);
}
inline TensorPtr make_tensor(Shape s, std::vector<double> values) {
    return std::make_shared<Tensor>(std::move(s), std::move(values));
}
inline TensorPtr make_scalar(double v) { return make_tensor(Shape{1}, std::vector<double>{v}); }

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace bnn
