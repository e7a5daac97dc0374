#pragma once

#include <functional>
#include <vector>

#include "bnn/tensor.hpp"

namespace bnn {

/// Reverse-mode tape, rebuilt on every forward pass (define-by-run).
/// Each recorded node is a closure that reads its output's grad and
/// accumulates into its inputs' grads. Backward visits nodes in reverse
/// recording order exactly once; accumulation is additive, so a tensor
/// used twice receives the sum of both contributions.
class Tape {
public:
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    /// Seeds grad(loss) = 1 and runs all recorded nodes in reverse.
    /// Throws if the loss is not a scalar or the tape is empty.
    void backward(const TensorPtr& loss);

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<std::function<void()>> nodes_;
};

// ---- differentiable ops ----------------------------------------------------
// Every op records its backward rule on the tape when `tape` is non-null;
// with a null tape they are plain forward evaluations.

/// 2-D cross-correlation of x[N,C,H,W] with w[O,C,Kh,Kw]. Padded border
/// cells take `pad_value` (binary convolutions pad with -1). Output extents
/// use the usual floor((H + 2p - Kh)/stride) + 1 rule.
TensorPtr conv2d(Tape* tape, const TensorPtr& x, const TensorPtr& w, int stride, int padding,
                 double pad_value);

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr add_channel_bias(Tape* tape, const TensorPtr& x, const TensorPtr& bias);
TensorPtr scale_channels(Tape* tape, const TensorPtr& x, const TensorPtr& scale);
TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr sum(Tape* tape, const TensorPtr& x);
TensorPtr identity(Tape* tape, const TensorPtr& x);

/// Per-output-channel mean of |w|, w is [O,I,Kh,Kw] -> [O].
TensorPtr channel_mean_abs(Tape* tape, const TensorPtr& w);

TensorPtr global_avg_pool(Tape* tape, const TensorPtr& x);
TensorPtr max_pool2d(Tape* tape, const TensorPtr& x, int kernel, int stride, int padding);
TensorPtr linear(Tape* tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias);

/// Mean softmax cross-entropy over the batch; returns a scalar.
TensorPtr softmax_cross_entropy(Tape* tape, const TensorPtr& logits, const std::vector<int>& labels);

std::vector<int> argmax_rows(const Tensor& logits);

/// Central-difference gradient oracle: (f(x+h*e_i) - f(x-h*e_i)) / (2h).
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace bnn
