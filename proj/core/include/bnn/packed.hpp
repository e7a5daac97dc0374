#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnn/bitpack.hpp"
#include "bnn/dataset.hpp"
#include "bnn/model.hpp"

namespace bnn {

/// Feature bits in channel-innermost order: one padded word group per pixel,
/// so a convolution tap is a word-aligned segment and -1 spatial padding is a
/// group of zero words.
struct PackedImage {
    int n = 0, h = 0, w = 0, c = 0;
    int cwords = 0;
    std::vector<std::uint64_t> words;  // n*h*w*cwords

    const std::uint64_t* pixel(int i, int y, int x) const {
        return words.data() +
               ((static_cast<std::int64_t>(i) * h + y) * w + x) * cwords;
    }
    std::uint64_t* pixel(int i, int y, int x) {
        return words.data() +
               ((static_cast<std::int64_t>(i) * h + y) * w + x) * cwords;
    }
};

/// Folded feature normalization applied to the real input right before the
/// sign. BN4 keeps the batch-norm quadruple so the packed path rounds exactly
/// like the float eval path.
struct PresignOp {
    enum Kind : std::uint8_t { IDENTITY = 0, BIAS = 1, BN4 = 2 };
    std::uint8_t kind = IDENTITY;
    std::vector<double> bias;                      // BIAS
    std::vector<double> gamma, beta, mu, var;      // BN4
    double eps = 1e-5;
};

struct BnFold {
    std::vector<double> gamma, beta, mu, var;
    double eps = 1e-5;
};

/// One binary convolution in deployment form. THRESHOLD layers fold
/// conv -> batchnorm -> sign into per-channel integer thresholds with the
/// negative-gamma channels flipped into the weights; AFFINE layers keep the
/// batch-norm affine because a real-valued residual add follows.
struct PackedConvLayer {
    enum Kind : std::uint8_t { THRESHOLD = 0, AFFINE = 1 };
    std::uint8_t kind = THRESHOLD;
    int out_ch = 0, in_ch = 0, kh = 3, kw = 3, stride = 1, padding = 1;

    PresignOp presign;  // on this conv's input sign (unused when fed by bits)

    std::vector<double> tau;                // [O], THRESHOLD
    std::vector<std::uint64_t> flip_mask;   // ceil(O/64) words, audit record

    BnFold bn;                  // AFFINE
    std::vector<double> alpha;  // [O], AFFINE scaling factor (empty = 1)

    /// Packed weight rows, one per output channel, flat bit order: input
    /// channel fastest, then kernel column, then kernel row (post-flip).
    PackedBitTensor weights;

    // compute form, rebuilt from `weights`: per-tap word-aligned segments
    std::vector<std::uint64_t> seg_words;  // [O][kh*kw][cwords]
    int cwords = 0;
    void build_segments();

    int out_h(int h) const { return (h + 2 * padding - kh) / stride + 1; }
    int out_w(int w) const { return (w + 2 * padding - kw) / stride + 1; }
};

/// Composes BN (and optional per-channel alpha and follow-up presign affine)
/// into a THRESHOLD layer over the +/-1 weights. Channels whose composed
/// slope is zero become constant-output and fold to tau = -/+inf with a
/// warning.
PackedConvLayer fuse_bn_sign(const BnFold& bn, const Tensor& w_pm1,
                             const std::vector<double>* alpha = nullptr,
                             const PresignOp* post = nullptr, int stride = 1, int padding = 1,
                             std::vector<std::string>* warnings = nullptr);

/// Integer conv outputs (the +/-1 dot per output element) for one image.
void packed_conv_dots(const PackedConvLayer& layer, const PackedImage& in, int image,
                      std::vector<std::int32_t>& dots);

/// Full packed layer application over a batch. THRESHOLD emits bits; AFFINE
/// emits the real batch-norm output [N,O,OH,OW].
PackedImage packed_conv_threshold(const PackedConvLayer& layer, const PackedImage& in);
Tensor packed_conv_affine(const PackedConvLayer& layer, const PackedImage& in);

/// sign + pack of a real [N,C,H,W] tensor, applying the presign op.
PackedImage sign_pack(const PresignOp& presign, const Tensor& x);

struct RealConvParams {
    Tensor w;
    int stride = 1, padding = 1;
    BnFold bn;
};

struct PackedBlockMeta {
    int in_ch = 0, out_ch = 0, stride = 1;
    std::uint8_t residual = 0;  // 0 single, 1 double
    std::uint8_t has_down = 0;
};

/// Deployment model: packed binary conv layers plus the real-valued stem,
/// shortcuts and classifier, with the residual wiring of the training graph.
struct PackedModel {
    std::uint32_t version = 1;
    int num_classes = 0;
    int in_c = 0, in_h = 0, in_w = 0;
    std::uint8_t stem_kind = 0;        // 0: 3x3 s1 p1; 1: 7x7 s2 p3 + maxpool
    std::uint8_t activation_kind = 0;  // audit: 0 NONE, 1 HTANH_ID
    std::vector<double> input_mean, input_std;  // optional input normalization

    RealConvParams stem;
    std::vector<PackedBlockMeta> block_meta;
    std::vector<PackedConvLayer> layers;  // conv1, conv2 per block
    std::vector<RealConvParams> downs;    // in block order, where has_down
    Tensor fc_w, fc_b;

    /// Logits for a [N,C,H,W] batch. When apply_input_norm is set and the
    /// model carries input statistics, they are applied first.
    Tensor forward(const Tensor& images, bool apply_input_norm = true) const;
};

/// Folds a trained float model into deployment form. Blocks must use
/// activation NONE or I&H; anything else is rejected with the block named.
PackedModel export_packed(const Model& model, const DatasetStats* input_stats = nullptr,
                          std::vector<std::string>* warnings = nullptr);

std::vector<std::uint8_t> serialize_packed(const PackedModel& pm);
PackedModel deserialize_packed(const std::vector<std::uint8_t>& bytes);
void save_packed(const std::string& path, const PackedModel& pm);
PackedModel load_packed(const std::string& path);

/// Eval-mode batch norm over [N,C,H,W], same rounding as the training graph.
Tensor bn_eval_tensor(const BnFold& bn, const Tensor& x);

}  // namespace bnn
