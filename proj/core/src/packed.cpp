#include "bnn/packed.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "bnn/crc32.hpp"
#include "bnn/normalizer.hpp"

namespace bnn {

namespace {

// Non-owning TensorPtr over storage the callee will not mutate.
TensorPtr alias(const Tensor& t) {
    return TensorPtr(std::shared_ptr<Tensor>(), const_cast<Tensor*>(&t));
}

std::vector<double> channel_sdev(const std::vector<double>& var, double eps) {
    std::vector<double> s(var.size());
    for (std::size_t i = 0; i < var.size(); ++i) s[i] = std::sqrt(var[i] + eps);
    return s;
}

}  // namespace

void PackedConvLayer::build_segments() {
    const int taps = kh * kw;
    cwords = (in_ch + 63) / 64;
    seg_words.assign(static_cast<std::size_t>(out_ch) * taps * cwords, 0ull);
    for (int o = 0; o < out_ch; ++o) {
        const auto row = weights.row(o);
        for (int t = 0; t < taps; ++t) {
            std::uint64_t* seg = seg_words.data() +
                                 (static_cast<std::int64_t>(o) * taps + t) * cwords;
            for (int c = 0; c < in_ch; ++c) {
                const int flat = c + in_ch * t;
                if ((row[flat >> 6] >> (flat & 63)) & 1ull) seg[c >> 6] |= 1ull << (c & 63);
            }
        }
    }
}

namespace {

// Flat weight rows in the packing order: input channel fastest, then kernel
// column, then kernel row.
PackedBitTensor pack_weight_rows(const Tensor& w_pm1) {
    const int o = w_pm1.shape[0], c = w_pm1.shape[1], kh = w_pm1.shape[2], kw = w_pm1.shape[3];
    Tensor flat({o, c * kh * kw});
    for (int oc = 0; oc < o; ++oc)
        for (int y = 0; y < kh; ++y)
            for (int x = 0; x < kw; ++x)
                for (int ic = 0; ic < c; ++ic)
                    flat.data[static_cast<std::int64_t>(oc) * c * kh * kw + ic +
                              c * (x + kw * y)] = w_pm1.at(oc, ic, y, x);
    return pack_bits(flat);
}

void flip_row(PackedBitTensor& p, int row_index) {
    auto row = p.row(row_index);
    for (int i = 0; i < p.row_words; ++i) {
        row[i] = ~row[i];
        if (i == p.row_words - 1)
            row[i] &= tail_mask(p.valid - (p.row_words - 1) * 64);
    }
}

}  // namespace

PackedConvLayer fuse_bn_sign(const BnFold& bn, const Tensor& w_pm1,
                             const std::vector<double>* alpha, const PresignOp* post, int stride,
                             int padding, std::vector<std::string>* warnings) {
    PackedConvLayer layer;
    layer.kind = PackedConvLayer::THRESHOLD;
    layer.out_ch = w_pm1.shape[0];
    layer.in_ch = w_pm1.shape[1];
    layer.kh = w_pm1.shape[2];
    layer.kw = w_pm1.shape[3];
    layer.stride = stride;
    layer.padding = padding;
    layer.weights = pack_weight_rows(w_pm1);
    layer.tau.resize(static_cast<std::size_t>(layer.out_ch));
    layer.flip_mask.assign(static_cast<std::size_t>((layer.out_ch + 63) / 64), 0ull);

    const auto s = channel_sdev(bn.var, bn.eps);
    std::vector<double> post_s;
    if (post && post->kind == PresignOp::BN4) post_s = channel_sdev(post->var, post->eps);

    for (int o = 0; o < layer.out_ch; ++o) {
        // composed per-channel affine on the integer dot: value = A*dot + B
        double a = bn.gamma[o] / s[o];
        double b = bn.beta[o] - bn.gamma[o] * bn.mu[o] / s[o];
        if (alpha) a *= (*alpha)[o];
        if (post) {
            if (post->kind == PresignOp::BIAS) {
                b += post->bias[o];
            } else if (post->kind == PresignOp::BN4) {
                const double pa = post->gamma[o] / post_s[o];
                const double pb = post->beta[o] - post->gamma[o] * post->mu[o] / post_s[o];
                b = pa * b + pb;
                a = pa * a;
            }
        }
        if (a == 0.0) {
            // constant-output channel (gamma or alpha is zero)
            layer.tau[o] = b >= 0.0 ? -std::numeric_limits<double>::infinity()
                                    : std::numeric_limits<double>::infinity();
            if (warnings)
                warnings->push_back("channel " + std::to_string(o) +
                                    " has zero effective scale; folded to constant " +
                                    (b >= 0.0 ? "+1" : "-1"));
            continue;
        }
        if (a < 0.0) {
            layer.tau[o] = b / a;
            layer.flip_mask[o >> 6] |= 1ull << (o & 63);
            flip_row(layer.weights, o);
        } else {
            layer.tau[o] = -b / a;
        }
    }
    layer.build_segments();
    return layer;
}

void packed_conv_dots(const PackedConvLayer& layer, const PackedImage& in, int image,
                      std::vector<std::int32_t>& dots) {
    if (in.c != layer.in_ch || in.cwords != layer.cwords)
        throw std::invalid_argument("packed_conv: input has " + std::to_string(in.c) +
                                    " channels, layer expects " + std::to_string(layer.in_ch));
    const int oh = layer.out_h(in.h), ow = layer.out_w(in.w);
    const int taps = layer.kh * layer.kw;
    const int cw = layer.cwords;
    const std::int64_t n_total = static_cast<std::int64_t>(layer.in_ch) * taps;
    const std::uint64_t tmask = tail_mask(layer.in_ch - (cw - 1) * 64);
    dots.assign(static_cast<std::size_t>(layer.out_ch) * oh * ow, 0);

    std::vector<std::uint64_t> zeros(static_cast<std::size_t>(cw), 0ull);
    std::vector<const std::uint64_t*> tap_ptr(static_cast<std::size_t>(taps));

    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int ky = 0; ky < layer.kh; ++ky)
                for (int kx = 0; kx < layer.kw; ++kx) {
                    const int iy = y * layer.stride - layer.padding + ky;
                    const int ix = x * layer.stride - layer.padding + kx;
                    // -1 padding is a group of zero words
                    tap_ptr[static_cast<std::size_t>(ky * layer.kw + kx)] =
                        (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) ? zeros.data()
                                                                       : in.pixel(image, iy, ix);
                }
            const std::uint64_t* wseg = layer.seg_words.data();
            for (int o = 0; o < layer.out_ch; ++o) {
                std::int64_t pc = 0;
                for (int t = 0; t < taps; ++t) {
                    const std::uint64_t* px = tap_ptr[static_cast<std::size_t>(t)];
                    for (int j = 0; j < cw; ++j) {
                        std::uint64_t v = ~(wseg[j] ^ px[j]);
                        if (j == cw - 1) v &= tmask;
                        pc += std::popcount(v);
                    }
                    wseg += cw;
                }
                dots[(static_cast<std::int64_t>(o) * oh + y) * ow + x] =
                    static_cast<std::int32_t>(2 * pc - n_total);
            }
        }
    }
}

PackedImage packed_conv_threshold(const PackedConvLayer& layer, const PackedImage& in) {
    if (layer.kind != PackedConvLayer::THRESHOLD)
        throw std::logic_error("packed_conv_threshold: layer is not a threshold layer");
    PackedImage out;
    out.n = in.n;
    out.h = layer.out_h(in.h);
    out.w = layer.out_w(in.w);
    out.c = layer.out_ch;
    out.cwords = (out.c + 63) / 64;
    out.words.assign(static_cast<std::size_t>(out.n) * out.h * out.w * out.cwords, 0ull);
    std::vector<std::int32_t> dots;
    for (int i = 0; i < in.n; ++i) {
        packed_conv_dots(layer, in, i, dots);
        for (int o = 0; o < out.c; ++o)
            for (int y = 0; y < out.h; ++y)
                for (int x = 0; x < out.w; ++x)
                    if (dots[(static_cast<std::int64_t>(o) * out.h + y) * out.w + x] >=
                        layer.tau[o])
                        out.pixel(i, y, x)[o >> 6] |= 1ull << (o & 63);
    }
    return out;
}

Tensor packed_conv_affine(const PackedConvLayer& layer, const PackedImage& in) {
    if (layer.kind != PackedConvLayer::AFFINE)
        throw std::logic_error("packed_conv_affine: layer is not an affine layer");
    const int oh = layer.out_h(in.h), ow = layer.out_w(in.w);
    Tensor out({in.n, layer.out_ch, oh, ow});
    const auto s = channel_sdev(layer.bn.var, layer.bn.eps);
    std::vector<std::int32_t> dots;
    for (int i = 0; i < in.n; ++i) {
        packed_conv_dots(layer, in, i, dots);
        for (int o = 0; o < layer.out_ch; ++o) {
            const double a = layer.alpha.empty() ? 1.0 : layer.alpha[o];
            const double g = layer.bn.gamma[o], b = layer.bn.beta[o], mu = layer.bn.mu[o];
            const double sd = s[o];
            double* dst = out.data.data() +
                          ((static_cast<std::int64_t>(i) * layer.out_ch + o) * oh) * ow;
            const std::int32_t* src = dots.data() + static_cast<std::int64_t>(o) * oh * ow;
            for (int k = 0; k < oh * ow; ++k) dst[k] = bn_apply(g, b, mu, sd, a * src[k]);
        }
    }
    return out;
}

PackedImage sign_pack(const PresignOp& presign, const Tensor& x) {
    PackedImage out;
    out.n = x.shape[0];
    out.c = x.shape[1];
    out.h = x.shape[2];
    out.w = x.shape[3];
    out.cwords = (out.c + 63) / 64;
    out.words.assign(static_cast<std::size_t>(out.n) * out.h * out.w * out.cwords, 0ull);
    std::vector<double> s;
    if (presign.kind == PresignOp::BN4) s = channel_sdev(presign.var, presign.eps);
    for (int i = 0; i < out.n; ++i)
        for (int c = 0; c < out.c; ++c) {
            const double* src =
                x.data.data() + ((static_cast<std::int64_t>(i) * out.c + c) * out.h) * out.w;
            for (int y = 0; y < out.h; ++y)
                for (int xx = 0; xx < out.w; ++xx) {
                    double v = src[static_cast<std::int64_t>(y) * out.w + xx];
                    if (presign.kind == PresignOp::BIAS)
                        v += presign.bias[c];
                    else if (presign.kind == PresignOp::BN4)
                        v = bn_apply(presign.gamma[c], presign.beta[c], presign.mu[c], s[c], v);
                    if (v >= 0.0) out.pixel(i, y, xx)[c >> 6] |= 1ull << (c & 63);
                }
        }
    return out;
}

Tensor bn_eval_tensor(const BnFold& bn, const Tensor& x) {
    const int n = x.shape[0], c = x.shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
    Tensor y(x.shape);
    const auto s = channel_sdev(bn.var, bn.eps);
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k)
                y.data[base + k] =
                    bn_apply(bn.gamma[ch], bn.beta[ch], bn.mu[ch], s[ch], x.data[base + k]);
        }
    return y;
}

namespace {

BnFold fold_of(const BatchNormParams& bn) {
    BnFold f;
    f.gamma = bn.gamma->data;
    f.beta = bn.beta->data;
    f.mu = bn.running_mu;
    f.var = bn.running_var;
    f.eps = bn.eps;
    return f;
}

PresignOp presign_of(const BinaryConvUnit& unit) {
    PresignOp p;
    switch (unit.feature_norm.kind) {
        case NormalizerKind::NONE:
        case NormalizerKind::STD:  // eval-mode identity: a positive scale cannot move the sign
            p.kind = PresignOp::IDENTITY;
            break;
        case NormalizerKind::LB:
            p.kind = PresignOp::BIAS;
            p.bias = unit.feature_norm.lb_bias->data;
            break;
        case NormalizerKind::BN:
            p.kind = PresignOp::BN4;
            p.gamma = unit.feature_norm.bn->gamma->data;
            p.beta = unit.feature_norm.bn->beta->data;
            p.mu = unit.feature_norm.bn->running_mu;
            p.var = unit.feature_norm.bn->running_var;
            p.eps = unit.feature_norm.bn->eps;
            break;
        default:
            throw std::runtime_error("export: feature normalizer not foldable");
    }
    return p;
}

std::vector<double> alpha_of(const BinaryConvUnit& unit, const Tensor& wn, int block_index) {
    switch (unit.scaling.kind) {
        case ScalingKind::NONE:
            return {};
        case ScalingKind::AM: {
            ScalingFactorSpec am;
            am.kind = ScalingKind::AM;
            return scaling_factor(am, wn, nullptr, nullptr);
        }
        case ScalingKind::LF:
            return unit.scaling.value->data;
        case ScalingKind::LFI:
            if (!unit.scaling.initialized)
                throw std::runtime_error("export: block" + std::to_string(block_index) +
                                         " LFI scaling was never calibrated");
            return unit.scaling.value->data;
    }
    return {};
}

PackedConvLayer make_affine_layer(const BinaryConvUnit& unit, const Tensor& w_pm1,
                                  const std::vector<double>& alpha, const PresignOp& presign) {
    PackedConvLayer layer;
    layer.kind = PackedConvLayer::AFFINE;
    layer.out_ch = w_pm1.shape[0];
    layer.in_ch = w_pm1.shape[1];
    layer.kh = w_pm1.shape[2];
    layer.kw = w_pm1.shape[3];
    layer.stride = unit.stride;
    layer.padding = unit.padding;
    layer.presign = presign;
    layer.bn = fold_of(*unit.bn);
    layer.alpha = alpha;
    layer.weights = pack_weight_rows(w_pm1);
    layer.flip_mask.assign(static_cast<std::size_t>((layer.out_ch + 63) / 64), 0ull);
    layer.build_segments();
    return layer;
}

}  // namespace

PackedModel export_packed(const Model& model, const DatasetStats* input_stats,
                          std::vector<std::string>* warnings) {
    PackedModel pm;
    pm.num_classes = model.cfg.num_classes;
    pm.in_c = model.cfg.input_shape[1];
    pm.in_h = model.cfg.input_shape[2];
    pm.in_w = model.cfg.input_shape[3];
    pm.stem_kind = model.stem_maxpool ? 1 : 0;

    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const auto v1 = model.blocks[i].act1.variant;
        const auto v2 = model.blocks[i].act2.variant;
        for (auto v : {v1, v2})
            if (v != ActivationVariant::NONE && v != ActivationVariant::HTANH_ID)
                throw std::runtime_error("export: block" + std::to_string(i) + " activation " +
                                         ActivationSpec::variant_name(v) +
                                         " is not foldable; use NONE or I&H");
    }
    pm.activation_kind =
        model.cfg.block.activation == ActivationVariant::HTANH_ID ? 1 : 0;

    if (input_stats) {
        pm.input_mean = input_stats->mean;
        pm.input_std = input_stats->stddev;
    }

    pm.stem.w = *model.stem_w;
    pm.stem.stride = model.stem_stride;
    pm.stem.padding = model.stem_padding;
    pm.stem.bn = fold_of(*model.stem_bn);

    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const auto& block = model.blocks[i];
        PackedBlockMeta meta;
        meta.in_ch = block.conv1.in_ch;
        meta.out_ch = block.conv1.out_ch;
        meta.stride = block.conv1.stride;
        meta.residual = block.residual == ResidualMode::DOUBLE ? 1 : 0;
        meta.has_down = block.has_down ? 1 : 0;
        pm.block_meta.push_back(meta);

        auto wn1 = normalize_weight(nullptr, block.conv1.weight_norm, block.conv1.weight);
        auto wn2 = normalize_weight(nullptr, block.conv2.weight_norm, block.conv2.weight);
        const Tensor w1 = sign_forward(*wn1);
        const Tensor w2 = sign_forward(*wn2);
        const auto a1 = alpha_of(block.conv1, *wn1, static_cast<int>(i));
        const auto a2 = alpha_of(block.conv2, *wn2, static_cast<int>(i));
        const PresignOp p1 = presign_of(block.conv1);
        const PresignOp p2 = presign_of(block.conv2);

        if (block.residual == ResidualMode::SINGLE) {
            // conv1 -> bn -> (conv2's feature norm) -> sign folds to a threshold
            PackedConvLayer l1 =
                fuse_bn_sign(fold_of(*block.conv1.bn), w1, a1.empty() ? nullptr : &a1, &p2,
                             block.conv1.stride, block.conv1.padding, warnings);
            l1.presign = p1;
            pm.layers.push_back(std::move(l1));
            pm.layers.push_back(make_affine_layer(block.conv2, w2, a2, PresignOp{}));
        } else {
            pm.layers.push_back(make_affine_layer(block.conv1, w1, a1, p1));
            pm.layers.push_back(make_affine_layer(block.conv2, w2, a2, p2));
        }

        if (block.has_down) {
            RealConvParams down;
            down.w = *block.down_w;
            down.stride = block.conv1.stride;
            down.padding = 0;
            down.bn = fold_of(*block.down_bn);
            pm.downs.push_back(std::move(down));
        }
    }

    pm.fc_w = *model.fc_w;
    pm.fc_b = *model.fc_b;
    return pm;
}

Tensor PackedModel::forward(const Tensor& images, bool apply_input_norm) const {
    Tensor x = images;
    if (apply_input_norm && !input_mean.empty()) {
        const int n = x.shape[0], c = x.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                double* base = x.data.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
                for (std::int64_t k = 0; k < hw; ++k)
                    base[k] = (base[k] - input_mean[ch]) / input_std[ch];
            }
    }

    auto h = conv2d(nullptr, alias(x), alias(stem.w), stem.stride, stem.padding, 0.0);
    Tensor hr = bn_eval_tensor(stem.bn, *h);
    if (stem_kind == 1) hr = *max_pool2d(nullptr, alias(hr), 3, 2, 1);

    std::size_t down_index = 0;
    for (std::size_t i = 0; i < block_meta.size(); ++i) {
        const auto& meta = block_meta[i];
        const auto& l1 = layers[2 * i];
        const auto& l2 = layers[2 * i + 1];
        Tensor hin = hr;

        Tensor sc;
        if (meta.has_down) {
            const auto& down = downs[down_index++];
            auto p = conv2d(nullptr, alias(hin), alias(down.w), down.stride, down.padding, 0.0);
            sc = bn_eval_tensor(down.bn, *p);
        } else {
            sc = hin;
        }

        PackedImage bits1 = sign_pack(l1.presign, hin);
        if (l1.kind == PackedConvLayer::THRESHOLD) {
            PackedImage bits2 = packed_conv_threshold(l1, bits1);
            Tensor y2 = packed_conv_affine(l2, bits2);
            hr = *add(nullptr, alias(y2), alias(sc));
        } else {
            Tensor y1 = packed_conv_affine(l1, bits1);
            Tensor h1 = *add(nullptr, alias(y1), alias(sc));
            PackedImage bits2 = sign_pack(l2.presign, h1);
            Tensor y2 = packed_conv_affine(l2, bits2);
            hr = *add(nullptr, alias(y2), alias(h1));
        }
    }

    auto feat = global_avg_pool(nullptr, alias(hr));
    auto logits = linear(nullptr, feat, alias(fc_w), alias(fc_b));
    return *logits;
}

// ---- serialization ---------------------------------------------------------

namespace {

struct Writer {
    std::vector<std::uint8_t> bytes;
    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f64_array(const std::vector<double>& v) {
        for (double x : v) f64(x);
    }
    void u64_array(const std::vector<std::uint64_t>& v) {
        for (std::uint64_t x : v) u64(x);
    }
};

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    explicit Reader(const std::vector<std::uint8_t>& b) : bytes(b) {}
    void need(std::size_t n) const {
        if (pos + n > bytes.size())
            throw std::runtime_error("packed model: truncated at byte offset " +
                                     std::to_string(pos));
    }
    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::vector<double> f64_array(std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }
    std::vector<std::uint64_t> u64_array(std::size_t n) {
        std::vector<std::uint64_t> v(n);
        for (auto& x : v) x = u64();
        return v;
    }
};

void write_real_conv(Writer& w, const RealConvParams& rc) {
    w.u32(static_cast<std::uint32_t>(rc.w.shape[0]));
    w.u32(static_cast<std::uint32_t>(rc.w.shape[1]));
    w.u32(static_cast<std::uint32_t>(rc.w.shape[2]));
    w.u32(static_cast<std::uint32_t>(rc.w.shape[3]));
    w.u32(static_cast<std::uint32_t>(rc.stride));
    w.u32(static_cast<std::uint32_t>(rc.padding));
    w.f64_array(rc.w.data);
    w.f64_array(rc.bn.gamma);
    w.f64_array(rc.bn.beta);
    w.f64_array(rc.bn.mu);
    w.f64_array(rc.bn.var);
    w.f64(rc.bn.eps);
}

RealConvParams read_real_conv(Reader& r) {
    RealConvParams rc;
    const int o = static_cast<int>(r.u32()), c = static_cast<int>(r.u32());
    const int kh = static_cast<int>(r.u32()), kw = static_cast<int>(r.u32());
    rc.stride = static_cast<int>(r.u32());
    rc.padding = static_cast<int>(r.u32());
    rc.w = Tensor({o, c, kh, kw}, r.f64_array(static_cast<std::size_t>(o) * c * kh * kw));
    rc.bn.gamma = r.f64_array(static_cast<std::size_t>(o));
    rc.bn.beta = r.f64_array(static_cast<std::size_t>(o));
    rc.bn.mu = r.f64_array(static_cast<std::size_t>(o));
    rc.bn.var = r.f64_array(static_cast<std::size_t>(o));
    rc.bn.eps = r.f64();
    return rc;
}

}  // namespace

std::vector<std::uint8_t> serialize_packed(const PackedModel& pm) {
    Writer w;
    w.bytes.reserve(1 << 16);
    w.u8('B');
    w.u8('N');
    w.u8('N');
    w.u8('F');
    w.u32(pm.version);
    w.u32(static_cast<std::uint32_t>(pm.layers.size()));
    w.u32(static_cast<std::uint32_t>(pm.num_classes));
    w.u32(static_cast<std::uint32_t>(pm.in_c));
    w.u32(static_cast<std::uint32_t>(pm.in_h));
    w.u32(static_cast<std::uint32_t>(pm.in_w));
    w.u8(pm.stem_kind);
    w.u8(pm.activation_kind);
    w.u16(0);
    w.u32(static_cast<std::uint32_t>(pm.block_meta.size()));
    for (const auto& m : pm.block_meta) {
        w.u32(static_cast<std::uint32_t>(m.in_ch));
        w.u32(static_cast<std::uint32_t>(m.out_ch));
        w.u32(static_cast<std::uint32_t>(m.stride));
        w.u8(m.residual);
        w.u8(m.has_down);
        w.u16(0);
    }
    w.u8(pm.input_mean.empty() ? 0 : 1);
    if (!pm.input_mean.empty()) {
        w.f64_array(pm.input_mean);
        w.f64_array(pm.input_std);
    }
    for (const auto& l : pm.layers) {
        w.u8(l.kind);
        w.u8(l.presign.kind);
        w.u16(0);
        w.u32(static_cast<std::uint32_t>(l.out_ch));
        w.u32(static_cast<std::uint32_t>(l.in_ch));
        w.u32(static_cast<std::uint32_t>(l.kh));
        w.u32(static_cast<std::uint32_t>(l.kw));
        w.u32(static_cast<std::uint32_t>(l.stride));
        w.u32(static_cast<std::uint32_t>(l.padding));
        if (l.presign.kind == PresignOp::BIAS) {
            w.f64_array(l.presign.bias);
        } else if (l.presign.kind == PresignOp::BN4) {
            w.f64_array(l.presign.gamma);
            w.f64_array(l.presign.beta);
            w.f64_array(l.presign.mu);
            w.f64_array(l.presign.var);
            w.f64(l.presign.eps);
        }
        if (l.kind == PackedConvLayer::THRESHOLD) {
            w.f64_array(l.tau);
        } else {
            w.f64_array(l.bn.gamma);
            w.f64_array(l.bn.beta);
            w.f64_array(l.bn.mu);
            w.f64_array(l.bn.var);
            w.f64(l.bn.eps);
            w.u8(l.alpha.empty() ? 0 : 1);
            if (!l.alpha.empty()) w.f64_array(l.alpha);
        }
        w.u64_array(l.flip_mask);
        for (int o = 0; o < l.out_ch; ++o) w.u32(static_cast<std::uint32_t>(l.weights.valid));
        w.u64_array(l.weights.words);
    }
    write_real_conv(w, pm.stem);
    w.u32(static_cast<std::uint32_t>(pm.downs.size()));
    for (const auto& d : pm.downs) write_real_conv(w, d);
    w.u32(static_cast<std::uint32_t>(pm.fc_w.shape[0]));
    w.u32(static_cast<std::uint32_t>(pm.fc_w.shape[1]));
    w.f64_array(pm.fc_w.data);
    w.f64_array(pm.fc_b.data);
    w.u32(crc32(w.bytes.data(), w.bytes.size()));
    return w.bytes;
}

PackedModel deserialize_packed(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || bytes[0] != 'B' || bytes[1] != 'N' || bytes[2] != 'N' ||
        bytes[3] != 'F')
        throw std::runtime_error("packed model: bad magic (not a BNNF file)");
    const std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                     (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                                     (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                                     (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
    if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
        throw std::runtime_error("packed model: CRC-32 mismatch (corrupt file)");

    Reader r(bytes);
    r.pos = 4;
    PackedModel pm;
    pm.version = r.u32();
    if (pm.version != 1)
        throw std::runtime_error("packed model: unsupported version " +
                                 std::to_string(pm.version) + " (expected 1)");
    const std::uint32_t layer_count = r.u32();
    pm.num_classes = static_cast<int>(r.u32());
    pm.in_c = static_cast<int>(r.u32());
    pm.in_h = static_cast<int>(r.u32());
    pm.in_w = static_cast<int>(r.u32());
    pm.stem_kind = r.u8();
    pm.activation_kind = r.u8();
    r.u16();
    const std::uint32_t block_count = r.u32();
    for (std::uint32_t i = 0; i < block_count; ++i) {
        PackedBlockMeta m;
        m.in_ch = static_cast<int>(r.u32());
        m.out_ch = static_cast<int>(r.u32());
        m.stride = static_cast<int>(r.u32());
        m.residual = r.u8();
        m.has_down = r.u8();
        r.u16();
        pm.block_meta.push_back(m);
    }
    if (r.u8()) {
        pm.input_mean = r.f64_array(static_cast<std::size_t>(pm.in_c));
        pm.input_std = r.f64_array(static_cast<std::size_t>(pm.in_c));
    }
    for (std::uint32_t li = 0; li < layer_count; ++li) {
        PackedConvLayer l;
        l.kind = r.u8();
        l.presign.kind = r.u8();
        r.u16();
        l.out_ch = static_cast<int>(r.u32());
        l.in_ch = static_cast<int>(r.u32());
        l.kh = static_cast<int>(r.u32());
        l.kw = static_cast<int>(r.u32());
        l.stride = static_cast<int>(r.u32());
        l.padding = static_cast<int>(r.u32());
        if (l.presign.kind == PresignOp::BIAS) {
            l.presign.bias = r.f64_array(static_cast<std::size_t>(l.in_ch));
        } else if (l.presign.kind == PresignOp::BN4) {
            l.presign.gamma = r.f64_array(static_cast<std::size_t>(l.in_ch));
            l.presign.beta = r.f64_array(static_cast<std::size_t>(l.in_ch));
            l.presign.mu = r.f64_array(static_cast<std::size_t>(l.in_ch));
            l.presign.var = r.f64_array(static_cast<std::size_t>(l.in_ch));
            l.presign.eps = r.f64();
        }
        if (l.kind == PackedConvLayer::THRESHOLD) {
            l.tau = r.f64_array(static_cast<std::size_t>(l.out_ch));
        } else if (l.kind == PackedConvLayer::AFFINE) {
            l.bn.gamma = r.f64_array(static_cast<std::size_t>(l.out_ch));
            l.bn.beta = r.f64_array(static_cast<std::size_t>(l.out_ch));
            l.bn.mu = r.f64_array(static_cast<std::size_t>(l.out_ch));
            l.bn.var = r.f64_array(static_cast<std::size_t>(l.out_ch));
            l.bn.eps = r.f64();
            if (r.u8()) l.alpha = r.f64_array(static_cast<std::size_t>(l.out_ch));
        } else {
            throw std::runtime_error("packed model: unknown layer kind " +
                                     std::to_string(l.kind));
        }
        l.flip_mask = r.u64_array(static_cast<std::size_t>((l.out_ch + 63) / 64));
        const int valid = l.in_ch * l.kh * l.kw;
        for (int o = 0; o < l.out_ch; ++o) {
            const int row_valid = static_cast<int>(r.u32());
            if (row_valid != valid)
                throw std::runtime_error("packed model: row validity " +
                                         std::to_string(row_valid) + " does not match " +
                                         std::to_string(valid));
        }
        l.weights.shape = {l.out_ch, valid};
        l.weights.rows = l.out_ch;
        l.weights.valid = valid;
        l.weights.row_words = (valid + 63) / 64;
        l.weights.words =
            r.u64_array(static_cast<std::size_t>(l.out_ch) * l.weights.row_words);
        l.build_segments();
        pm.layers.push_back(std::move(l));
    }
    pm.stem = read_real_conv(r);
    const std::uint32_t down_count = r.u32();
    for (std::uint32_t i = 0; i < down_count; ++i) pm.downs.push_back(read_real_conv(r));
    const int k = static_cast<int>(r.u32()), f = static_cast<int>(r.u32());
    pm.fc_w = Tensor({k, f}, r.f64_array(static_cast<std::size_t>(k) * f));
    pm.fc_b = Tensor({k}, r.f64_array(static_cast<std::size_t>(k)));
    return pm;
}

void save_packed(const std::string& path, const PackedModel& pm) {
    const auto bytes = serialize_packed(pm);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

PackedModel load_packed(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize_packed(bytes);
}

}  // namespace bnn
