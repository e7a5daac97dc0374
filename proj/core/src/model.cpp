#include "bnn/model.hpp"

#include <cmath>
#include <random>

namespace bnn {

Arch parse_arch(const std::string& name) {
    if (name == "RESNET18") return Arch::RESNET18;
    if (name == "RESNET20") return Arch::RESNET20;
    if (name == "RESNET_TINY") return Arch::RESNET_TINY;
    throw std::invalid_argument("model: unknown architecture '" + name + "'");
}

std::string arch_name(Arch arch) {
    switch (arch) {
        case Arch::RESNET18: return "RESNET18";
        case Arch::RESNET20: return "RESNET20";
        case Arch::RESNET_TINY: return "RESNET_TINY";
    }
    return "?";
}

namespace {

struct StagePlan {
    std::vector<int> channels;  // per stage
    int blocks_per_stage = 0;
};

StagePlan plan_for(const ModelConfig& cfg) {
    StagePlan plan;
    double width = cfg.width_multiplier;
    std::vector<int> base;
    switch (cfg.arch) {
        case Arch::RESNET18:
            base = {64, 128, 256, 512};
            plan.blocks_per_stage = 2;
            break;
        case Arch::RESNET20:
            base = {16, 32, 64};
            plan.blocks_per_stage = 3;
            break;
        case Arch::RESNET_TINY:
            // desk-scale alias: RESNET20 topology at a quarter width; not a
            // published architecture
            base = {16, 32, 64};
            plan.blocks_per_stage = 3;
            width *= 0.25;
            break;
    }
    for (int c : base) {
        const int scaled = static_cast<int>(std::lround(width * c));
        if (scaled < 1)
            throw std::invalid_argument("model: width multiplier " +
                                        std::to_string(cfg.width_multiplier) +
                                        " produces zero channels");
        plan.channels.push_back(scaled);
    }
    return plan;
}

TensorPtr kaiming_conv(std::mt19937_64& rng, int o, int i, int kh, int kw) {
    auto w = make_tensor({o, i, kh, kw});
    const double stddev = std::sqrt(2.0 / (static_cast<double>(i) * kh * kw));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : w->data) v = dist(rng);
    return w;
}

BinaryConvUnit make_unit(const BlockConfig& bc, std::mt19937_64& rng, int in_ch, int out_ch,
                         int stride) {
    BinaryConvUnit u;
    u.in_ch = in_ch;
    u.out_ch = out_ch;
    u.stride = stride;
    u.feature_bin = bc.feature_binarizer;
    u.weight_bin = bc.weight_binarizer;
    if (u.feature_bin.kind == BinarizerKind::LC_A) u.feature_bin.learnable_clip = make_tensor({1}, 1.0);
    if (u.weight_bin.kind == BinarizerKind::LC_A) u.weight_bin.learnable_clip = make_tensor({1}, 1.0);

    u.feature_norm.kind = bc.feature_norm;
    if (bc.feature_norm == NormalizerKind::LB) u.feature_norm.lb_bias = make_tensor({in_ch}, 0.0);
    if (bc.feature_norm == NormalizerKind::BN) u.feature_norm.bn = BatchNormParams::create(in_ch);

    u.weight_norm.kind = bc.weight_norm;
    u.weight_norm.b = bc.mstdb_b;
    u.weight_norm.mstd_center = bc.mstd_center;

    u.weight = kaiming_conv(rng, out_ch, in_ch, 3, 3);
    u.scaling.kind = bc.scaling;
    if (bc.scaling == ScalingKind::LF || bc.scaling == ScalingKind::LFI)
        u.scaling.value = make_tensor({out_ch}, 1.0);
    u.bn = BatchNormParams::create(out_ch);
    return u;
}

}  // namespace

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.input_shape.size() != 4)
        throw std::invalid_argument("model: input shape must be [N,C,H,W]");
    const StagePlan plan = plan_for(cfg);
    std::mt19937_64 rng(seed);

    Model model;
    model.cfg = cfg;

    const int in_ch = cfg.input_shape[1];
    if (cfg.imagenet_stem) {
        if (cfg.arch != Arch::RESNET18)
            throw std::invalid_argument("model: the ImageNet stem is only wired for RESNET18");
        model.stem_w = kaiming_conv(rng, plan.channels[0], in_ch, 7, 7);
        model.stem_stride = 2;
        model.stem_padding = 3;
        model.stem_maxpool = true;
    } else {
        model.stem_w = kaiming_conv(rng, plan.channels[0], in_ch, 3, 3);
        model.stem_stride = 1;
        model.stem_padding = 1;
        model.stem_maxpool = false;
    }
    model.stem_bn = BatchNormParams::create(plan.channels[0]);

    int prev_ch = plan.channels[0];
    for (std::size_t stage = 0; stage < plan.channels.size(); ++stage) {
        const int out_ch = plan.channels[stage];
        for (int b = 0; b < plan.blocks_per_stage; ++b) {
            const int stride = (stage > 0 && b == 0) ? 2 : 1;
            BuildingBlock block;
            block.residual = cfg.block.residual;
            block.conv1 = make_unit(cfg.block, rng, prev_ch, out_ch, stride);
            block.conv2 = make_unit(cfg.block, rng, out_ch, out_ch, 1);
            block.act1 = make_activation(cfg.block.activation, out_ch);
            block.act2 = make_activation(cfg.block.activation, out_ch);
            if (stride != 1 || prev_ch != out_ch) {
                block.has_down = true;
                block.down_w = kaiming_conv(rng, out_ch, prev_ch, 1, 1);
                block.down_bn = BatchNormParams::create(out_ch);
            }
            model.blocks.push_back(std::move(block));
            prev_ch = out_ch;
        }
    }

    const int feat = plan.channels.back();
    model.fc_w = make_tensor({cfg.num_classes, feat});
    const double stddev = std::sqrt(2.0 / static_cast<double>(feat));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : model.fc_w->data) v = dist(rng);
    model.fc_b = make_tensor({cfg.num_classes}, 0.0);
    return model;
}

TensorPtr Model::forward(Tape* tape, const TensorPtr& x,
                         const std::optional<TrainingProgress>& progress, int stage, bool train) {
    auto h = conv2d(tape, x, stem_w, stem_stride, stem_padding, 0.0);
    h = batchnorm2d(tape, h, *stem_bn, train);
    if (stem_maxpool) h = max_pool2d(tape, h, 3, 2, 1);
    for (auto& block : blocks) h = block.forward(tape, h, progress, stage, train);
    auto feat = global_avg_pool(tape, h);
    return linear(tape, feat, fc_w, fc_b);
}

namespace {

void push_bn(std::vector<NamedParam>& out, const std::string& prefix,
             const std::shared_ptr<BatchNormParams>& bn) {
    out.push_back({prefix + ".gamma", bn->gamma});
    out.push_back({prefix + ".beta", bn->beta});
}

void push_unit(std::vector<NamedParam>& out, const std::string& prefix, const BinaryConvUnit& u) {
    out.push_back({prefix + ".w", u.weight});
    if (u.feature_bin.learnable_clip) out.push_back({prefix + ".feat_clip", u.feature_bin.learnable_clip});
    if (u.weight_bin.learnable_clip) out.push_back({prefix + ".weight_clip", u.weight_bin.learnable_clip});
    if (u.feature_norm.lb_bias) out.push_back({prefix + ".fn_lb_bias", u.feature_norm.lb_bias});
    if (u.feature_norm.bn) push_bn(out, prefix + ".fn_bn", u.feature_norm.bn);
    if (u.scaling.value) out.push_back({prefix + ".alpha", u.scaling.value});
    push_bn(out, prefix + ".bn", u.bn);
}

void push_act(std::vector<NamedParam>& out, const std::string& prefix, const ActivationSpec& a) {
    if (a.alpha) out.push_back({prefix + ".alpha", a.alpha});
    if (a.beta) out.push_back({prefix + ".beta", a.beta});
    if (a.gamma) out.push_back({prefix + ".gamma", a.gamma});
    if (a.zeta) out.push_back({prefix + ".zeta", a.zeta});
}

}  // namespace

std::vector<NamedParam> Model::parameters() const {
    std::vector<NamedParam> out;
    out.push_back({"stem.w", stem_w});
    push_bn(out, "stem.bn", stem_bn);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        const std::string prefix = "block" + std::to_string(i);
        push_unit(out, prefix + ".conv1", b.conv1);
        push_unit(out, prefix + ".conv2", b.conv2);
        push_act(out, prefix + ".act1", b.act1);
        push_act(out, prefix + ".act2", b.act2);
        if (b.has_down) {
            out.push_back({prefix + ".down.w", b.down_w});
            push_bn(out, prefix + ".down.bn", b.down_bn);
        }
    }
    out.push_back({"fc.w", fc_w});
    out.push_back({"fc.b", fc_b});
    return out;
}

ParamSummary Model::param_summary() const {
    ParamSummary s;
    auto add = [&s](const std::string& layer, std::int64_t real, std::int64_t bin) {
        s.rows.push_back({layer, real, bin});
        s.real_total += real;
        s.binarizable_total += bin;
    };
    add("stem", stem_w->size() + stem_bn->gamma->size() + stem_bn->beta->size(), 0);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        std::int64_t real = 0, bin = 0;
        for (const BinaryConvUnit* u : {&b.conv1, &b.conv2}) {
            bin += u->weight->size();
            real += u->bn->gamma->size() + u->bn->beta->size();
            if (u->feature_bin.learnable_clip) real += 1;
            if (u->weight_bin.learnable_clip) real += 1;
            if (u->feature_norm.lb_bias) real += u->feature_norm.lb_bias->size();
            if (u->feature_norm.bn)
                real += u->feature_norm.bn->gamma->size() + u->feature_norm.bn->beta->size();
            if (u->scaling.value) real += u->scaling.value->size();
        }
        for (const ActivationSpec* a : {&b.act1, &b.act2})
            for (const TensorPtr& t : {a->alpha, a->beta, a->gamma, a->zeta})
                if (t) real += t->size();
        if (b.has_down)
            real += b.down_w->size() + b.down_bn->gamma->size() + b.down_bn->beta->size();
        add("block" + std::to_string(i), real, bin);
    }
    add("classifier", fc_w->size() + fc_b->size(), 0);
    return s;
}

std::string ParamSummary::to_text() const {
    std::string out = "layer                real     binarizable\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-18s %10lld %12lld\n", r.layer.c_str(),
                      static_cast<long long>(r.real_params),
                      static_cast<long long>(r.binarizable_params));
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%-18s %10lld %12lld\n", "total",
                  static_cast<long long>(real_total), static_cast<long long>(binarizable_total));
    out += buf;
    return out;
}

}  // namespace bnn
