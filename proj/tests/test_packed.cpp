#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bnn/binarizer.hpp"
#include "bnn/normalizer.hpp"
#include "bnn/packed.hpp"
#include "test_util.hpp"

using namespace bnn;

namespace {

BnFold make_fold(std::vector<double> gamma, std::vector<double> beta, std::vector<double> mu,
                 std::vector<double> var, double eps = 1e-5) {
    return BnFold{std::move(gamma), std::move(beta), std::move(mu), std::move(var), eps};
}

// float reference: sign(BN(conv(x, w, pad -1)))
Tensor float_ref_bits(const Tensor& x, const Tensor& w, const BnFold& bn,
                      const std::vector<double>* alpha, int stride, int padding) {
    Tensor y = testutil::naive_conv2d(x, w, stride, padding, -1.0);
    if (alpha) {
        const int o = y.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(y.shape[2]) * y.shape[3];
        for (int n = 0; n < y.shape[0]; ++n)
            for (int c = 0; c < o; ++c) {
                double* base = y.data.data() + (static_cast<std::int64_t>(n) * o + c) * hw;
                for (std::int64_t k = 0; k < hw; ++k) base[k] *= (*alpha)[c];
            }
    }
    return sign_forward(bn_eval_tensor(bn, y));
}

PackedImage to_packed_image(const Tensor& pm1) {
    PresignOp ident;
    return sign_pack(ident, pm1);
}

Tensor bits_to_tensor(const PackedImage& img) {
    Tensor out({img.n, img.c, img.h, img.w});
    for (int i = 0; i < img.n; ++i)
        for (int c = 0; c < img.c; ++c)
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x)
                    out.at(i, c, y, x) =
                        (img.pixel(i, y, x)[c >> 6] >> (c & 63)) & 1ull ? 1.0 : -1.0;
    return out;
}

}  // namespace

TEST_CASE("fuse_bn_sign spot values") {
    auto w = make_tensor({1, 1, 1, 1}, std::vector<double>{1.0});

    SUBCASE("identity batch norm folds to tau = 0 with no flip") {
        auto layer = fuse_bn_sign(make_fold({1}, {0}, {0}, {1}), *w);
        CHECK(layer.tau[0] == doctest::Approx(0.0));
        CHECK(layer.flip_mask[0] == 0u);
    }

    SUBCASE("worked threshold") {
        auto layer = fuse_bn_sign(make_fold({2}, {0.5}, {1}, {0.99999}), *w);
        CHECK(layer.tau[0] == doctest::Approx(0.75).epsilon(1e-9));
        CHECK(layer.flip_mask[0] == 0u);
    }

    SUBCASE("negative gamma flips the channel") {
        auto layer = fuse_bn_sign(make_fold({-1}, {0}, {0}, {1 - 1e-5}), *w);
        CHECK(layer.tau[0] == doctest::Approx(0.0));
        CHECK(layer.flip_mask[0] == 1u);
        // the stored weight bit is inverted: +1 became -1
        CHECK((layer.weights.words[0] & 1ull) == 0u);
    }

    SUBCASE("zero gamma folds to a constant channel and warns") {
        std::vector<std::string> warnings;
        auto pos = fuse_bn_sign(make_fold({0}, {0.5}, {0}, {1}), *w, nullptr, nullptr, 1, 0,
                                &warnings);
        CHECK(pos.tau[0] == -std::numeric_limits<double>::infinity());
        auto neg = fuse_bn_sign(make_fold({0}, {-0.5}, {0}, {1}), *w, nullptr, nullptr, 1, 0,
                                &warnings);
        CHECK(neg.tau[0] == std::numeric_limits<double>::infinity());
        CHECK(warnings.size() == 2);
    }
}

TEST_CASE("identity 1x1 threshold layer passes bits through") {
    std::mt19937_64 rng(2);
    auto x = testutil::random_pm1({1, 1, 6, 6}, rng);
    auto w = make_tensor({1, 1, 1, 1}, std::vector<double>{1.0});
    auto layer = fuse_bn_sign(make_fold({1}, {0}, {0}, {1}), *w);
    layer.padding = 0;
    const PackedImage in = to_packed_image(*x);
    const PackedImage out = packed_conv_threshold(layer, in);
    CHECK(bits_to_tensor(out).data == x->data);
}

TEST_CASE("boundary: with tau = n, an all-agree input still fires (>= is inclusive)") {
    auto x = make_tensor({1, 1, 3, 3}, 1.0);
    auto w = make_tensor({1, 1, 3, 3}, 1.0);
    // gamma=1, beta=0, mu=9 -> tau = 9 exactly; dot = 9 must give +1
    auto layer = fuse_bn_sign(make_fold({1}, {0}, {9}, {1 - 1e-5}), *w);
    layer.padding = 0;
    const PackedImage out = packed_conv_threshold(layer, to_packed_image(*x));
    CHECK(bits_to_tensor(out).data[0] == 1.0);
}

TEST_CASE("fused threshold path agrees with the float reference") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> gdist(-2, 2), bdist(-1, 1), mdist(-3, 3),
        vdist(0.01, 4.0);
    std::int64_t checked = 0, ties = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const int c = 1 + static_cast<int>(rng() % 70);
        const int o = 1 + static_cast<int>(rng() % 8);
        const int stride = 1 + static_cast<int>(rng() % 2);
        const int padding = static_cast<int>(rng() % 2);
        auto x = testutil::random_pm1({2, c, 6, 6}, rng);
        auto w = testutil::random_pm1({o, c, 3, 3}, rng);
        BnFold bn;
        for (int i = 0; i < o; ++i) {
            double g = gdist(rng);
            if (std::abs(g) < 1e-3) g = 1e-3;  // keep |gamma| > 0 per the fold precondition
            bn.gamma.push_back(g);
            bn.beta.push_back(bdist(rng));
            bn.mu.push_back(mdist(rng));
            bn.var.push_back(vdist(rng));
        }
        auto layer = fuse_bn_sign(bn, *w, nullptr, nullptr, stride, padding);
        const PackedImage out = packed_conv_threshold(layer, to_packed_image(*x));
        const Tensor got = bits_to_tensor(out);

        const Tensor conv = testutil::naive_conv2d(*x, *w, stride, padding, -1.0);
        const Tensor bnout = bn_eval_tensor(bn, conv);
        for (std::int64_t i = 0; i < bnout.size(); ++i) {
            if (std::abs(bnout.data[i]) <= 1e-6) {
                ++ties;
                continue;
            }
            ++checked;
            CHECK(got.data[i] == (bnout.data[i] >= 0 ? 1.0 : -1.0));
        }
    }
    CHECK(checked > 10000);
    MESSAGE("tie-band elements skipped: ", ties);
}

TEST_CASE("affine layer reproduces conv + scaling + batch norm exactly") {
    std::mt19937_64 rng(5);
    const int c = 5, o = 3;
    auto x = testutil::random_pm1({2, c, 5, 5}, rng);
    auto w = testutil::random_pm1({o, c, 3, 3}, rng);

    PackedConvLayer layer;
    layer.kind = PackedConvLayer::AFFINE;
    layer.out_ch = o;
    layer.in_ch = c;
    layer.stride = 1;
    layer.padding = 1;
    layer.bn = make_fold({1.5, -0.5, 2.0}, {0.1, 0.2, -0.3}, {1, 0, -1}, {1, 2, 0.5});
    layer.alpha = {0.5, 1.0, 2.0};
    {
        Tensor flat({o, c * 9});
        for (int oc = 0; oc < o; ++oc)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    for (int ic = 0; ic < c; ++ic)
                        flat.data[oc * c * 9 + ic + c * (kx + 3 * ky)] = w->at(oc, ic, ky, kx);
        layer.weights = pack_bits(flat);
    }
    layer.flip_mask.assign(1, 0ull);
    layer.build_segments();

    const Tensor got = packed_conv_affine(layer, to_packed_image(*x));
    Tensor conv = testutil::naive_conv2d(*x, *w, 1, 1, -1.0);
    for (int n = 0; n < 2; ++n)
        for (int oc = 0; oc < o; ++oc)
            for (int i = 0; i < 25; ++i) {
                const std::int64_t idx = (static_cast<std::int64_t>(n) * o + oc) * 25 + i;
                conv.data[idx] *= layer.alpha[oc];
            }
    const Tensor want = bn_eval_tensor(layer.bn, conv);
    CHECK(testutil::max_abs_diff(got, want) == 0.0);
}

namespace {

Model trained_like_model(ResidualMode residual, unsigned seed) {
    ModelConfig cfg;
    cfg.arch = Arch::RESNET_TINY;
    cfg.num_classes = 10;
    cfg.input_shape = {1, 1, 16, 16};
    cfg.block.residual = residual;
    Model m = build_model(cfg, seed);
    // scatter the batch-norm state so the fold is nontrivial
    std::mt19937_64 rng(seed + 1);
    std::uniform_real_distribution<double> g(-1.5, 1.5), mu(-0.5, 0.5), var(0.05, 2.0);
    auto scatter = [&](BatchNormParams& bn) {
        for (auto& v : bn.gamma->data) {
            v = g(rng);
            if (std::abs(v) < 1e-2) v = 1e-2;
        }
        for (auto& v : bn.beta->data) v = mu(rng);
        for (auto& v : bn.running_mu) v = mu(rng);
        for (auto& v : bn.running_var) v = var(rng);
    };
    scatter(*m.stem_bn);
    for (auto& b : m.blocks) {
        scatter(*b.conv1.bn);
        scatter(*b.conv2.bn);
        if (b.has_down) scatter(*b.down_bn);
    }
    return m;
}

}  // namespace

TEST_CASE("exported model matches the float eval path") {
    for (auto residual : {ResidualMode::SINGLE, ResidualMode::DOUBLE}) {
        Model m = trained_like_model(residual, 17);
        PackedModel pm = export_packed(m);

        std::mt19937_64 rng(23);
        auto x = testutil::random_tensor({8, 1, 16, 16}, rng, 0.0, 1.0);
        auto float_logits = m.forward(nullptr, x, std::nullopt, 2, false);
        const Tensor packed_logits = pm.forward(*x, false);

        const auto fp = argmax_rows(*float_logits);
        const auto pp = argmax_rows(packed_logits);
        int agree = 0;
        for (std::size_t i = 0; i < fp.size(); ++i)
            if (fp[i] == pp[i]) ++agree;
        CHECK(agree >= static_cast<int>(0.99 * fp.size()));
        // binary conv results are integer-exact, so the logits should track
        // the float path to rounding noise
        CHECK(testutil::max_abs_diff(*float_logits, packed_logits) < 1e-9);
    }
}

TEST_CASE("export rejects non-foldable activations, naming the block") {
    ModelConfig cfg;
    cfg.arch = Arch::RESNET_TINY;
    cfg.input_shape = {1, 1, 16, 16};
    cfg.block.activation = ActivationVariant::PRELU;
    Model m = build_model(cfg, 3);
    CHECK_THROWS_WITH_AS(export_packed(m),
                         "export: block0 activation PRELU is not foldable; use NONE or I&H",
                         std::runtime_error);
}

TEST_CASE("serialization round-trips byte-identically") {
    Model m = trained_like_model(ResidualMode::SINGLE, 29);
    PackedModel pm = export_packed(m);
    const auto bytes1 = serialize_packed(pm);
    PackedModel back = deserialize_packed(bytes1);
    const auto bytes2 = serialize_packed(back);
    CHECK(bytes1 == bytes2);

    std::mt19937_64 rng(31);
    auto x = testutil::random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
    CHECK(pm.forward(*x, false).data == back.forward(*x, false).data);
}

TEST_CASE("import rejects bad magic, version and CRC") {
    Model m = trained_like_model(ResidualMode::SINGLE, 37);
    auto bytes = serialize_packed(export_packed(m));

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_packed(bad_magic), std::runtime_error);

    auto bad_version = bytes;
    bad_version[4] = 9;  // version field
    // re-seal the CRC so only the version check trips
    {
        const std::uint32_t crc = crc32(bad_version.data(), bad_version.size() - 4);
        for (int i = 0; i < 4; ++i)
            bad_version[bad_version.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
    }
    CHECK_THROWS_WITH_AS(deserialize_packed(bad_version),
                         "packed model: unsupported version 9 (expected 1)", std::runtime_error);

    auto corrupt = bytes;
    corrupt[corrupt.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(deserialize_packed(corrupt), std::runtime_error);
}

TEST_CASE("scaling factors are absorbed into identical thresholds") {
    std::mt19937_64 rng(41);
    const double c = 2.5;
    auto w = testutil::random_pm1({4, 3, 3, 3}, rng);
    BnFold bn = make_fold({1.2, -0.8, 0.5, 2.0}, {0.3, -0.1, 0.0, 1.0}, {0.5, -0.5, 1.0, 0.0},
                          {1.0, 0.7, 2.0, 0.25});
    auto base = fuse_bn_sign(bn, *w);

    BnFold rescaled = bn;
    std::vector<double> alpha(4, c);
    for (int i = 0; i < 4; ++i) {
        rescaled.mu[i] = c * bn.mu[i];
        rescaled.var[i] = c * c * (bn.var[i] + bn.eps) - bn.eps;
    }
    auto scaled = fuse_bn_sign(rescaled, *w, &alpha);
    for (int i = 0; i < 4; ++i) CHECK(scaled.tau[i] == doctest::Approx(base.tau[i]).epsilon(1e-9));
    CHECK(scaled.flip_mask == base.flip_mask);
}
