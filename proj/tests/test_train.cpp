#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bnn/trainer.hpp"
#include "test_util.hpp"

using namespace bnn;

namespace {

std::vector<NamedParam> scalar_param(double value) {
    return {{"w", make_tensor({1}, std::vector<double>{value})}};
}

void set_grad(const std::vector<NamedParam>& params, double g) {
    params[0].tensor->ensure_grad();
    params[0].tensor->grad[0] = g;
}

}  // namespace

TEST_CASE("sgd_step scalar traces") {
    SUBCASE("plain gradient descent at zero momentum") {
        auto p = scalar_param(1.0);
        OptimizerState opt;
        opt.kind = OptKind::SGD;
        opt.momentum = 0.0;
        opt.lr = 0.1;
        opt.weight_decay = 0.0;
        opt.init(p);
        set_grad(p, 1.0);
        sgd_step(opt, p);
        CHECK(p[0].tensor->data[0] == doctest::Approx(0.9));
    }

    SUBCASE("two steps with momentum unroll the recurrence") {
        auto p = scalar_param(0.0);
        OptimizerState opt;
        opt.kind = OptKind::SGD;
        opt.momentum = 0.9;
        opt.lr = 0.1;
        opt.weight_decay = 0.0;
        opt.init(p);
        set_grad(p, 1.0);
        sgd_step(opt, p);
        CHECK(opt.m[0][0] == doctest::Approx(-0.1));
        CHECK(p[0].tensor->data[0] == doctest::Approx(-0.1));
        set_grad(p, 1.0);
        sgd_step(opt, p);
        CHECK(opt.m[0][0] == doctest::Approx(-0.19));
        CHECK(p[0].tensor->data[0] == doctest::Approx(-0.29));
    }

    SUBCASE("zero gradient coasts on momentum") {
        auto p = scalar_param(1.0);
        OptimizerState opt;
        opt.kind = OptKind::SGD;
        opt.momentum = 0.9;
        opt.lr = 0.1;
        opt.weight_decay = 0.0;
        opt.init(p);
        opt.m[0][0] = 0.5;
        set_grad(p, 0.0);
        sgd_step(opt, p);
        CHECK(p[0].tensor->data[0] == doctest::Approx(1.0 + 0.9 * 0.5));
    }

    SUBCASE("NaN gradients abort with a diagnostic") {
        auto p = scalar_param(1.0);
        OptimizerState opt;
        opt.init(p);
        set_grad(p, std::nan(""));
        CHECK_THROWS_WITH_AS(sgd_step(opt, p),
                             "optimizer: non-finite gradient in parameter 'w'",
                             std::runtime_error);
    }
}

TEST_CASE("sgd 10-step trace matches an independently unrolled oracle") {
    auto p = scalar_param(0.7);
    OptimizerState opt;
    opt.kind = OptKind::SGD;
    opt.momentum = 0.9;
    opt.lr = 0.05;
    opt.weight_decay = 1e-4;
    opt.init(p);

    double w = 0.7, m = 0.0;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> dist(-1, 1);
    for (int step = 0; step < 10; ++step) {
        const double g = dist(rng);
        set_grad(p, g);
        sgd_step(opt, p);
        const double geff = g + 1e-4 * w;
        m = 0.9 * m - 0.05 * geff;
        w = w + m;
        CHECK(std::abs(p[0].tensor->data[0] - w) < 1e-12);
    }
}

TEST_CASE("adam_step properties and oracle trace") {
    SUBCASE("first step direction is sign-like for tiny epsilon") {
        auto p = scalar_param(2.0);
        OptimizerState opt;
        opt.kind = OptKind::ADAM;
        opt.lr = 1e-3;
        opt.eps = 1e-30;
        opt.weight_decay = 0.0;
        opt.init(p);
        set_grad(p, 0.123);
        adam_step(opt, p);
        CHECK(p[0].tensor->data[0] == doctest::Approx(2.0 - 1e-3).epsilon(1e-9));
    }

    SUBCASE("zero gradients from zero state leave parameters unchanged") {
        auto p = scalar_param(0.5);
        OptimizerState opt;
        opt.kind = OptKind::ADAM;
        opt.lr = 1e-3;
        opt.weight_decay = 0.0;
        opt.init(p);
        for (int i = 0; i < 5; ++i) {
            set_grad(p, 0.0);
            adam_step(opt, p);
        }
        CHECK(p[0].tensor->data[0] == 0.5);
    }

    SUBCASE("10-step trace matches the unrolled update equations") {
        auto p = scalar_param(1.0);
        OptimizerState opt;
        opt.kind = OptKind::ADAM;
        opt.lr = 1e-3;
        opt.weight_decay = 0.0;
        opt.init(p);

        double w = 1.0, m = 0.0, v = 0.0;
        for (int step = 1; step <= 10; ++step) {
            set_grad(p, 1.0);
            adam_step(opt, p);
            m = 0.9 * m + 0.1 * 1.0;
            v = 0.999 * v + 0.001 * 1.0;
            const double mh = m / (1.0 - std::pow(0.9, step));
            const double vh = v / (1.0 - std::pow(0.999, step));
            w = w - 1e-3 * mh / std::sqrt(vh + 1e-8);
            CHECK(std::abs(p[0].tensor->data[0] - w) < 1e-12);
        }
    }
}

TEST_CASE("lr_at: warmup ramp then cosine decay") {
    CHECK(lr_at(2, 100, 2, 0.1) == doctest::Approx(0.1));
    CHECK(lr_at(100, 100, 2, 0.1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(lr_at(51, 100, 2, 0.1) == doctest::Approx(0.05));  // cosine midpoint
    CHECK(lr_at(0, 100, 2, 0.1) == 0.0);
    CHECK(lr_at(1, 100, 2, 0.1) == doctest::Approx(0.05));
    CHECK(lr_at(0, 100, 0, 0.1) == doctest::Approx(0.1));  // no warmup starts at peak
    CHECK_THROWS_AS(lr_at(0, 2, 2, 0.1), std::invalid_argument);
}

TEST_CASE("regularization losses") {
    LossSpec r1;
    r1.reg_kind = RegKind::R1;
    r1.reg_alpha = 1.0;
    auto w = make_tensor({1}, std::vector<double>{0.7});
    CHECK(regularization_loss(nullptr, r1, {w})->data[0] == doctest::Approx(0.3));

    LossSpec r2;
    r2.reg_kind = RegKind::R2;
    auto wpm = make_tensor({4}, std::vector<double>{1, -1, 1, -1});
    CHECK(regularization_loss(nullptr, r2, {wpm})->data[0] == doctest::Approx(0.0));

    LossSpec re;
    re.reg_kind = RegKind::RE;
    auto whalf = make_tensor({4}, std::vector<double>{1, 1, -1, -1});
    CHECK(regularization_loss(nullptr, re, {whalf})->data[0] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(weight_sign_entropy_hard({whalf}, 1.0) == doctest::Approx(0.0));

    LossSpec none;
    CHECK_THROWS_AS(regularization_loss(nullptr, none, {w}), std::invalid_argument);
}

TEST_CASE("regularization gradients agree with finite differences") {
    std::mt19937_64 rng(19);
    for (RegKind kind : {RegKind::R1, RegKind::R2, RegKind::RE}) {
        LossSpec spec;
        spec.reg_kind = kind;
        auto w = testutil::random_tensor({3, 2, 1, 1}, rng, -1.5, 1.5);
        Tape tape;
        auto loss = regularization_loss(&tape, spec, {w});
        tape.backward(loss);
        auto f = [&](const Tensor& probe) {
            auto pw = std::make_shared<Tensor>(probe);
            return regularization_loss(nullptr, spec, {pw})->data[0];
        };
        const Tensor g = finite_diff_grad(f, *w, 1e-6);
        for (std::int64_t i = 0; i < w->size(); ++i)
            CHECK(std::abs(w->grad[i] - g.data[i]) < 1e-5 * std::max(1.0, std::abs(g.data[i])));
    }
}

namespace {

Dataset toy_two_class(int n, int side) {
    Dataset ds;
    ds.images = Tensor({n, 1, side, side});
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.num_classes = 2;
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> noise(0.0, 0.15);
    for (int i = 0; i < n; ++i) {
        const int cls = i % 2;
        ds.labels[static_cast<std::size_t>(i)] = cls;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                // class 0: left half bright; class 1: right half bright
                const bool lit = cls == 0 ? x < side / 2 : x >= side / 2;
                ds.images.data[(static_cast<std::int64_t>(i) * side + y) * side + x] =
                    (lit ? 0.9 : 0.1) + noise(rng);
            }
    }
    return ds;
}

TrainConfig small_train_config(int epochs, double lr) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 16;
    tc.warmup_epochs = 2;
    tc.peak_lr = lr;
    tc.opt.kind = OptKind::SGD;
    tc.opt.momentum = 0.9;
    tc.opt.weight_decay = 1e-4;
    return tc;
}

ModelConfig tiny_model_config(int classes, int side) {
    ModelConfig mc;
    mc.arch = Arch::RESNET_TINY;
    mc.num_classes = classes;
    mc.input_shape = {1, 1, side, side};
    return mc;
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters unchanged end-to-end") {
    Dataset ds = toy_two_class(16, 8);
    Model model = build_model(tiny_model_config(2, 8), 3);
    const auto before = [&] {
        std::vector<std::vector<double>> snap;
        for (const auto& p : model.parameters()) snap.push_back(p.tensor->data);
        return snap;
    }();
    TrainConfig tc = small_train_config(3, 0.0);
    tc.opt.weight_decay = 0.0;
    train_model(model, ds, ds, tc, 3);
    const auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i].tensor->data == before[i]);
}

TEST_CASE("single-batch toy problem overfits to full training accuracy") {
    Dataset ds = toy_two_class(16, 8);
    Model model = build_model(tiny_model_config(2, 8), 1);
    TrainConfig tc = small_train_config(200, 0.05);
    TrainResult res = train_model(model, ds, ds, tc, 1);
    REQUIRE_FALSE(res.failed);
    CHECK(res.epochs.back().train_acc == doctest::Approx(1.0));
}

TEST_CASE("with zero balancing coefficient the loss equals cross-entropy") {
    Dataset ds = toy_two_class(8, 8);
    Model a = build_model(tiny_model_config(2, 8), 5);
    Model b = build_model(tiny_model_config(2, 8), 5);
    TrainConfig plain = small_train_config(2, 0.05);
    TrainConfig reg = plain;
    reg.loss.reg_kind = RegKind::R2;
    reg.loss.reg_lambda = 0.0;
    const auto ra = train_model(a, ds, ds, plain, 7);
    const auto rb = train_model(b, ds, ds, reg, 7);
    REQUIRE(ra.epochs.size() == rb.epochs.size());
    for (std::size_t i = 0; i < ra.epochs.size(); ++i)
        CHECK(ra.epochs[i].train_loss == rb.epochs[i].train_loss);
}

TEST_CASE("metrics CSV is deterministic for a fixed seed") {
    Dataset ds = toy_two_class(16, 8);
    auto run = [&] {
        Model model = build_model(tiny_model_config(2, 8), 11);
        TrainConfig tc = small_train_config(3, 0.05);
        return metrics_csv(train_model(model, ds, ds, tc, 11).epochs);
    };
    const std::string a = run(), b = run();
    CHECK(a == b);
    CHECK(a.rfind("epoch,lr,train_loss,train_acc,test_acc\n", 0) == 0);
}

TEST_CASE("stage controller splits training and zeroes weight decay in stage 2") {
    StageController ctl;
    ctl.enabled = true;
    ctl.split_fraction = 0.5;
    CHECK(ctl.stage_at(0, 10) == 1);
    CHECK(ctl.stage_at(4, 10) == 1);
    CHECK(ctl.stage_at(5, 10) == 2);
    CHECK(ctl.stage_at(9, 10) == 2);
    StageController off;
    CHECK(off.stage_at(0, 10) == 2);

    // weight decay flips to zero exactly at the stage boundary
    Dataset ds = toy_two_class(8, 8);
    Model model = build_model(tiny_model_config(2, 8), 2);
    TrainConfig tc = small_train_config(4, 0.01);
    tc.stages.enabled = true;
    tc.stages.split_fraction = 0.5;
    TrainResult res = train_model(model, ds, ds, tc, 2);
    CHECK_FALSE(res.failed);
}
