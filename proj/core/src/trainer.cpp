#include "bnn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bnn {

std::vector<TensorPtr> latent_conv_weights(const Model& model) {
    std::vector<TensorPtr> out;
    for (const auto& block : model.blocks) {
        out.push_back(block.conv1.weight);
        out.push_back(block.conv2.weight);
    }
    return out;
}

namespace {

TensorPtr gather_batch(const Dataset& ds, const std::vector<int>& idx, std::size_t begin,
                       std::size_t end, std::vector<int>& labels) {
    const int c = ds.images.shape[1], h = ds.images.shape[2], w = ds.images.shape[3];
    const std::int64_t per = static_cast<std::int64_t>(c) * h * w;
    const int bn = static_cast<int>(end - begin);
    auto batch = make_tensor({bn, c, h, w});
    labels.resize(static_cast<std::size_t>(bn));
    for (int i = 0; i < bn; ++i) {
        const int src = idx[begin + static_cast<std::size_t>(i)];
        std::copy_n(ds.images.data.data() + src * per, per, batch->data.data() + i * per);
        labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(src)];
    }
    return batch;
}

}  // namespace

double evaluate(Model& model, const Dataset& ds, const AugmentOptions& aug, int batch_size,
                const std::optional<TrainingProgress>& progress, int stage) {
    const int n = ds.count();
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 dummy(0);  // eval augmentation draws nothing (normalize only)
    int correct = 0;
    std::vector<int> labels;
    for (std::size_t begin = 0; begin < idx.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(idx.size(), begin + static_cast<std::size_t>(batch_size));
        auto batch = gather_batch(ds, idx, begin, end, labels);
        augment(*batch, aug, dummy);
        auto logits = model.forward(nullptr, batch, progress, stage, false);
        const auto pred = argmax_rows(*logits);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == labels[i]) ++correct;
    }
    return n > 0 ? static_cast<double>(correct) / n : 0.0;
}

EpochMetrics train_epoch(Model& model, const Dataset& train_set, OptimizerState& opt,
                         const TrainConfig& cfg, int epoch, std::mt19937_64& rng) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr_at(epoch, cfg.epochs, cfg.warmup_epochs, cfg.peak_lr);

    const int stage = cfg.stages.stage_at(epoch, cfg.epochs);
    const auto params = model.parameters();
    const auto reg_weights = latent_conv_weights(model);

    std::vector<int> idx(static_cast<std::size_t>(train_set.count()));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t nb =
        (idx.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size;

    double loss_sum = 0.0;
    int correct = 0, seen = 0;
    std::vector<int> labels;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < idx.size();
         begin += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
        const std::size_t end = std::min(idx.size(), begin + static_cast<std::size_t>(cfg.batch_size));
        auto batch = gather_batch(train_set, idx, begin, end, labels);
        augment(*batch, cfg.train_aug, rng);

        const double frac_epoch = epoch + static_cast<double>(batch_index) / nb;
        TrainingProgress progress{std::min(1.0, frac_epoch / cfg.epochs)};
        opt.lr = lr_at(frac_epoch, cfg.epochs, cfg.warmup_epochs, cfg.peak_lr);

        Tape tape;
        auto logits = model.forward(&tape, batch, progress, stage, true);
        auto loss = softmax_cross_entropy(&tape, logits, labels);
        if (cfg.loss.reg_kind != RegKind::NONE && cfg.loss.reg_lambda != 0.0)
            loss = add_scaled_scalar(&tape, loss,
                                     regularization_loss(&tape, cfg.loss, reg_weights),
                                     cfg.loss.reg_lambda);
        if (!std::isfinite(loss->data[0])) {
            m.failed = true;
            return m;
        }
        tape.backward(loss);
        optimizer_step(opt, params);
        for (const auto& p : params) p.tensor->zero_grad();

        const int bn = static_cast<int>(end - begin);
        loss_sum += loss->data[0] * bn;
        seen += bn;
        const auto pred = argmax_rows(*logits);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == labels[i]) ++correct;
    }
    m.train_loss = seen > 0 ? loss_sum / seen : 0.0;
    m.train_acc = seen > 0 ? static_cast<double>(correct) / seen : 0.0;
    return m;
}

TrainResult train_model(Model& model, const Dataset& train_set, const Dataset& test_set,
                        const TrainConfig& cfg, std::uint64_t seed) {
    TrainResult result;
    std::mt19937_64 rng(seed);
    OptimizerState opt = cfg.opt;
    opt.init(model.parameters());
    const double base_wd = opt.weight_decay;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const int stage = cfg.stages.stage_at(epoch, cfg.epochs);
        opt.weight_decay = (cfg.stages.enabled && stage == 2) ? 0.0 : base_wd;
        EpochMetrics m;
        try {
            m = train_epoch(model, train_set, opt, cfg, epoch, rng);
        } catch (const std::runtime_error& e) {
            result.failed = true;
            result.failure = e.what();
            m.epoch = epoch;
            m.failed = true;
            result.epochs.push_back(m);
            return result;
        }
        if (m.failed) {
            result.failed = true;
            result.failure = "non-finite loss at epoch " + std::to_string(epoch);
            result.epochs.push_back(m);
            return result;
        }
        TrainingProgress progress{std::min(1.0, static_cast<double>(epoch + 1) / cfg.epochs)};
        m.test_acc = evaluate(model, test_set, cfg.eval_aug, cfg.batch_size, progress, stage);
        result.epochs.push_back(m);
    }
    if (!result.epochs.empty()) result.final_test_acc = result.epochs.back().test_acc;
    return result;
}

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
    std::string out = "epoch,lr,train_loss,train_acc,test_acc\n";
    char buf[160];
    for (const auto& r : rows) {
        if (r.failed) {
            std::snprintf(buf, sizeof(buf), "%d,failed,,,\n", r.epoch);
        } else {
            std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.lr,
                          r.train_loss, r.train_acc, r.test_acc);
        }
        out += buf;
    }
    return out;
}

}  // namespace bnn
