#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "bnn/checkpoint.hpp"
#include "bnn/experiment.hpp"
#include "test_util.hpp"

using namespace bnn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("bnnkit_exp_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig smoke_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.name = "smoke";
    cfg.arch = Arch::RESNET_TINY;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.warmup_epochs = 1;
    cfg.seeds = {1};
    cfg.aug_flip = false;
    cfg.aug_crop = false;
    cfg.out_dir = out_dir;
    return cfg;
}

void write_synth_dir(const fs::path& dir, int train_n, int test_n) {
    SynthOptions opts;
    opts.train_count = train_n;
    opts.test_count = test_n;
    Dataset train, test;
    generate_synthetic_digits(opts, train, test);
    fs::create_directories(dir);
    write_idx((dir / "train-images-idx3-ubyte").string(),
              (dir / "train-labels-idx1-ubyte").string(), train);
    write_idx((dir / "test-images-idx3-ubyte").string(),
              (dir / "test-labels-idx1-ubyte").string(), test);
}

}  // namespace

TEST_CASE("config text round-trips through parse and serialize") {
    ExperimentConfig cfg;
    cfg.name = "roundtrip";
    cfg.block.feature_binarizer = BinarizerSpec::parse("EDE");
    cfg.block.weight_binarizer = BinarizerSpec::parse("LC_1.3");
    cfg.block.feature_norm = NormalizerKind::STD;
    cfg.block.weight_norm = NormalizerKind::MSTDB;
    cfg.block.scaling = ScalingKind::LFI;
    cfg.block.activation = ActivationVariant::RPRELU;
    cfg.block.residual = ResidualMode::DOUBLE;
    cfg.optimizer = OptKind::ADAM;
    cfg.two_stage = true;
    cfg.seeds = {11, 22, 33};
    cfg.loss.reg_kind = RegKind::RE;
    cfg.loss.reg_lambda = 0.01;

    const std::string text = config_to_text(cfg);
    const ExperimentConfig back = parse_config_map(parse_kv_text(text));
    CHECK(config_to_text(back) == text);
    CHECK(back.block.feature_binarizer.kind == BinarizerKind::EDE);
    CHECK(back.block.weight_binarizer.clip_width == doctest::Approx(1.3));
    CHECK(back.seeds == std::vector<std::uint64_t>{11, 22, 33});
}

TEST_CASE("config parser rejects unknown keys and bad values") {
    CHECK_THROWS_WITH_AS(parse_config_map({{"no_such_key", "1"}}),
                         "config: unknown key 'no_such_key'", std::invalid_argument);
    CHECK_THROWS_AS(parse_config_map({{"epochs", "ten"}}), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_map({{"double_residual", "maybe"}}), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_map({{"seeds", ""}}), std::invalid_argument);
    CHECK_THROWS_AS(parse_kv_text("this line has no equals sign"), std::invalid_argument);
}

TEST_CASE("summarize_seeds computes order statistics") {
    std::vector<SeedResult> seeds(3);
    seeds[0] = {1, false, "", 0.8, ""};
    seeds[1] = {2, false, "", 0.9, ""};
    seeds[2] = {3, false, "", 0.7, ""};
    const RunSummary s = summarize_seeds("abc", seeds);
    CHECK(s.min_acc == doctest::Approx(0.7));
    CHECK(s.median_acc == doctest::Approx(0.8));
    CHECK(s.max_acc == doctest::Approx(0.9));
    CHECK(s.mean_acc == doctest::Approx(0.8));
    CHECK_FALSE(s.degraded);

    const RunSummary single = summarize_seeds("one", {{5, false, "", 0.5, ""}});
    CHECK(single.min_acc == single.median_acc);
    CHECK(single.median_acc == single.max_acc);

    std::vector<SeedResult> with_failure(2);
    with_failure[0] = {1, false, "", 0.6, ""};
    with_failure[1] = {2, true, "exploded", 0.0, ""};
    const RunSummary degraded = summarize_seeds("bad", with_failure);
    CHECK(degraded.degraded);
    CHECK(degraded.completed == 1);
}

TEST_CASE("summarize sorts by median and reports the delta to the baseline") {
    RunSummary a = summarize_seeds("baseline", {{1, false, "", 0.5, ""}});
    RunSummary b = summarize_seeds("better", {{1, false, "", 0.8, ""}});
    const Report rep = summarize({a, b});
    CHECK(rep.csv.find("better,1,0.8") < rep.csv.find("baseline,1,0.5"));
    CHECK(rep.csv.find("0.3") != std::string::npos);  // delta vs the first experiment
    CHECK_THROWS_AS(summarize({}), std::invalid_argument);
}

TEST_CASE("run_experiment: zero learning rate makes all seeds identical") {
    SynthOptions opts;
    opts.train_count = 40;
    opts.test_count = 20;
    Dataset train, test;
    generate_synthetic_digits(opts, train, test);

    TempDir tmp;
    ExperimentConfig cfg = smoke_config((tmp.path / "runs").string());
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    cfg.seeds = {1, 2, 3};
    const RunSummary s = run_experiment_on(cfg, train, test, 2);
    REQUIRE(s.completed == 3);
    CHECK(s.std_acc == doctest::Approx(0.0));
    CHECK(s.min_acc == s.max_acc);
}

TEST_CASE("run_experiment writes per-seed CSV and a summary JSON") {
    TempDir tmp;
    write_synth_dir(tmp.path / "data", 40, 20);
    ExperimentConfig cfg = smoke_config((tmp.path / "runs").string());
    cfg.dataset_path = (tmp.path / "data").string();
    const RunSummary s = run_experiment(cfg, 1);
    CHECK(s.completed == 1);
    CHECK(fs::exists(tmp.path / "runs" / "smoke" / "seed_1.csv"));
    CHECK(fs::exists(tmp.path / "runs" / "smoke" / "summary.json"));
    std::ifstream csv(tmp.path / "runs" / "smoke" / "seed_1.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "epoch,lr,train_loss,train_acc,test_acc");
}

TEST_CASE("seed-parallel and sequential execution give identical results") {
    SynthOptions opts;
    opts.train_count = 30;
    opts.test_count = 10;
    Dataset train, test;
    generate_synthetic_digits(opts, train, test);
    TempDir tmp;
    ExperimentConfig cfg = smoke_config((tmp.path / "runs").string());
    cfg.seeds = {1, 2, 3, 4};
    const RunSummary seq = run_experiment_on(cfg, train, test, 1);
    const RunSummary par = run_experiment_on(cfg, train, test, 4);
    REQUIRE(seq.per_seed.size() == par.per_seed.size());
    for (std::size_t i = 0; i < seq.per_seed.size(); ++i) {
        CHECK(seq.per_seed[i].csv == par.per_seed[i].csv);
        CHECK(seq.per_seed[i].final_test_acc == par.per_seed[i].final_test_acc);
    }
}

TEST_CASE("sweep enforces one-factor isolation and reports a comparison") {
    TempDir tmp;
    write_synth_dir(tmp.path / "data", 30, 10);
    ExperimentConfig base = smoke_config((tmp.path / "runs").string());
    base.dataset_path = (tmp.path / "data").string();
    base.name = "iso";
    const auto results = sweep(base, "double_residual", {"N", "Y"}, 2);
    REQUIRE(results.size() == 2);
    const Report rep = summarize(results);
    CHECK(rep.csv.find("iso_double_residual-N") != std::string::npos);
    CHECK(rep.csv.find("iso_double_residual-Y") != std::string::npos);
    CHECK_THROWS_AS(sweep(base, "no_such_factor", {"A"}), std::invalid_argument);
}

TEST_CASE("checkpoint save/load restores parameters and running state") {
    SynthOptions opts;
    opts.train_count = 30;
    opts.test_count = 10;
    Dataset train, test;
    generate_synthetic_digits(opts, train, test);

    TempDir tmp;
    ExperimentConfig cfg = smoke_config((tmp.path / "runs").string());
    cfg.block.scaling = ScalingKind::LFI;
    const DatasetStats stats = compute_stats(train);
    Model model = build_model(to_model_config(cfg, train.images.shape), 1);
    TrainConfig tc = to_train_config(cfg, stats);
    train_model(model, train, test, tc, 1);

    const auto ckpt_path = (tmp.path / "model.ckpt").string();
    save_checkpoint(ckpt_path, model, cfg, stats, 1);
    Checkpoint ck = load_checkpoint(ckpt_path);

    const auto pa = model.parameters(), pb = ck.model.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor->data == pb[i].tensor->data);
    CHECK(ck.model.blocks[0].conv1.scaling.initialized);
    CHECK(ck.stats.mean == stats.mean);

    // the restored model evaluates identically
    auto x = make_tensor(Shape{2, 1, 28, 28}, 0.3);
    auto ya = model.forward(nullptr, x, std::nullopt, 2, false);
    auto yb = ck.model.forward(nullptr, x, std::nullopt, 2, false);
    CHECK(ya->data == yb->data);
}
