#include "bnn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace bnn {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_yn(const std::string& v, const std::string& key) {
    if (v == "Y" || v == "y" || v == "1" || v == "true") return true;
    if (v == "N" || v == "n" || v == "0" || v == "false") return false;
    throw std::invalid_argument("config: key '" + key + "' expects Y or N, got '" + v + "'");
}

double parse_num(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return d;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

std::string fmt_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " is not key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

ExperimentConfig parse_config_map(const std::map<std::string, std::string>& kv) {
    ExperimentConfig cfg;
    for (const auto& [key, value] : kv) {
        if (key == "name") cfg.name = value;
        else if (key == "arch") cfg.arch = parse_arch(value);
        else if (key == "width") cfg.width = parse_num(value, key);
        else if (key == "num_classes") cfg.num_classes = static_cast<int>(parse_num(value, key));
        else if (key == "imagenet_stem") cfg.imagenet_stem = parse_yn(value, key);
        else if (key == "feature_binarizer") cfg.block.feature_binarizer = BinarizerSpec::parse(value);
        else if (key == "weight_binarizer") cfg.block.weight_binarizer = BinarizerSpec::parse(value);
        else if (key == "ss_beta") {
            cfg.block.feature_binarizer.ss_beta = parse_num(value, key);
            cfg.block.weight_binarizer.ss_beta = cfg.block.feature_binarizer.ss_beta;
        } else if (key == "ewgs_delta") {
            cfg.block.feature_binarizer.ewgs_delta = parse_num(value, key);
            cfg.block.weight_binarizer.ewgs_delta = cfg.block.feature_binarizer.ewgs_delta;
        } else if (key == "gpn_k_clamp_at_one") {
            cfg.block.feature_binarizer.gpn_k_clamp_at_one = parse_yn(value, key);
            cfg.block.weight_binarizer.gpn_k_clamp_at_one =
                cfg.block.feature_binarizer.gpn_k_clamp_at_one;
        } else if (key == "feature_norm") {
            cfg.block.feature_norm = NormalizerSpec::parse_kind(value);
        } else if (key == "weight_norm") {
            cfg.block.weight_norm = NormalizerSpec::parse_kind(value);
        } else if (key == "mstdb_b") cfg.block.mstdb_b = parse_num(value, key);
        else if (key == "mstd_center") {
            if (value == "mean") cfg.block.mstd_center = CenterKind::MEAN;
            else if (value == "median") cfg.block.mstd_center = CenterKind::MEDIAN;
            else throw std::invalid_argument("config: mstd_center must be mean or median");
        } else if (key == "scaling") cfg.block.scaling = ScalingFactorSpec::parse_kind(value);
        else if (key == "activation") cfg.block.activation = ActivationSpec::parse_variant(value);
        else if (key == "double_residual") {
            cfg.block.residual = parse_yn(value, key) ? ResidualMode::DOUBLE : ResidualMode::SINGLE;
        } else if (key == "optimizer") cfg.optimizer = parse_optimizer(value);
        else if (key == "lr") cfg.lr = parse_num(value, key);
        else if (key == "momentum") cfg.momentum = parse_num(value, key);
        else if (key == "adam_beta1") cfg.beta1 = parse_num(value, key);
        else if (key == "adam_beta2") cfg.beta2 = parse_num(value, key);
        else if (key == "adam_eps") cfg.adam_eps = parse_num(value, key);
        else if (key == "weight_decay") cfg.weight_decay = parse_num(value, key);
        else if (key == "epochs") cfg.epochs = static_cast<int>(parse_num(value, key));
        else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_num(value, key));
        else if (key == "warmup_epochs") cfg.warmup_epochs = static_cast<int>(parse_num(value, key));
        else if (key == "regularization") cfg.loss.reg_kind = parse_reg(value);
        else if (key == "reg_alpha") cfg.loss.reg_alpha = parse_num(value, key);
        else if (key == "reg_lambda") cfg.loss.reg_lambda = parse_num(value, key);
        else if (key == "wanted_entropy") cfg.loss.wanted_entropy = parse_num(value, key);
        else if (key == "two_stage") cfg.two_stage = parse_yn(value, key);
        else if (key == "stage_split") cfg.stage_split = parse_num(value, key);
        else if (key == "seeds") {
            cfg.seeds.clear();
            std::istringstream ss(value);
            std::string tok;
            while (std::getline(ss, tok, ',')) {
                tok = trim(tok);
                if (!tok.empty()) cfg.seeds.push_back(std::stoull(tok));
            }
            if (cfg.seeds.empty()) throw std::invalid_argument("config: seeds list is empty");
        } else if (key == "dataset") cfg.dataset_path = value;
        else if (key == "dataset_kind") {
            if (value == "IDX") cfg.dataset_kind = DatasetKind::IDX;
            else if (value == "CIFAR_BIN") cfg.dataset_kind = DatasetKind::CIFAR_BIN;
            else throw std::invalid_argument("config: dataset_kind must be IDX or CIFAR_BIN");
        } else if (key == "augment_flip") cfg.aug_flip = parse_yn(value, key);
        else if (key == "augment_crop") cfg.aug_crop = parse_yn(value, key);
        else if (key == "augment_normalize") cfg.aug_norm = parse_yn(value, key);
        else if (key == "out") cfg.out_dir = value;
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_map(parse_kv_text(ss.str()));
}

std::map<std::string, std::string> config_to_map(const ExperimentConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["name"] = cfg.name;
    kv["arch"] = arch_name(cfg.arch);
    kv["width"] = fmt_num(cfg.width);
    kv["num_classes"] = std::to_string(cfg.num_classes);
    kv["imagenet_stem"] = cfg.imagenet_stem ? "Y" : "N";
    kv["feature_binarizer"] = cfg.block.feature_binarizer.name();
    kv["weight_binarizer"] = cfg.block.weight_binarizer.name();
    kv["ss_beta"] = fmt_num(cfg.block.feature_binarizer.ss_beta);
    kv["ewgs_delta"] = fmt_num(cfg.block.feature_binarizer.ewgs_delta);
    kv["gpn_k_clamp_at_one"] = cfg.block.feature_binarizer.gpn_k_clamp_at_one ? "Y" : "N";
    kv["feature_norm"] = NormalizerSpec::kind_name(cfg.block.feature_norm, false);
    kv["weight_norm"] = NormalizerSpec::kind_name(cfg.block.weight_norm, true);
    kv["mstdb_b"] = fmt_num(cfg.block.mstdb_b);
    kv["mstd_center"] = cfg.block.mstd_center == CenterKind::MEAN ? "mean" : "median";
    kv["scaling"] = ScalingFactorSpec::kind_name(cfg.block.scaling);
    kv["activation"] = ActivationSpec::variant_name(cfg.block.activation);
    kv["double_residual"] = cfg.block.residual == ResidualMode::DOUBLE ? "Y" : "N";
    kv["optimizer"] = optimizer_name(cfg.optimizer);
    kv["lr"] = fmt_num(cfg.lr);
    kv["momentum"] = fmt_num(cfg.momentum);
    kv["adam_beta1"] = fmt_num(cfg.beta1);
    kv["adam_beta2"] = fmt_num(cfg.beta2);
    kv["adam_eps"] = fmt_num(cfg.adam_eps);
    kv["weight_decay"] = fmt_num(cfg.weight_decay);
    kv["epochs"] = std::to_string(cfg.epochs);
    kv["batch_size"] = std::to_string(cfg.batch_size);
    kv["warmup_epochs"] = std::to_string(cfg.warmup_epochs);
    kv["regularization"] = reg_name(cfg.loss.reg_kind);
    kv["reg_alpha"] = fmt_num(cfg.loss.reg_alpha);
    kv["reg_lambda"] = fmt_num(cfg.loss.reg_lambda);
    kv["wanted_entropy"] = fmt_num(cfg.loss.wanted_entropy);
    kv["two_stage"] = cfg.two_stage ? "Y" : "N";
    kv["stage_split"] = fmt_num(cfg.stage_split);
    std::string seeds;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        seeds += (i ? "," : "") + std::to_string(cfg.seeds[i]);
    kv["seeds"] = seeds;
    kv["dataset"] = cfg.dataset_path;
    kv["dataset_kind"] = cfg.dataset_kind == DatasetKind::IDX ? "IDX" : "CIFAR_BIN";
    kv["augment_flip"] = cfg.aug_flip ? "Y" : "N";
    kv["augment_crop"] = cfg.aug_crop ? "Y" : "N";
    kv["augment_normalize"] = cfg.aug_norm ? "Y" : "N";
    kv["out"] = cfg.out_dir;
    return kv;
}

std::string config_to_text(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : config_to_map(cfg)) out += k + " = " + v + "\n";
    return out;
}

ModelConfig to_model_config(const ExperimentConfig& cfg, const Shape& input_shape) {
    ModelConfig mc;
    mc.arch = cfg.arch;
    mc.block = cfg.block;
    mc.num_classes = cfg.num_classes;
    mc.input_shape = input_shape;
    mc.width_multiplier = cfg.width;
    mc.imagenet_stem = cfg.imagenet_stem;
    return mc;
}

TrainConfig to_train_config(const ExperimentConfig& cfg, const DatasetStats& stats) {
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.warmup_epochs = cfg.warmup_epochs;
    tc.peak_lr = cfg.peak_lr();
    tc.opt.kind = cfg.optimizer;
    tc.opt.lr = tc.peak_lr;
    tc.opt.momentum = cfg.momentum;
    tc.opt.beta1 = cfg.beta1;
    tc.opt.beta2 = cfg.beta2;
    tc.opt.eps = cfg.adam_eps;
    tc.opt.weight_decay = cfg.weight_decay;
    tc.loss = cfg.loss;
    tc.stages.enabled = cfg.two_stage;
    tc.stages.split_fraction = cfg.stage_split;
    tc.train_aug.flip = cfg.aug_flip;
    tc.train_aug.crop = cfg.aug_crop;
    tc.train_aug.normalize = cfg.aug_norm;
    tc.train_aug.stats = stats;
    tc.eval_aug.normalize = cfg.aug_norm;
    tc.eval_aug.stats = stats;
    return tc;
}

RunSummary summarize_seeds(const std::string& name, std::vector<SeedResult> seeds) {
    RunSummary s;
    s.name = name;
    s.per_seed = std::move(seeds);
    std::vector<double> accs;
    for (const auto& r : s.per_seed) {
        if (r.failed) {
            s.degraded = true;
        } else {
            accs.push_back(r.final_test_acc);
        }
    }
    s.completed = static_cast<int>(accs.size());
    if (accs.empty()) {
        s.degraded = true;
        return s;
    }
    std::sort(accs.begin(), accs.end());
    s.min_acc = accs.front();
    s.max_acc = accs.back();
    const std::size_t n = accs.size();
    s.median_acc = n % 2 ? accs[n / 2] : 0.5 * (accs[n / 2 - 1] + accs[n / 2]);
    double mean = 0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double a : accs) var += (a - mean) * (a - mean);
    s.mean_acc = mean;
    s.std_acc = std::sqrt(var / static_cast<double>(n));
    return s;
}

RunSummary run_experiment_on(const ExperimentConfig& cfg, const Dataset& train,
                             const Dataset& test, int max_threads) {
    const DatasetStats stats = cfg.aug_norm ? compute_stats(train) : DatasetStats{};
    const TrainConfig tc = to_train_config(cfg, stats);
    const ModelConfig mc = to_model_config(cfg, train.images.shape);

    std::vector<SeedResult> results(cfg.seeds.size());
    auto run_one = [&](std::size_t i) {
        SeedResult& r = results[i];
        r.seed = cfg.seeds[i];
        try {
            Model model = build_model(mc, r.seed);
            TrainResult tr = train_model(model, train, test, tc, r.seed);
            r.csv = metrics_csv(tr.epochs);
            r.failed = tr.failed;
            r.failure = tr.failure;
            r.final_test_acc = tr.final_test_acc;
        } catch (const std::exception& e) {
            r.failed = true;
            r.failure = e.what();
        }
    };

    int threads = max_threads > 0 ? max_threads
                                  : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min<int>(threads, static_cast<int>(cfg.seeds.size())));
    if (threads == 1) {
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) run_one(i);
    } else {
        std::vector<std::thread> pool;
        std::size_t next = 0;
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&, t]() {
                for (std::size_t i = static_cast<std::size_t>(t); i < cfg.seeds.size();
                     i += static_cast<std::size_t>(threads))
                    run_one(i);
            });
        for (auto& th : pool) th.join();
        (void)next;
    }
    return summarize_seeds(cfg.name, std::move(results));
}

RunSummary run_experiment(const ExperimentConfig& cfg, int max_threads) {
    Dataset train, test;
    if (cfg.dataset_kind == DatasetKind::IDX)
        load_idx_dir(cfg.dataset_path, train, test);
    else
        load_cifar_dir(cfg.dataset_path, train, test);
    RunSummary summary = run_experiment_on(cfg, train, test, max_threads);
    write_experiment_outputs(cfg, summary);
    return summary;
}

void write_experiment_outputs(const ExperimentConfig& cfg, const RunSummary& summary) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(cfg.out_dir) / cfg.name;
    fs::create_directories(dir);
    for (const auto& r : summary.per_seed) {
        std::ofstream csv(dir / ("seed_" + std::to_string(r.seed) + ".csv"), std::ios::binary);
        csv << r.csv;
    }
    nlohmann::json j;
    j["name"] = summary.name;
    j["config"] = config_to_map(cfg);
    j["degraded"] = summary.degraded;
    j["completed"] = summary.completed;
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& r : summary.per_seed) {
        nlohmann::json e;
        e["seed"] = r.seed;
        e["failed"] = r.failed;
        if (r.failed) e["failure"] = r.failure;
        e["final_test_acc"] = r.final_test_acc;
        seeds.push_back(e);
    }
    j["seeds"] = seeds;
    j["min"] = summary.min_acc;
    j["median"] = summary.median_acc;
    j["max"] = summary.max_acc;
    j["mean"] = summary.mean_acc;
    j["std"] = summary.std_acc;
    std::ofstream out(dir / "summary.json");
    out << j.dump(2) << "\n";
}

Report summarize(const std::vector<RunSummary>& results) {
    if (results.empty()) throw std::invalid_argument("summarize: no experiment results");
    for (const auto& r : results)
        if (r.completed < 1)
            throw std::invalid_argument("summarize: experiment '" + r.name +
                                        "' has no completed run");
    const double base_median = results.front().median_acc;
    std::vector<const RunSummary*> order;
    for (const auto& r : results) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const RunSummary* a, const RunSummary* b) {
                         return a->median_acc > b->median_acc;
                     });

    Report rep;
    rep.csv = "name,seeds,min,median,max,mean,std,delta_median\n";
    char buf[256];
    rep.text += "experiment                       seeds    min   median      max     mean      std   d(med)\n";
    for (const RunSummary* r : order) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n", r->name.c_str(),
                      r->completed, r->min_acc, r->median_acc, r->max_acc, r->mean_acc, r->std_acc,
                      r->median_acc - base_median);
        rep.csv += buf;
        std::snprintf(buf, sizeof(buf), "%-32s %5d %7.4f %8.4f %8.4f %8.4f %8.4f %+8.4f%s\n",
                      r->name.c_str(), r->completed, r->min_acc, r->median_acc, r->max_acc,
                      r->mean_acc, r->std_acc, r->median_acc - base_median,
                      r->degraded ? "  [degraded]" : "");
        rep.text += buf;
    }
    return rep;
}

std::vector<RunSummary> sweep(const ExperimentConfig& base, const std::string& factor_key,
                              const std::vector<std::string>& values, int max_threads) {
    if (values.empty()) throw std::invalid_argument("sweep: no factor values");
    auto base_map = config_to_map(base);
    if (!base_map.count(factor_key))
        throw std::invalid_argument("sweep: unknown factor '" + factor_key + "'");

    Dataset train, test;
    if (base.dataset_kind == DatasetKind::IDX)
        load_idx_dir(base.dataset_path, train, test);
    else
        load_cifar_dir(base.dataset_path, train, test);

    std::vector<RunSummary> results;
    std::map<std::string, std::string> first_map;
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto kv = base_map;
        kv[factor_key] = values[i];
        std::string tag = values[i];
        for (auto& ch : tag)
            if (ch == '/' || ch == ' ' || ch == '&') ch = '_';
        kv["name"] = base.name + "_" + factor_key + "-" + tag;
        ExperimentConfig cfg = parse_config_map(kv);

        // one-factor isolation: everything except the factor (and the run
        // label) must match the first experiment
        auto probe = config_to_map(cfg);
        probe.erase("name");
        probe.erase("out");
        if (i == 0) {
            first_map = probe;
        } else {
            int diffs = 0;
            std::string diff_key;
            for (const auto& [k, v] : probe)
                if (first_map.at(k) != v) {
                    ++diffs;
                    diff_key = k;
                }
            if (diffs != 1 || diff_key != factor_key)
                throw std::logic_error("sweep: experiments differ in " + std::to_string(diffs) +
                                       " fields; expected exactly one (" + factor_key + ")");
        }

        RunSummary summary = run_experiment_on(cfg, train, test, max_threads);
        write_experiment_outputs(cfg, summary);
        results.push_back(std::move(summary));
    }
    return results;
}

}  // namespace bnn
