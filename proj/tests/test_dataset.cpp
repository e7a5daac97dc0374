#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "bnn/dataset.hpp"
#include "test_util.hpp"

using namespace bnn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("bnnkit_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Dataset tiny_dataset(int n, int h, int w) {
    Dataset ds;
    ds.images = Tensor({n, 1, h, w});
    ds.labels.resize(static_cast<std::size_t>(n));
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> pix(0, 255);
    for (auto& v : ds.images.data) v = pix(rng) / 255.0;
    for (int i = 0; i < n; ++i) ds.labels[static_cast<std::size_t>(i)] = i % 10;
    ds.num_classes = 10;
    return ds;
}

}  // namespace

TEST_CASE("IDX fixture round trip") {
    TempDir tmp;
    const auto img = (tmp.path / "images").string();
    const auto lab = (tmp.path / "labels").string();
    Dataset ds = tiny_dataset(4, 5, 6);
    write_idx(img, lab, ds);
    const Dataset back = load_idx(img, lab);
    CHECK(back.images.shape == Shape{4, 1, 5, 6});
    CHECK(back.labels.size() == 4);
    CHECK(back.labels == ds.labels);
    CHECK(back.images.data == ds.images.data);  // both live on the u8 grid
}

TEST_CASE("IDX loader reports format errors with offsets") {
    TempDir tmp;
    const auto img = (tmp.path / "images").string();
    const auto lab = (tmp.path / "labels").string();
    Dataset ds = tiny_dataset(4, 5, 6);
    write_idx(img, lab, ds);

    SUBCASE("bad magic") {
        std::ofstream f(tmp.path / "bad", std::ios::binary);
        f.write("\x00\x00\x08\x77", 4);
        f.close();
        CHECK_THROWS_AS(load_idx((tmp.path / "bad").string(), lab), std::runtime_error);
    }
    SUBCASE("truncated image payload") {
        std::ifstream in(img, std::ios::binary);
        std::vector<char> buf((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(tmp.path / "trunc", std::ios::binary);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size() - 10));
        out.close();
        CHECK_THROWS_AS(load_idx((tmp.path / "trunc").string(), lab), std::runtime_error);
    }
    SUBCASE("image/label count mismatch") {
        Dataset ds3 = tiny_dataset(3, 5, 6);
        const auto lab3 = (tmp.path / "labels3").string();
        write_idx((tmp.path / "img3").string(), lab3, ds3);
        CHECK_THROWS_WITH_AS(load_idx(img, lab3), "IDX pairing error: 4 images vs 3 labels",
                             std::runtime_error);
    }
}

TEST_CASE("CIFAR binary round trip and errors") {
    TempDir tmp;
    const auto path = (tmp.path / "batch.bin").string();
    std::mt19937_64 rng(9);
    std::vector<std::uint8_t> raw;
    std::vector<int> labels{3, 9};
    for (int rec = 0; rec < 2; ++rec) {
        raw.push_back(static_cast<std::uint8_t>(labels[rec]));
        for (int i = 0; i < 3072; ++i) raw.push_back(static_cast<std::uint8_t>(rng() % 256));
    }
    {
        std::ofstream f(path, std::ios::binary);
        f.write(reinterpret_cast<const char*>(raw.data()),
                static_cast<std::streamsize>(raw.size()));
    }
    const Dataset ds = load_cifar_bin({path});
    CHECK(ds.images.shape == Shape{2, 3, 32, 32});
    CHECK(ds.labels == labels);
    CHECK(ds.images.data[0] == doctest::Approx(raw[1] / 255.0));
    // channel-major: pixel (c=2,y=0,x=0) of record 0 sits at byte 1 + 2*1024
    CHECK(ds.images.at(0, 2, 0, 0) == doctest::Approx(raw[1 + 2048] / 255.0));

    {
        std::ofstream f(tmp.path / "short.bin", std::ios::binary);
        f.write(reinterpret_cast<const char*>(raw.data()), 3000);
    }
    CHECK_THROWS_AS(load_cifar_bin({(tmp.path / "short.bin").string()}), std::runtime_error);
}

TEST_CASE("augment: all flags off is an identity") {
    std::mt19937_64 rng(11);
    auto batch = testutil::random_tensor({3, 1, 8, 8}, rng, 0, 1);
    const auto before = batch->data;
    AugmentOptions off;
    augment(*batch, off, rng);
    CHECK(batch->data == before);
}

TEST_CASE("augment: flip is an involution under the same rng draw") {
    std::mt19937_64 rng(13);
    auto batch = testutil::random_tensor({4, 1, 6, 6}, rng, 0, 1);
    const auto before = batch->data;
    AugmentOptions flip;
    flip.flip = true;
    std::mt19937_64 r1(99), r2(99);
    augment(*batch, flip, r1);
    augment(*batch, flip, r2);
    CHECK(batch->data == before);
}

TEST_CASE("augment: crop preserves the input shape") {
    std::mt19937_64 rng(15);
    auto batch = testutil::random_tensor({2, 3, 32, 32}, rng, 0, 1);
    AugmentOptions crop;
    crop.crop = true;
    const Shape before = batch->shape;
    augment(*batch, crop, rng);
    CHECK(batch->shape == before);
}

TEST_CASE("augment: normalization applies the dataset statistics") {
    Dataset ds = tiny_dataset(32, 8, 8);
    const DatasetStats stats = compute_stats(ds);
    CHECK(stats.mean.size() == 1);
    CHECK(stats.stddev[0] > 0);

    Tensor batch = ds.images;
    AugmentOptions norm;
    norm.normalize = true;
    norm.stats = stats;
    std::mt19937_64 rng(17);
    augment(batch, norm, rng);
    double acc = 0, acc2 = 0;
    for (double v : batch.data) {
        acc += v;
        acc2 += v * v;
    }
    const double mean = acc / batch.size();
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::sqrt(acc2 / batch.size() - mean * mean) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("synthetic digits: deterministic, balanced, on the u8 grid") {
    SynthOptions opts;
    opts.train_count = 100;
    opts.test_count = 40;
    opts.seed = 5;
    Dataset train1, test1, train2, test2;
    generate_synthetic_digits(opts, train1, test1);
    generate_synthetic_digits(opts, train2, test2);
    CHECK(train1.images.data == train2.images.data);
    CHECK(train1.labels == train2.labels);
    CHECK(train1.images.shape == Shape{100, 1, 28, 28});
    CHECK(test1.images.shape == Shape{40, 1, 28, 28});

    std::vector<int> counts(10, 0);
    for (int l : train1.labels) counts[static_cast<std::size_t>(l)]++;
    for (int c : counts) CHECK(c == 10);

    for (double v : train1.images.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v * 255.0 == doctest::Approx(std::lround(v * 255.0)).epsilon(1e-9));
    }

    // IDX round trip is exact for the generator's output
    TempDir tmp;
    write_idx((tmp.path / "img").string(), (tmp.path / "lab").string(), train1);
    const Dataset back = load_idx((tmp.path / "img").string(), (tmp.path / "lab").string());
    CHECK(back.images.data == train1.images.data);
}

TEST_CASE("load_idx_dir finds standard file names") {
    TempDir tmp;
    SynthOptions opts;
    opts.train_count = 20;
    opts.test_count = 10;
    Dataset train, test;
    generate_synthetic_digits(opts, train, test);
    write_idx((tmp.path / "train-images-idx3-ubyte").string(),
              (tmp.path / "train-labels-idx1-ubyte").string(), train);
    write_idx((tmp.path / "t10k-images-idx3-ubyte").string(),
              (tmp.path / "t10k-labels-idx1-ubyte").string(), test);
    Dataset tr, te;
    load_idx_dir(tmp.path.string(), tr, te);
    CHECK(tr.count() == 20);
    CHECK(te.count() == 10);
}
