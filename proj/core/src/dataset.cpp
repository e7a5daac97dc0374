#include "bnn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace bnn {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off,
                        const std::string& path) {
    if (off + 4 > buf.size())
        throw std::runtime_error("IDX format error in '" + path + "': truncated at byte offset " +
                                 std::to_string(off));
    return (static_cast<std::uint32_t>(buf[off]) << 24) |
           (static_cast<std::uint32_t>(buf[off + 1]) << 16) |
           (static_cast<std::uint32_t>(buf[off + 2]) << 8) |
           static_cast<std::uint32_t>(buf[off + 3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                           static_cast<char>(v >> 8), static_cast<char>(v)};
    out.write(bytes, 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = read_file(images_path);
    if (read_be32(img, 0, images_path) != 0x00000803u)
        throw std::runtime_error("IDX format error in '" + images_path +
                                 "': bad image magic at byte offset 0");
    const std::uint32_t n = read_be32(img, 4, images_path);
    const std::uint32_t h = read_be32(img, 8, images_path);
    const std::uint32_t w = read_be32(img, 12, images_path);
    const std::size_t expected = 16 + static_cast<std::size_t>(n) * h * w;
    if (img.size() < expected)
        throw std::runtime_error("IDX format error in '" + images_path +
                                 "': truncated at byte offset " + std::to_string(img.size()));

    const auto lab = read_file(labels_path);
    if (read_be32(lab, 0, labels_path) != 0x00000801u)
        throw std::runtime_error("IDX format error in '" + labels_path +
                                 "': bad label magic at byte offset 0");
    const std::uint32_t ln = read_be32(lab, 4, labels_path);
    if (lab.size() < 8 + ln)
        throw std::runtime_error("IDX format error in '" + labels_path +
                                 "': truncated at byte offset " + std::to_string(lab.size()));
    if (ln != n)
        throw std::runtime_error("IDX pairing error: " + std::to_string(n) + " images vs " +
                                 std::to_string(ln) + " labels");

    Dataset ds;
    ds.images = Tensor({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)});
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * h * w; ++i)
        ds.images.data[i] = img[16 + i] / 255.0;
    ds.labels.resize(n);
    int max_label = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        ds.labels[i] = lab[8 + i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& ds) {
    if (ds.images.shape[1] != 1)
        throw std::invalid_argument("write_idx: only single-channel datasets are supported");
    const int n = ds.images.shape[0], h = ds.images.shape[2], w = ds.images.shape[3];
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("cannot write '" + images_path + "'");
    write_be32(img, 0x00000803u);
    write_be32(img, static_cast<std::uint32_t>(n));
    write_be32(img, static_cast<std::uint32_t>(h));
    write_be32(img, static_cast<std::uint32_t>(w));
    for (double v : ds.images.data) {
        const double c = std::min(1.0, std::max(0.0, v));
        const char byte = static_cast<char>(static_cast<int>(std::lround(c * 255.0)));
        img.write(&byte, 1);
    }
    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("cannot write '" + labels_path + "'");
    write_be32(lab, 0x00000801u);
    write_be32(lab, static_cast<std::uint32_t>(n));
    for (int l : ds.labels) {
        const char byte = static_cast<char>(l);
        lab.write(&byte, 1);
    }
}

void load_idx_dir(const std::string& dir, Dataset& train, Dataset& test) {
    namespace fs = std::filesystem;
    auto pick = [&dir](std::initializer_list<const char*> names) -> std::string {
        for (const char* n : names) {
            const fs::path p = fs::path(dir) / n;
            if (fs::exists(p)) return p.string();
        }
        throw std::runtime_error("no IDX file found in '" + dir + "' (tried " +
                                 std::string(*names.begin()) + ")");
    };
    train = load_idx(pick({"train-images-idx3-ubyte", "train-images.idx3-ubyte"}),
                     pick({"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"}));
    test = load_idx(pick({"test-images-idx3-ubyte", "t10k-images-idx3-ubyte",
                          "test-images.idx3-ubyte"}),
                    pick({"test-labels-idx1-ubyte", "t10k-labels-idx1-ubyte",
                          "test-labels.idx1-ubyte"}));
}

Dataset load_cifar_bin(const std::vector<std::string>& record_files) {
    constexpr std::size_t kRecord = 3073;
    Dataset ds;
    std::vector<std::uint8_t> all;
    for (const auto& path : record_files) {
        const auto buf = read_file(path);
        if (buf.size() % kRecord != 0)
            throw std::runtime_error("CIFAR format error in '" + path + "': size " +
                                     std::to_string(buf.size()) + " is not a multiple of 3073");
        all.insert(all.end(), buf.begin(), buf.end());
    }
    const std::size_t n = all.size() / kRecord;
    ds.images = Tensor({static_cast<int>(n), 3, 32, 32});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* rec = all.data() + i * kRecord;
        ds.labels[i] = rec[0];
        for (std::size_t j = 0; j < 3072; ++j)
            ds.images.data[i * 3072 + j] = rec[1 + j] / 255.0;
    }
    ds.num_classes = 10;
    return ds;
}

void load_cifar_dir(const std::string& dir, Dataset& train, Dataset& test) {
    namespace fs = std::filesystem;
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) {
        const fs::path p = fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin");
        if (fs::exists(p)) train_files.push_back(p.string());
    }
    if (train_files.empty())
        throw std::runtime_error("no data_batch_*.bin files in '" + dir + "'");
    train = load_cifar_bin(train_files);
    test = load_cifar_bin({(fs::path(dir) / "test_batch.bin").string()});
}

DatasetStats compute_stats(const Dataset& ds) {
    const int c = ds.images.shape[1];
    const std::int64_t per = static_cast<std::int64_t>(ds.images.shape[2]) * ds.images.shape[3];
    DatasetStats stats;
    stats.mean.assign(static_cast<std::size_t>(c), 0.0);
    stats.stddev.assign(static_cast<std::size_t>(c), 1.0);
    const int n = ds.count();
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0, acc2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* base =
                ds.images.data.data() + (static_cast<std::int64_t>(i) * c + ch) * per;
            for (std::int64_t k = 0; k < per; ++k) {
                acc += base[k];
                acc2 += base[k] * base[k];
            }
        }
        const double m = static_cast<double>(n) * per;
        const double mean = acc / m;
        const double var = std::max(0.0, acc2 / m - mean * mean);
        stats.mean[ch] = mean;
        stats.stddev[ch] = std::max(std::sqrt(var), 1e-12);
    }
    return stats;
}

void augment(Tensor& batch, const AugmentOptions& opts, std::mt19937_64& rng) {
    const int n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::vector<double> padded;
    for (int i = 0; i < n; ++i) {
        double* img = batch.data.data() + static_cast<std::int64_t>(i) * c * h * w;
        if (opts.flip && coin(rng) < 0.5) {
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y) {
                    double* row = img + (static_cast<std::int64_t>(ch) * h + y) * w;
                    std::reverse(row, row + w);
                }
        }
        if (opts.crop) {
            const int p = opts.crop_pad;
            std::uniform_int_distribution<int> off(0, 2 * p);
            const int dy = off(rng), dx = off(rng);
            const int ph = h + 2 * p, pw = w + 2 * p;
            padded.assign(static_cast<std::size_t>(c) * ph * pw, 0.0);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    std::memcpy(padded.data() + (static_cast<std::int64_t>(ch) * ph + y + p) * pw + p,
                                img + (static_cast<std::int64_t>(ch) * h + y) * w,
                                sizeof(double) * static_cast<std::size_t>(w));
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    std::memcpy(img + (static_cast<std::int64_t>(ch) * h + y) * w,
                                padded.data() + (static_cast<std::int64_t>(ch) * ph + y + dy) * pw + dx,
                                sizeof(double) * static_cast<std::size_t>(w));
        }
    }
    if (opts.normalize) {
        if (static_cast<int>(opts.stats.mean.size()) != c)
            throw std::invalid_argument("augment: normalization stats do not match channels");
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                double* base =
                    batch.data.data() + (static_cast<std::int64_t>(i) * c + ch) * h * w;
                const double m = opts.stats.mean[ch], s = opts.stats.stddev[ch];
                for (std::int64_t k = 0; k < static_cast<std::int64_t>(h) * w; ++k)
                    base[k] = (base[k] - m) / s;
            }
    }
}

namespace {

// 8x8 glyphs, one per class, rendered 2x into 28x28 frames.
const char* const kGlyphs[10][8] = {
    {"..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####..", "........"},
    {"...##...", "..###...", "...##...", "...##...", "...##...", "...##...", ".######.", "........"},
    {"..####..", ".##..##.", ".....##.", "...###..", "..##....", ".##.....", ".######.", "........"},
    {"..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".##..##.", "..####..", "........"},
    {"....###.", "...####.", "..##.##.", ".##..##.", ".#######", ".....##.", ".....##.", "........"},
    {".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........"},
    {"..####..", ".##.....", ".##.....", ".#####..", ".##..##.", ".##..##.", "..####..", "........"},
    {".######.", ".....##.", "....##..", "...##...", "..##....", "..##....", "..##....", "........"},
    {"..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........"},
    {"..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", ".....##.", "..####..", "........"},
};

void render_split(Dataset& ds, int count, const SynthOptions& opts, std::mt19937_64& rng) {
    constexpr int kSize = 28, kScale = 2, kGlyph = 8;
    ds.images = Tensor({count, 1, kSize, kSize});
    ds.labels.resize(static_cast<std::size_t>(count));
    ds.num_classes = 10;

    std::uniform_int_distribution<int> jitter(-opts.jitter, opts.jitter);
    std::uniform_real_distribution<double> intensity(opts.min_intensity, 1.0);
    std::normal_distribution<double> noise(0.0, opts.noise);
    std::vector<int> order(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i % 10;
    std::shuffle(order.begin(), order.end(), rng);

    for (int i = 0; i < count; ++i) {
        const int cls = order[static_cast<std::size_t>(i)];
        ds.labels[static_cast<std::size_t>(i)] = cls;
        double* img = ds.images.data.data() + static_cast<std::int64_t>(i) * kSize * kSize;
        const int base = (kSize - kGlyph * kScale) / 2;
        const int oy = base + jitter(rng), ox = base + jitter(rng);
        const double amp = intensity(rng);
        for (int gy = 0; gy < kGlyph; ++gy)
            for (int gx = 0; gx < kGlyph; ++gx) {
                if (kGlyphs[cls][gy][gx] != '#') continue;
                for (int sy = 0; sy < kScale; ++sy)
                    for (int sx = 0; sx < kScale; ++sx) {
                        const int y = oy + gy * kScale + sy, x = ox + gx * kScale + sx;
                        if (y >= 0 && y < kSize && x >= 0 && x < kSize)
                            img[y * kSize + x] = amp;
                    }
            }
        for (int p = 0; p < kSize * kSize; ++p) {
            const double v = std::min(1.0, std::max(0.0, img[p] + noise(rng)));
            img[p] = std::lround(v * 255.0) / 255.0;  // snap to the u8 grid
        }
    }
}

}  // namespace

void generate_synthetic_digits(const SynthOptions& opts, Dataset& train, Dataset& test) {
    std::mt19937_64 rng(opts.seed);
    render_split(train, opts.train_count, opts, rng);
    render_split(test, opts.test_count, opts, rng);
}

}  // namespace bnn
