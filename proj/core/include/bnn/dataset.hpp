#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bnn/tensor.hpp"

namespace bnn {

struct Dataset {
    Tensor images;  // [N,C,H,W], values in [0,1]
    std::vector<int> labels;
    int num_classes = 10;

    int count() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

/// Big-endian IDX pair: image magic 0x00000803 (u8, dims N,H,W), label magic
/// 0x00000801. Pixels are scaled to [0,1]; images come out as [N,1,H,W].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes a single-channel dataset as an IDX pair, quantizing pixels to u8.
void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& ds);

/// Looks for train/test IDX pairs in a directory, accepting both the
/// `train-images-idx3-ubyte` and `t10k-*` spellings for the test split.
void load_idx_dir(const std::string& dir, Dataset& train, Dataset& test);

/// CIFAR binary records: 1 label byte + 3072 channel-major pixel bytes.
Dataset load_cifar_bin(const std::vector<std::string>& record_files);
void load_cifar_dir(const std::string& dir, Dataset& train, Dataset& test);

struct DatasetStats {
    std::vector<double> mean, stddev;  // per channel
};
DatasetStats compute_stats(const Dataset& ds);

struct AugmentOptions {
    bool flip = false;
    bool crop = false;
    bool normalize = false;
    int crop_pad = 4;
    DatasetStats stats;
};

/// In-place batch augmentation: per-image horizontal flip with p = 0.5,
/// crop_pad-pixel zero pad followed by a random crop back to the original
/// extent, then per-channel mean/std normalization.
void augment(Tensor& batch, const AugmentOptions& opts, std::mt19937_64& rng);

struct SynthOptions {
    int train_count = 1024;
    int test_count = 512;
    std::uint64_t seed = 1;
    double noise = 0.08;
    int jitter = 3;
    double min_intensity = 0.75;
};

/// Deterministic 10-class glyph dataset of 28x28 grayscale images, for
/// desk-scale training runs. Pixels are quantized to the u8 grid so an IDX
/// round trip is exact.
void generate_synthetic_digits(const SynthOptions& opts, Dataset& train, Dataset& test);

}  // namespace bnn
