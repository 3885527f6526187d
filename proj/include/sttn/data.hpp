#pragma once

#include <span>
#include <string>
#include <vector>

#include "sttn/tensor.hpp"

namespace sttn {

enum class DatasetKind { mnist_idx, cifar10_bin };

DatasetKind dataset_kind_from(const std::string& s);
const char* to_string(DatasetKind k);

struct Dataset {
    int channels = 0, height = 0, width = 0, classes = 10;
    std::vector<uint8_t> pixels;  // count * channels*height*width, row-major
    std::vector<int> labels;

    size_t count() const { return labels.size(); }
    int64_t sample_size() const { return int64_t(channels) * height * width; }
    const uint8_t* sample(size_t i) const { return pixels.data() + int64_t(i) * sample_size(); }
};

// MNIST IDX files: big-endian magic 0x00000803 (images) / 0x00000801 (labels).
Dataset load_mnist_split(const std::string& dir, bool train);
// CIFAR-10 binary batches: 3073-byte records, 1 label byte + 3072 pixel bytes.
Dataset load_cifar10_split(const std::string& dir, bool train);
Dataset load_split(DatasetKind kind, const std::string& dir, bool train);

// Per-channel mean/std of pixels scaled to [0,1], computed on the train split.
struct NormStats {
    std::vector<float> mean, stddev;
};
NormStats compute_norm_stats(const Dataset& train);

struct AugmentOptions {
    bool pad_crop = false;
    bool hflip = false;
    int pad = 2;
};

// Normalized float batch for the given sample indices. Augmentation is
// applied only when an RNG is supplied (training path).
Tensor32 make_batch(const Dataset& ds, std::span<const size_t> indices, const NormStats& ns,
                    const AugmentOptions& aug, Rng* rng, std::vector<int>& labels_out);

}  // namespace sttn
