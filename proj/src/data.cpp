#include "sttn/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace sttn {

DatasetKind dataset_kind_from(const std::string& s) {
    if (s == "mnist_idx") return DatasetKind::mnist_idx;
    if (s == "cifar10_bin") return DatasetKind::cifar10_bin;
    throw ValueError("unknown dataset kind '" + s + "' (mnist_idx|cifar10_bin)");
}

const char* to_string(DatasetKind k) {
    return k == DatasetKind::mnist_idx ? "mnist_idx" : "cifar10_bin";
}

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    f.seekg(0, std::ios::end);
    const std::streamoff n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw ParseError("short read on '" + path + "'");
    return buf;
}

uint32_t read_be32(const std::vector<uint8_t>& buf, size_t off, const std::string& path) {
    if (off + 4 > buf.size())
        throw ParseError("'" + path + "': truncated at byte offset " + std::to_string(off) +
                         " (need 4 bytes)");
    return uint32_t(buf[off]) << 24 | uint32_t(buf[off + 1]) << 16 | uint32_t(buf[off + 2]) << 8 |
           uint32_t(buf[off + 3]);
}

std::string hex32(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

}  // namespace

Dataset load_mnist_split(const std::string& dir, bool train) {
    const std::string img_path = dir + (train ? "/train-images-idx3-ubyte" : "/t10k-images-idx3-ubyte");
    const std::string lbl_path = dir + (train ? "/train-labels-idx1-ubyte" : "/t10k-labels-idx1-ubyte");

    const auto img = read_file(img_path);
    const uint32_t img_magic = read_be32(img, 0, img_path);
    if (img_magic != 0x00000803u)
        throw ParseError("'" + img_path + "': bad image magic at byte offset 0: expected 0x00000803, found " +
                         hex32(img_magic));
    const uint32_t n = read_be32(img, 4, img_path);
    const uint32_t rows = read_be32(img, 8, img_path);
    const uint32_t cols = read_be32(img, 12, img_path);
    const size_t expect = 16 + size_t(n) * rows * cols;
    if (img.size() != expect)
        throw ParseError("'" + img_path + "': expected " + std::to_string(expect) + " bytes for " +
                         std::to_string(n) + " images of " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", file has " + std::to_string(img.size()) +
                         " (truncated at byte offset " + std::to_string(std::min(img.size(), expect)) + ")");

    const auto lbl = read_file(lbl_path);
    const uint32_t lbl_magic = read_be32(lbl, 0, lbl_path);
    if (lbl_magic != 0x00000801u)
        throw ParseError("'" + lbl_path + "': bad label magic at byte offset 0: expected 0x00000801, found " +
                         hex32(lbl_magic));
    const uint32_t ln = read_be32(lbl, 4, lbl_path);
    if (ln != n)
        throw ParseError("'" + lbl_path + "': label count " + std::to_string(ln) +
                         " does not match image count " + std::to_string(n));
    if (lbl.size() != 8 + size_t(ln))
        throw ParseError("'" + lbl_path + "': truncated at byte offset " + std::to_string(lbl.size()));

    Dataset ds;
    ds.channels = 1;
    ds.height = int(rows);
    ds.width = int(cols);
    ds.classes = 10;
    ds.pixels.assign(img.begin() + 16, img.end());
    ds.labels.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        const uint8_t y = lbl[8 + i];
        if (y > 9)
            throw ParseError("'" + lbl_path + "': label " + std::to_string(int(y)) +
                             " out of range at byte offset " + std::to_string(8 + i));
        ds.labels[i] = y;
    }
    return ds;
}

Dataset load_cifar10_split(const std::string& dir, bool train) {
    constexpr size_t kRecord = 3073;  // 1 label byte + 3*32*32 pixels
    Dataset ds;
    ds.channels = 3;
    ds.height = ds.width = 32;
    ds.classes = 10;
    std::vector<std::string> files;
    if (train)
        for (int i = 1; i <= 5; ++i) files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    else
        files.push_back(dir + "/test_batch.bin");

    for (const auto& path : files) {
        const auto buf = read_file(path);
        if (buf.size() % kRecord != 0)
            throw ParseError("'" + path + "': size " + std::to_string(buf.size()) +
                             " is not a multiple of the 3073-byte record; trailing partial record at byte offset " +
                             std::to_string(buf.size() - buf.size() % kRecord));
        const size_t n = buf.size() / kRecord;
        for (size_t i = 0; i < n; ++i) {
            const uint8_t y = buf[i * kRecord];
            if (y > 9)
                throw ParseError("'" + path + "': label " + std::to_string(int(y)) +
                                 " out of range at byte offset " + std::to_string(i * kRecord));
            ds.labels.push_back(y);
            ds.pixels.insert(ds.pixels.end(), buf.begin() + std::ptrdiff_t(i * kRecord + 1),
                             buf.begin() + std::ptrdiff_t((i + 1) * kRecord));
        }
    }
    return ds;
}

Dataset load_split(DatasetKind kind, const std::string& dir, bool train) {
    return kind == DatasetKind::mnist_idx ? load_mnist_split(dir, train) : load_cifar10_split(dir, train);
}

NormStats compute_norm_stats(const Dataset& train) {
    NormStats ns;
    const int C = train.channels;
    ns.mean.assign(size_t(C), 0.f);
    ns.stddev.assign(size_t(C), 1.f);
    const int64_t hw = int64_t(train.height) * train.width;
    const int64_t per_ch = int64_t(train.count()) * hw;
    if (per_ch == 0) return ns;
    std::vector<double> sum(size_t(C), 0.0), sq(size_t(C), 0.0);
    for (size_t i = 0; i < train.count(); ++i) {
        const uint8_t* px = train.sample(i);
        for (int c = 0; c < C; ++c)
            for (int64_t j = 0; j < hw; ++j) {
                const double v = double(px[c * hw + j]) / 255.0;
                sum[size_t(c)] += v;
                sq[size_t(c)] += v * v;
            }
    }
    for (int c = 0; c < C; ++c) {
        const double m = sum[size_t(c)] / double(per_ch);
        const double var = std::max(sq[size_t(c)] / double(per_ch) - m * m, 1e-8);
        ns.mean[size_t(c)] = float(m);
        ns.stddev[size_t(c)] = float(std::sqrt(var));
    }
    return ns;
}

Tensor32 make_batch(const Dataset& ds, std::span<const size_t> indices, const NormStats& ns,
                    const AugmentOptions& aug, Rng* rng, std::vector<int>& labels_out) {
    const int C = ds.channels, H = ds.height, W = ds.width;
    const int64_t hw = int64_t(H) * W;
    Tensor32 batch = Tensor32::zeros({int(indices.size()), C, H, W});
    labels_out.resize(indices.size());
    for (size_t bi = 0; bi < indices.size(); ++bi) {
        labels_out[bi] = ds.labels[indices[bi]];
        const uint8_t* px = ds.sample(indices[bi]);
        int dy = aug.pad, dx = aug.pad;
        bool flip = false;
        const bool do_aug = rng != nullptr;
        if (do_aug && aug.pad_crop) {
            dy = int(rng->bounded(uint64_t(2 * aug.pad + 1)));
            dx = int(rng->bounded(uint64_t(2 * aug.pad + 1)));
        }
        if (do_aug && aug.hflip) flip = rng->uniform() < 0.5;
        const bool crop = do_aug && aug.pad_crop;
        float* dst = batch.ptr() + int64_t(bi) * C * hw;
        for (int c = 0; c < C; ++c) {
            const float m = ns.mean[size_t(c)], s = ns.stddev[size_t(c)];
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    int sw = flip ? (W - 1 - w) : w;
                    float v = 0.f;
                    if (crop) {
                        // sample from the zero-padded image at offset (dy,dx)
                        const int sh = h + dy - aug.pad, sww = sw + dx - aug.pad;
                        if (sh >= 0 && sh < H && sww >= 0 && sww < W)
                            v = float(px[c * hw + int64_t(sh) * W + sww]) / 255.f;
                    } else {
                        v = float(px[c * hw + int64_t(h) * W + sw]) / 255.f;
                    }
                    dst[c * hw + int64_t(h) * W + w] = (v - m) / s;
                }
        }
    }
    return batch;
}

}  // namespace sttn
