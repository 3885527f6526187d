#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sttn/data.hpp"
#include "sttn/synth.hpp"
#include "testutil.hpp"

using namespace sttn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

void corrupt_byte(const fs::path& p, size_t offset, uint8_t value) {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(std::streamoff(offset));
    f.write(reinterpret_cast<const char*>(&value), 1);
}

}  // namespace

TEST_CASE("synthetic IDX corpus parses as MNIST") {
    TempDir dir("sttn_test_idx");
    synth::write_digit_corpus_idx(dir.str(), 200, 50, 5);

    Dataset train = load_mnist_split(dir.str(), true);
    Dataset test = load_mnist_split(dir.str(), false);
    CHECK(train.count() == 200);
    CHECK(test.count() == 50);
    CHECK(train.channels == 1);
    CHECK(train.height == 28);
    CHECK(train.width == 28);
    for (int y : train.labels) CHECK((y >= 0 && y <= 9));
    // classes are balanced by construction
    std::array<int, 10> counts{};
    for (int y : train.labels) counts[size_t(y)]++;
    for (int c : counts) CHECK(c == 20);

    SUBCASE("images carry signal") {
        int64_t lit = 0;
        for (uint8_t p : train.pixels) lit += (p > 64);
        CHECK(lit > 200 * 20);  // at least ~20 bright pixels per glyph
    }
    SUBCASE("deterministic regeneration") {
        TempDir dir2("sttn_test_idx2");
        synth::write_digit_corpus_idx(dir2.str(), 200, 50, 5);
        Dataset again = load_mnist_split(dir2.str(), true);
        CHECK(again.pixels == train.pixels);
        CHECK(again.labels == train.labels);
    }
}

TEST_CASE("IDX parse errors carry offsets and expected magics") {
    TempDir dir("sttn_test_idx_err");
    synth::write_digit_corpus_idx(dir.str(), 10, 5, 6);

    SUBCASE("bad image magic names expected vs found") {
        corrupt_byte(dir.path / "train-images-idx3-ubyte", 2, 0x77);
        CHECK_THROWS_WITH_AS(load_mnist_split(dir.str(), true),
                             doctest::Contains("expected 0x00000803"), ParseError);
    }
    SUBCASE("bad label magic") {
        corrupt_byte(dir.path / "train-labels-idx1-ubyte", 3, 0x55);
        CHECK_THROWS_WITH_AS(load_mnist_split(dir.str(), true),
                             doctest::Contains("expected 0x00000801"), ParseError);
    }
    SUBCASE("truncated image file reports the offset") {
        fs::resize_file(dir.path / "train-images-idx3-ubyte", 16 + 3 * 784 + 100);
        CHECK_THROWS_WITH_AS(load_mnist_split(dir.str(), true), doctest::Contains("truncated"),
                             ParseError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_mnist_split(dir.str() + "/nope", true), ParseError);
    }
}

TEST_CASE("synthetic CIFAR corpus parses as 3073-byte records") {
    TempDir dir("sttn_test_cifar");
    synth::write_shape_corpus_cifar(dir.str(), 100, 40, 9);
    Dataset train = load_cifar10_split(dir.str(), true);
    Dataset test = load_cifar10_split(dir.str(), false);
    CHECK(train.count() == 100);
    CHECK(test.count() == 40);
    CHECK(train.channels == 3);
    CHECK(train.height == 32);

    SUBCASE("partial trailing record is an error") {
        std::ofstream f(dir.path / "test_batch.bin", std::ios::binary | std::ios::app);
        const char junk[10] = {};
        f.write(junk, sizeof junk);
        f.close();
        CHECK_THROWS_WITH_AS(load_cifar10_split(dir.str(), false), doctest::Contains("3073"),
                             ParseError);
    }
    SUBCASE("label out of range names the offset") {
        corrupt_byte(dir.path / "test_batch.bin", 0, 200);
        CHECK_THROWS_WITH_AS(load_cifar10_split(dir.str(), false), doctest::Contains("byte offset 0"),
                             ParseError);
    }
}

TEST_CASE("normalization statistics describe the train split") {
    TempDir dir("sttn_test_norm");
    synth::write_digit_corpus_idx(dir.str(), 100, 10, 8);
    Dataset train = load_mnist_split(dir.str(), true);
    NormStats ns = compute_norm_stats(train);
    REQUIRE(ns.mean.size() == 1);
    CHECK(ns.mean[0] > 0.f);
    CHECK(ns.mean[0] < 0.5f);  // mostly dark background
    CHECK(ns.stddev[0] > 0.01f);

    // a normalized batch has roughly zero mean under the train statistics
    std::vector<size_t> idx(train.count());
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::vector<int> labels;
    AugmentOptions no_aug;
    Tensor32 batch = make_batch(train, idx, ns, no_aug, nullptr, labels);
    double mean = 0;
    for (int64_t i = 0; i < batch.size(); ++i) mean += batch[i];
    mean /= double(batch.size());
    CHECK(std::abs(mean) < 1e-3);
}

TEST_CASE("augmentation is deterministic under a fixed seed and bounded by the pad") {
    TempDir dir("sttn_test_aug");
    synth::write_digit_corpus_idx(dir.str(), 20, 5, 10);
    Dataset train = load_mnist_split(dir.str(), true);
    NormStats ns = compute_norm_stats(train);
    std::vector<size_t> idx{0, 1, 2, 3};
    std::vector<int> labels;
    AugmentOptions aug{true, true, 2};

    Rng r1(7), r2(7), r3(8);
    Tensor32 a = make_batch(train, idx, ns, aug, &r1, labels);
    Tensor32 b = make_batch(train, idx, ns, aug, &r2, labels);
    Tensor32 c = make_batch(train, idx, ns, aug, &r3, labels);
    bool identical_ab = true, identical_ac = true;
    for (int64_t i = 0; i < a.size(); ++i) {
        identical_ab &= (a[i] == b[i]);
        identical_ac &= (a[i] == c[i]);
    }
    CHECK(identical_ab);
    CHECK(!identical_ac);  // different seed shifts crops
}
