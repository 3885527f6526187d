#include <doctest.h>

#include <bit>

#include "sttn/bitplane.hpp"
#include "sttn/ops.hpp"
#include "testutil.hpp"

using namespace sttn;
using namespace sttn::testutil;

namespace {

std::vector<int8_t> random_ternary(size_t n, Rng& rng, double zero_rate = 0.3) {
    std::vector<int8_t> v(n);
    for (auto& x : v) {
        const double u = rng.uniform();
        x = u < zero_rate ? 0 : (u < zero_rate + (1 - zero_rate) / 2 ? 1 : -1);
    }
    return v;
}

int64_t naive_dot(const std::vector<int8_t>& a, const std::vector<int8_t>& b) {
    int64_t acc = 0;
    for (size_t i = 0; i < a.size(); ++i) acc += int64_t(a[i]) * b[i];
    return acc;
}

}  // namespace

TEST_CASE("bitplane pack worked example") {
    std::vector<int8_t> x{1, 0, -1, 1};
    auto t = BitplaneTensor::pack(x);
    CHECK(t.size == 4);
    CHECK(t.mask[0] == 0b1101u);  // elements 0,2,3 nonzero (bit i = element i)
    CHECK(t.sign[0] == 0b1001u);  // elements 0,3 positive; sign bit 0 where mask 0
    CHECK(t.decode() == x);
    CHECK(t.nonzeros() == 3);
}

TEST_CASE("bitplane all-zeros and error cases") {
    std::vector<int8_t> z(100, 0);
    auto t = BitplaneTensor::pack(z);
    for (auto w : t.mask) CHECK(w == 0);
    CHECK(t.decode() == z);

    std::vector<int8_t> bad{1, 2};
    CHECK_THROWS_AS(BitplaneTensor::pack(bad), ValueError);
}

TEST_CASE("pack/decode round-trip across word-boundary lengths") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        const size_t n = 1 + rng.bounded(257);
        auto v = random_ternary(n, rng);
        auto t = BitplaneTensor::pack(v);
        CHECK(t.decode() == v);
        // tail padding bits of the mask stay zero
        if (n % 64) {
            const uint64_t tail = t.mask.back() >> (n % 64);
            CHECK(tail == 0);
        }
        int64_t nz = 0;
        for (auto x : v) nz += (x != 0);
        CHECK(t.nonzeros() == nz);
    }
}

TEST_CASE("ternary_dot worked examples") {
    auto a = BitplaneTensor::pack(std::vector<int8_t>{1, 0, -1, 1});
    auto b = BitplaneTensor::pack(std::vector<int8_t>{1, 1, -1, 0});
    CHECK(ternary_dot(a, b) == 2);

    auto z = BitplaneTensor::pack(std::vector<int8_t>{0, 0, 0, 0});
    CHECK(ternary_dot(a, z) == 0);
    CHECK(ternary_dot(a, a) == a.nonzeros());

    auto longer = BitplaneTensor::pack(std::vector<int8_t>{1, 0, -1, 1, 0});
    CHECK_THROWS_AS(ternary_dot(a, longer), ShapeError);
}

TEST_CASE("ternary_dot equals the naive integer dot") {
    Rng rng(32);
    for (int trial = 0; trial < 2000; ++trial) {
        const size_t n = 1 + rng.bounded(300);
        auto va = random_ternary(n, rng);
        auto vb = random_ternary(n, rng);
        CHECK(ternary_dot(BitplaneTensor::pack(va), BitplaneTensor::pack(vb)) == naive_dot(va, vb));
    }
}

TEST_CASE("fuse_pair worked examples") {
    SUBCASE("sign agreement and opposition") {
        std::vector<float> w1{1, -1, 1}, w2{1, 1, -1};
        auto k = fuse_pair(w1, w2, 3, 1, 1, 1, 0.5f);
        CHECK(k.t == std::vector<int8_t>{1, 0, 0});
        CHECK(k.scale == doctest::Approx(1.0));
    }
    SUBCASE("continuation of the shared-scale example") {
        std::vector<float> w1{0.4f, -0.6f}, w2{0.2f, 0.8f};
        auto k = fuse_pair(w1, w2, 2, 1, 1, 1, 0.5f);
        CHECK(k.scale == doctest::Approx(1.0));
        CHECK(k.t == std::vector<int8_t>{1, 0});
        // scale*t reproduces a*b1 + a*b2 exactly
        for (size_t i = 0; i < w1.size(); ++i) {
            const float branches = 0.5f * sgn(w1[i]) + 0.5f * sgn(w2[i]);
            CHECK(k.scale * float(k.t[i]) == branches);
        }
    }
    SUBCASE("identical branches collapse to binary") {
        std::vector<float> w{0.3f, -0.2f, 0.7f, -0.1f};
        auto k = fuse_pair(w, w, 4, 1, 1, 1, 0.4f);
        CHECK(k.sparsity() == 0.0);
        for (size_t i = 0; i < w.size(); ++i) CHECK(k.t[i] == (w[i] < 0 ? -1 : 1));
    }
}

TEST_CASE("sparsity equals the opposite-sign count") {
    Rng rng(33);
    std::vector<float> w1(200), w2(200);
    for (auto& v : w1) v = float(rng.gauss());
    for (auto& v : w2) v = float(rng.gauss());
    auto k = fuse_pair(w1, w2, 8, 25, 1, 1, 0.3f);
    int64_t opposite = 0;
    for (size_t i = 0; i < w1.size(); ++i) opposite += (sgn(w1[i]) != sgn(w2[i]));
    CHECK(int64_t(k.sparsity() * double(k.t.size()) + 0.5) == opposite);
    auto pk = pack_kernel(k);
    int64_t mask_pop = 0;
    for (auto wd : pk.mask) mask_pop += std::popcount(wd);
    CHECK(mask_pop == int64_t(k.t.size()) - opposite);
}

TEST_CASE("packed kernel round-trips") {
    Rng rng(34);
    TernaryKernel k;
    k.out_ch = 5;
    k.in_ch = 3;
    k.kh = k.kw = 3;
    k.scale = 0.7f;
    auto t = random_ternary(size_t(k.numel()), rng);
    k.t = t;
    auto pk = pack_kernel(k);
    auto back = unpack_kernel(pk);
    CHECK(back.t == t);
    CHECK(back.scale == k.scale);
}

TEST_CASE("ternary_conv2d constant case") {
    TernaryKernel k;
    k.out_ch = 2;
    k.in_ch = 3;
    k.kh = k.kw = 2;
    k.scale = 0.25f;
    k.t.assign(size_t(k.numel()), 1);
    std::vector<int8_t> img(3 * 4 * 4, 1);
    std::vector<int32_t> acc;
    std::vector<float> out;
    ternary_conv2d(pack_kernel(k), img.data(), 3, 4, 4, 1, 0, acc, out);
    for (int32_t a : acc) CHECK(a == 3 * 2 * 2);
    for (float v : out) CHECK(v == doctest::Approx(0.25f * 12));
}

TEST_CASE("ternary_conv2d dual oracle over random geometries") {
    Rng rng(35);
    for (int trial = 0; trial < 20; ++trial) {
        const int C = 1 + int(rng.bounded(8));
        const int F = 1 + int(rng.bounded(6));
        const int kh = 1 + int(rng.bounded(3));
        const int kw = 1 + int(rng.bounded(3));
        const int pad = int(rng.bounded(2));
        int H = kh + int(rng.bounded(8));
        int W = kw + int(rng.bounded(8));
        int stride = 1 + int(rng.bounded(2));
        // keep the geometry integral under the strict output-size rule
        H -= (H + 2 * pad - kh) % stride;
        W -= (W + 2 * pad - kw) % stride;
        if (H < kh || W < kw) {
            stride = 1;
            H = std::max(H, kh);
            W = std::max(W, kw);
        }

        TernaryKernel k;
        k.out_ch = F;
        k.in_ch = C;
        k.kh = kh;
        k.kw = kw;
        k.scale = float(0.1 + rng.uniform());
        k.t = random_ternary(size_t(k.numel()), rng);
        auto img = random_ternary(size_t(C) * H * W, rng);

        std::vector<int32_t> acc, acc_ref;
        std::vector<float> out;
        ternary_conv2d(pack_kernel(k), img.data(), C, H, W, stride, pad, acc, out);
        ternary_conv2d_naive(k, img.data(), C, H, W, stride, pad, acc_ref);
        REQUIRE(acc.size() == acc_ref.size());
        for (size_t i = 0; i < acc.size(); ++i) CHECK(acc[i] == acc_ref[i]);  // integer-exact

        // float conv on decoded values within 1e-5
        std::vector<float> xf(img.size()), wf(k.t.size());
        for (size_t i = 0; i < img.size(); ++i) xf[i] = float(img[i]);
        for (size_t i = 0; i < k.t.size(); ++i) wf[i] = float(k.t[i]);
        auto g = conv_geom<float>({1, C, H, W}, {F, C, kh, kw}, stride, pad);
        std::vector<float> ref(size_t(g.F) * g.P);
        conv2d_forward_raw(g, xf.data(), wf.data(), ref.data(), nullptr);
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(out[i] - k.scale * ref[i]) < 1e-5f);
    }
}

TEST_CASE("bench produces a report even at degenerate sizes") {
    auto row = bench_ternary_gemm(1, 1, 1, 3, 7);
    CHECK(row.m == 1);
    CHECK(row.packed_ms >= 0.0);
    CHECK(row.naive_ms >= 0.0);
}
