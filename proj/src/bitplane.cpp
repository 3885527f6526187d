#include "sttn/bitplane.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>

namespace sttn {

namespace {
inline int64_t word_count(int64_t bits) { return (bits + 63) / 64; }
}

BitplaneTensor BitplaneTensor::pack(std::span<const int8_t> x) {
    BitplaneTensor t;
    t.size = int64_t(x.size());
    t.mask.assign(size_t(word_count(t.size)), 0);
    t.sign.assign(size_t(word_count(t.size)), 0);
    for (int64_t i = 0; i < t.size; ++i) {
        const int8_t v = x[size_t(i)];
        if (v < -1 || v > 1)
            throw ValueError("bitplane pack: entry " + std::to_string(int(v)) + " at index " +
                             std::to_string(i) + " is not ternary");
        if (v != 0) {
            t.mask[size_t(i >> 6)] |= uint64_t(1) << (i & 63);
            if (v > 0) t.sign[size_t(i >> 6)] |= uint64_t(1) << (i & 63);
        }
    }
    return t;
}

std::vector<int8_t> BitplaneTensor::decode() const {
    std::vector<int8_t> out(size_t(size), 0);
    for (int64_t i = 0; i < size; ++i) {
        if (mask[size_t(i >> 6)] >> (i & 63) & 1)
            out[size_t(i)] = (sign[size_t(i >> 6)] >> (i & 63) & 1) ? int8_t(1) : int8_t(-1);
    }
    return out;
}

int64_t BitplaneTensor::nonzeros() const {
    int64_t n = 0;
    for (uint64_t w : mask) n += std::popcount(w);
    return n;
}

int64_t ternary_dot(const BitplaneTensor& a, const BitplaneTensor& b) {
    if (a.size != b.size)
        throw ShapeError("ternary_dot length mismatch: " + std::to_string(a.size) + " vs " +
                         std::to_string(b.size));
    int64_t acc = 0;
    for (size_t w = 0; w < a.mask.size(); ++w) {
        const uint64_t m = a.mask[w] & b.mask[w];
        const uint64_t agree = ~(a.sign[w] ^ b.sign[w]);
        acc += 2 * std::popcount(m & agree) - std::popcount(m);
    }
    return acc;
}

double TernaryKernel::sparsity() const {
    int64_t zeros = 0;
    for (int8_t v : t) zeros += (v == 0);
    return t.empty() ? 0.0 : double(zeros) / double(t.size());
}

TernaryKernel fuse_pair(std::span<const float> w1, std::span<const float> w2, int out_ch, int in_ch,
                        int kh, int kw, float alpha) {
    const size_t n = size_t(out_ch) * in_ch * kh * kw;
    if (w1.size() != n || w2.size() != n) throw ShapeError("fuse_pair: kernel size mismatch");
    TernaryKernel k;
    k.out_ch = out_ch;
    k.in_ch = in_ch;
    k.kh = kh;
    k.kw = kw;
    k.scale = 2.f * alpha;
    k.t.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const int s1 = w1[i] < 0.f ? -1 : 1;
        const int s2 = w2[i] < 0.f ? -1 : 1;
        k.t[i] = int8_t((s1 + s2) / 2);
    }
    return k;
}

PackedTernaryKernel pack_kernel(const TernaryKernel& k) {
    PackedTernaryKernel pk;
    pk.out_ch = k.out_ch;
    pk.in_ch = k.in_ch;
    pk.kh = k.kh;
    pk.kw = k.kw;
    pk.k_len = int64_t(k.in_ch) * k.kh * k.kw;
    pk.words_per_filter = int(word_count(pk.k_len));
    pk.scale = k.scale;
    pk.mask.assign(size_t(k.out_ch) * pk.words_per_filter, 0);
    pk.sign.assign(size_t(k.out_ch) * pk.words_per_filter, 0);
    for (int f = 0; f < k.out_ch; ++f) {
        BitplaneTensor row = BitplaneTensor::pack({k.t.data() + size_t(f) * pk.k_len, size_t(pk.k_len)});
        std::copy(row.mask.begin(), row.mask.end(), pk.mask.begin() + size_t(f) * pk.words_per_filter);
        std::copy(row.sign.begin(), row.sign.end(), pk.sign.begin() + size_t(f) * pk.words_per_filter);
    }
    return pk;
}

TernaryKernel unpack_kernel(const PackedTernaryKernel& pk) {
    TernaryKernel k;
    k.out_ch = pk.out_ch;
    k.in_ch = pk.in_ch;
    k.kh = pk.kh;
    k.kw = pk.kw;
    k.scale = pk.scale;
    k.t.assign(size_t(pk.out_ch) * pk.k_len, 0);
    for (int f = 0; f < pk.out_ch; ++f) {
        BitplaneTensor row;
        row.size = pk.k_len;
        row.mask.assign(pk.mask.begin() + size_t(f) * pk.words_per_filter,
                        pk.mask.begin() + size_t(f + 1) * pk.words_per_filter);
        row.sign.assign(pk.sign.begin() + size_t(f) * pk.words_per_filter,
                        pk.sign.begin() + size_t(f + 1) * pk.words_per_filter);
        auto dec = row.decode();
        std::copy(dec.begin(), dec.end(), k.t.begin() + size_t(f) * pk.k_len);
    }
    return k;
}

PackedPatchMatrix pack_patches(const int8_t* img, int C, int H, int W, int kh, int kw, int stride,
                               int pad) {
    const int OH = conv_out_dim(H, kh, stride, pad);
    const int OW = conv_out_dim(W, kw, stride, pad);
    PackedPatchMatrix pm;
    pm.positions = int64_t(OH) * OW;
    pm.k_len = int64_t(C) * kh * kw;
    pm.words_per_row = int(word_count(pm.k_len));
    pm.mask.assign(size_t(pm.positions) * pm.words_per_row, 0);
    pm.sign.assign(size_t(pm.positions) * pm.words_per_row, 0);
    int64_t p = 0;
    for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow, ++p) {
            uint64_t* mrow = pm.mask.data() + size_t(p) * pm.words_per_row;
            uint64_t* srow = pm.sign.data() + size_t(p) * pm.words_per_row;
            int64_t k = 0;
            for (int c = 0; c < C; ++c) {
                const int8_t* plane = img + int64_t(c) * H * W;
                for (int r = 0; r < kh; ++r) {
                    const int ih = oh * stride - pad + r;
                    for (int s = 0; s < kw; ++s, ++k) {
                        if (ih < 0 || ih >= H) continue;
                        const int iw = ow * stride - pad + s;
                        if (iw < 0 || iw >= W) continue;
                        const int8_t v = plane[ih * W + iw];
                        if (v < -1 || v > 1) throw ValueError("pack_patches: non-ternary activation");
                        if (v != 0) {
                            mrow[k >> 6] |= uint64_t(1) << (k & 63);
                            if (v > 0) srow[k >> 6] |= uint64_t(1) << (k & 63);
                        }
                    }
                }
            }
        }
    }
    return pm;
}

void ternary_gemm(const PackedTernaryKernel& a, const PackedPatchMatrix& b, int32_t* out) {
    if (a.k_len != b.k_len) throw ShapeError("ternary_gemm: inner length mismatch");
    const int wpr = a.words_per_filter;
    const int64_t N = b.positions;
    for (int f = 0; f < a.out_ch; ++f) {
        const uint64_t* fm = a.mask.data() + size_t(f) * wpr;
        const uint64_t* fs = a.sign.data() + size_t(f) * wpr;
        int32_t* crow = out + int64_t(f) * N;
        for (int64_t p = 0; p < N; ++p) {
            const uint64_t* pm = b.mask.data() + size_t(p) * wpr;
            const uint64_t* ps = b.sign.data() + size_t(p) * wpr;
            int32_t acc = 0;
            for (int w = 0; w < wpr; ++w) {
                const uint64_t m = fm[w] & pm[w];
                const uint64_t agree = ~(fs[w] ^ ps[w]);
                acc += 2 * std::popcount(m & agree) - std::popcount(m);
            }
            crow[p] = acc;
        }
    }
}

void ternary_conv2d(const PackedTernaryKernel& k, const int8_t* img, int C, int H, int W, int stride,
                    int pad, std::vector<int32_t>& acc, std::vector<float>& out) {
    if (C != k.in_ch) throw ShapeError("ternary_conv2d: channel mismatch");
    PackedPatchMatrix pm = pack_patches(img, C, H, W, k.kh, k.kw, stride, pad);
    acc.assign(size_t(k.out_ch) * pm.positions, 0);
    ternary_gemm(k, pm, acc.data());
    out.resize(acc.size());
    for (size_t i = 0; i < acc.size(); ++i) out[i] = k.scale * float(acc[i]);
}

void ternary_conv2d_naive(const TernaryKernel& k, const int8_t* img, int C, int H, int W, int stride,
                          int pad, std::vector<int32_t>& acc) {
    const int OH = conv_out_dim(H, k.kh, stride, pad);
    const int OW = conv_out_dim(W, k.kw, stride, pad);
    acc.assign(size_t(k.out_ch) * OH * OW, 0);
    for (int f = 0; f < k.out_ch; ++f)
        for (int oh = 0; oh < OH; ++oh)
            for (int ow = 0; ow < OW; ++ow) {
                int32_t s = 0;
                for (int c = 0; c < C; ++c)
                    for (int r = 0; r < k.kh; ++r)
                        for (int q = 0; q < k.kw; ++q) {
                            const int ih = oh * stride - pad + r;
                            const int iw = ow * stride - pad + q;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            const int8_t kv = k.t[((size_t(f) * C + c) * k.kh + r) * k.kw + q];
                            if (kv == 0) continue;
                            s += kv * img[(int64_t(c) * H + ih) * W + iw];
                        }
                acc[(size_t(f) * OH + oh) * OW + ow] = s;
            }
}

BenchRow bench_ternary_gemm(int m, int k, int n, int reps, uint64_t seed) {
    using clock = std::chrono::steady_clock;
    Rng rng(seed);

    // random ternary operands, mild sparsity like a fused kernel
    TernaryKernel tk;
    tk.out_ch = m;
    tk.in_ch = k;
    tk.kh = 1;
    tk.kw = 1;
    tk.scale = 1.f;
    tk.t.resize(size_t(m) * k);
    for (auto& v : tk.t) {
        const double u = rng.uniform();
        v = u < 0.25 ? int8_t(0) : (u < 0.625 ? int8_t(1) : int8_t(-1));
    }
    std::vector<int8_t> act(size_t(k) * n);
    for (auto& v : act) {
        const double u = rng.uniform();
        v = u < 0.25 ? int8_t(0) : (u < 0.625 ? int8_t(1) : int8_t(-1));
    }

    PackedTernaryKernel pk = pack_kernel(tk);

    // activations viewed as an image of shape [k, 1, n] under a 1x1 kernel:
    // the patch matrix is exactly the [k, n] operand, packed per position
    std::vector<int32_t> acc(size_t(m) * n);
    std::vector<double> packed_times, naive_times;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = clock::now();
        PackedPatchMatrix pm = pack_patches(act.data(), k, 1, n, 1, 1, 1, 0);
        ternary_gemm(pk, pm, acc.data());
        const auto t1 = clock::now();
        packed_times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    std::vector<float> fa(size_t(m) * k), fb(size_t(k) * n), fc(size_t(m) * n);
    for (size_t i = 0; i < fa.size(); ++i) fa[i] = float(tk.t[i]);
    for (size_t i = 0; i < fb.size(); ++i) fb[i] = float(act[i]);
    for (int r = 0; r < reps; ++r) {
        const auto t0 = clock::now();
        // plain triple loop, the reference "naive float" path
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                float s = 0.f;
                const float* ar = fa.data() + size_t(i) * k;
                for (int kk = 0; kk < k; ++kk) s += ar[kk] * fb[size_t(kk) * n + j];
                fc[size_t(i) * n + j] = s;
            }
        const auto t1 = clock::now();
        naive_times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    BenchRow row;
    row.m = m;
    row.k = k;
    row.n = n;
    row.packed_ms = median(packed_times);
    row.naive_ms = median(naive_times);
    const double macs = double(m) * k * n;
    row.packed_gmacs = macs / (row.packed_ms * 1e6);
    row.naive_gmacs = macs / (row.naive_ms * 1e6);
    row.speedup = row.naive_ms / row.packed_ms;
    return row;
}

}  // namespace sttn
