#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sttn/common.hpp"

namespace sttn {

// Ternary data as two bit planes packed into 64-bit words:
//   mask bit = 1 where the element is nonzero
//   sign bit = 1 where the element is +1 (0 wherever mask is 0)
// Bit i of word i/64 is element i (LSB first). Tail padding bits are 0.
struct BitplaneTensor {
    int64_t size = 0;
    std::vector<uint64_t> mask, sign;

    static BitplaneTensor pack(std::span<const int8_t> x);
    std::vector<int8_t> decode() const;
    int64_t nonzeros() const;
};

// Exact integer inner product of two ternary vectors of equal logical length.
int64_t ternary_dot(const BitplaneTensor& a, const BitplaneTensor& b);

// Fused inference kernel: entries in {-1,0,+1} with scale 2*alpha.
struct TernaryKernel {
    int out_ch = 0, in_ch = 0, kh = 0, kw = 0;
    std::vector<int8_t> t;
    float scale = 0.f;

    int64_t numel() const { return int64_t(out_ch) * in_ch * kh * kw; }
    double sparsity() const;
};

// t_i = (sign(w1_i) + sign(w2_i)) / 2, scale = 2*alpha. Zeros appear exactly
// where the two branches disagree in sign.
TernaryKernel fuse_pair(std::span<const float> w1, std::span<const float> w2, int out_ch, int in_ch,
                        int kh, int kw, float alpha);

// Kernel packed per filter: filter f owns words [f*wpf, (f+1)*wpf) in both
// planes; within a filter, bit k = (c*kh + r)*kw + s (channel-major), matching
// the im2col row layout.
struct PackedTernaryKernel {
    int out_ch = 0, in_ch = 0, kh = 0, kw = 0;
    int64_t k_len = 0;       // in_ch*kh*kw
    int words_per_filter = 0;
    std::vector<uint64_t> mask, sign;
    float scale = 0.f;
};

PackedTernaryKernel pack_kernel(const TernaryKernel& k);
TernaryKernel unpack_kernel(const PackedTernaryKernel& pk);

// Packed im2col: one packed row (ceil(K/64) words) per output position,
// channel-major within the row; padding contributes mask=0.
struct PackedPatchMatrix {
    int64_t positions = 0, k_len = 0;
    int words_per_row = 0;
    std::vector<uint64_t> mask, sign;
};

PackedPatchMatrix pack_patches(const int8_t* img, int C, int H, int W, int kh, int kw, int stride, int pad);

// Ternary convolution over one image [C,H,W] of {-1,0,+1} activations.
// acc[f*P+p] is the exact integer accumulator; out = scale * acc.
void ternary_conv2d(const PackedTernaryKernel& k, const int8_t* img, int C, int H, int W, int stride,
                    int pad, std::vector<int32_t>& acc, std::vector<float>& out);

// Naive integer conv oracle over decoded values (test/benchmark reference).
void ternary_conv2d_naive(const TernaryKernel& k, const int8_t* img, int C, int H, int W, int stride,
                          int pad, std::vector<int32_t>& acc);

// Packed-row ternary GEMM: C[M,N] = dot(filter m, patch n).
void ternary_gemm(const PackedTernaryKernel& a, const PackedPatchMatrix& b, int32_t* out);

struct BenchRow {
    int m = 0, k = 0, n = 0;
    double packed_ms = 0, naive_ms = 0;
    double packed_gmacs = 0, naive_gmacs = 0;
    double speedup = 0;
};

// Times the packed ternary GEMM (including activation packing) against a
// plain triple-loop float GEMM on the same decoded operands.
BenchRow bench_ternary_gemm(int m, int k, int n, int reps, uint64_t seed);

}  // namespace sttn
