#pragma once

#include <algorithm>
#include <cstdint>

namespace sttn {

// Row-major GEMM kernels. Every output cell accumulates its k terms in
// ascending k order, so results are independent of any outer-loop blocking
// and bitwise reproducible run to run.

// C[M,N] = A[M,K] * B[K,N]
template <class S>
void gemm_nn(int M, int K, int N, const S* A, const S* B, S* C) {
    std::fill(C, C + int64_t(M) * N, S(0));
    for (int i = 0; i < M; ++i) {
        S* __restrict c = C + int64_t(i) * N;
        const S* arow = A + int64_t(i) * K;
        for (int k = 0; k < K; ++k) {
            const S a = arow[k];
            if (a == S(0)) continue;
            const S* __restrict b = B + int64_t(k) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[M,N] = A[M,K] * B[N,K]^T
template <class S>
void gemm_nt(int M, int K, int N, const S* A, const S* B, S* C) {
    for (int i = 0; i < M; ++i) {
        const S* __restrict arow = A + int64_t(i) * K;
        S* c = C + int64_t(i) * N;
        for (int j = 0; j < N; ++j) {
            const S* __restrict brow = B + int64_t(j) * K;
            S acc = S(0);
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            c[j] = acc;
        }
    }
}

// C[M,N] = A[K,M]^T * B[K,N]
template <class S>
void gemm_tn(int M, int K, int N, const S* A, const S* B, S* C) {
    std::fill(C, C + int64_t(M) * N, S(0));
    for (int k = 0; k < K; ++k) {
        const S* arow = A + int64_t(k) * M;
        const S* __restrict b = B + int64_t(k) * N;
        for (int i = 0; i < M; ++i) {
            const S a = arow[i];
            if (a == S(0)) continue;
            S* __restrict c = C + int64_t(i) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

}  // namespace sttn
