#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>

#include "sttn/ops.hpp"

namespace sttn::quant {

enum class BackwardMode { consistent, paper_literal };

// Binarized views of a latent kernel pair with their shared scale.
template <class S>
struct PairQuant {
    std::vector<S> b1, b2;  // entries in {-1,+1}, sign(0) = +1
    S alpha = S(0);         // (sum|w1| + sum|w2|) / (2N)
};

template <class S>
S shared_alpha(std::span<const S> w1, std::span<const S> w2) {
    S acc = S(0);
    for (S v : w1) acc += std::abs(v);
    for (S v : w2) acc += std::abs(v);
    return acc / S(2 * w1.size());
}

// Optimal shared-scale binarization of the latent pair: signs of the latents
// and the single alpha that minimizes the joint L2 approximation gap.
template <class S>
PairQuant<S> sttn_quantize_pair(std::span<const S> w1, std::span<const S> w2) {
    if (w1.empty() || w2.empty()) throw ValueError("sttn_quantize_pair: empty kernel");
    if (w1.size() != w2.size()) throw ShapeError("sttn_quantize_pair: kernel shapes differ");
    PairQuant<S> q;
    q.b1.resize(w1.size());
    q.b2.resize(w2.size());
    for (size_t i = 0; i < w1.size(); ++i) {
        if (!std::isfinite(w1[i]) || !std::isfinite(w2[i]))
            throw ValueError("sttn_quantize_pair: non-finite latent weight");
        q.b1[i] = sgn(w1[i]);
        q.b2[i] = sgn(w2[i]);
    }
    q.alpha = shared_alpha(w1, w2);
    return q;
}

// Joint approximation objective ||w1 - a*sign(w1)||^2 + ||w2 - a*sign(w2)||^2.
template <class S>
S pair_objective(std::span<const S> w1, std::span<const S> w2, S alpha) {
    S acc = S(0);
    for (S v : w1) {
        const S d = v - alpha * sgn(v);
        acc += d * d;
    }
    for (S v : w2) {
        const S d = v - alpha * sgn(v);
        acc += d * d;
    }
    return acc;
}

// Gradient of the loss w.r.t. the latent pair given upstream gradients of the
// quantized views. The shared scale couples every element of both kernels, so
// each latent picks up an alpha-coupling term summed over all 2N upstream
// gradients plus a clipped straight-through term for its own sign.
//
// consistent:     dL/dw1_i = (1/2N) sign(w1_i) * sum_kj g_kj sign(w_kj)
//                          + alpha * 1{|w1_i|<=1} * g1_i
// paper_literal:  second term uses sum_kj g_kj instead of g1_i (the printed
//                 form; kept selectable for ablation)
template <class S>
void sttn_backward_pair(std::span<const S> g1, std::span<const S> g2,
                        std::span<const S> w1, std::span<const S> w2, S alpha,
                        BackwardMode mode, std::span<S> out_g1, std::span<S> out_g2) {
    const size_t n = w1.size();
    if (w2.size() != n || g1.size() != n || g2.size() != n || out_g1.size() != n || out_g2.size() != n)
        throw ShapeError("sttn_backward_pair: shape mismatch");
    const S fresh = shared_alpha(w1, w2);
    const S tol = std::max(S(1e-6) * std::max(std::abs(fresh), S(1)), S(1e-12));
    if (std::abs(fresh - alpha) > tol)
        throw ValueError("sttn_backward_pair: stale alpha (recompute before backward)");

    S coupled = S(0);  // sum_kj g_kj * sign(w_kj)
    S total = S(0);    // sum_kj g_kj
    for (size_t i = 0; i < n; ++i) {
        coupled += g1[i] * sgn(w1[i]) + g2[i] * sgn(w2[i]);
        total += g1[i] + g2[i];
    }
    const S c = coupled / S(2 * n);
    for (size_t i = 0; i < n; ++i) {
        const S ste1 = std::abs(w1[i]) <= S(1) ? S(1) : S(0);
        const S ste2 = std::abs(w2[i]) <= S(1) ? S(1) : S(0);
        if (mode == BackwardMode::consistent) {
            out_g1[i] = c * sgn(w1[i]) + alpha * ste1 * g1[i];
            out_g2[i] = c * sgn(w2[i]) + alpha * ste2 * g2[i];
        } else {
            out_g1[i] = c * sgn(w1[i]) + alpha * ste1 * total;
            out_g2[i] = c * sgn(w2[i]) + alpha * ste2 * total;
        }
    }
}

// Activation ternarization: sign(x) where |x| > 0.5, else 0.
template <class S>
void ternarize(std::span<const S> x, std::span<S> out) {
    for (size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i])) throw ValueError("ternarize: non-finite activation");
        out[i] = std::abs(x[i]) > S(0.5) ? sgn(x[i]) : S(0);
    }
}

// STE for the ternarizer: pass the gradient inside the clip range |x| <= 1.
template <class S>
void ternarize_backward(std::span<const S> x, std::span<const S> g, std::span<S> out) {
    for (size_t i = 0; i < x.size(); ++i) out[i] = std::abs(x[i]) <= S(1) ? g[i] : S(0);
}

enum class TwnMode { heuristic, exact };

template <class S>
struct TwnResult {
    std::vector<int8_t> t;  // {-1,0,+1}
    S alpha = S(0);
    S delta = S(0);
};

template <class S>
struct OracleResult {
    std::vector<int8_t> t;
    S alpha = S(0);
    S objective = S(0);  // (sum of selected |w|)^2 / count
    int count = 0;
};

namespace detail {
// Index order sorted by |w| descending, ties by index ascending.
template <class S>
std::vector<int> magnitude_order(std::span<const S> w) {
    std::vector<int> idx(w.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return std::abs(w[size_t(a)]) > std::abs(w[size_t(b)]); });
    return idx;
}
}  // namespace detail

// Exact single-kernel ternary approximation: choose the top-k magnitudes that
// maximize (sum of selected |w|)^2 / k, assign them their signs, scale by the
// mean selected magnitude. O(N log N).
template <class S>
OracleResult<S> optimal_ternary_oracle(std::span<const S> w) {
    if (w.empty()) throw ValueError("optimal_ternary_oracle: empty kernel");
    const auto idx = detail::magnitude_order(w);
    S prefix = S(0), best = S(-1);
    int best_k = 1;
    for (int k = 1; k <= int(w.size()); ++k) {
        prefix += std::abs(w[size_t(idx[size_t(k - 1)])]);
        const S obj = prefix * prefix / S(k);
        if (obj > best) {
            best = obj;
            best_k = k;
        }
    }
    OracleResult<S> r;
    r.t.assign(w.size(), 0);
    S sel = S(0);
    for (int i = 0; i < best_k; ++i) {
        const int j = idx[size_t(i)];
        r.t[size_t(j)] = int8_t(sgn(w[size_t(j)]));
        sel += std::abs(w[size_t(j)]);
    }
    r.alpha = sel / S(best_k);
    r.objective = best;
    r.count = best_k;
    return r;
}

// Threshold-based ternarization. heuristic: delta = 0.7 * mean|w|.
// exact: best threshold between consecutive sorted magnitudes (reported as
// the midpoint of the optimal open interval).
template <class S>
TwnResult<S> twn_quantize(std::span<const S> w, TwnMode mode) {
    if (w.empty()) throw ValueError("twn_quantize: empty kernel");
    TwnResult<S> r;
    if (mode == TwnMode::heuristic) {
        S acc = S(0);
        for (S v : w) acc += std::abs(v);
        r.delta = S(0.7) * acc / S(w.size());
    } else {
        const auto idx = detail::magnitude_order(w);
        S prefix = S(0), best = S(-1);
        int best_k = 0;
        for (int k = 1; k <= int(w.size()); ++k) {
            const S mk = std::abs(w[size_t(idx[size_t(k - 1)])]);
            prefix += mk;
            // a threshold can realize the top-k set only if it splits below m_k
            const S next = (k < int(w.size())) ? std::abs(w[size_t(idx[size_t(k)])]) : S(0);
            if (k < int(w.size()) && next == mk) continue;  // tie: not threshold-separable
            const S obj = prefix * prefix / S(k);
            if (obj > best) {
                best = obj;
                best_k = k;
            }
        }
        const S hi = std::abs(w[size_t(idx[size_t(best_k - 1)])]);
        const S lo = (best_k < int(w.size())) ? std::abs(w[size_t(idx[size_t(best_k)])]) : S(0);
        r.delta = (lo + hi) / S(2);
    }
    r.t.assign(w.size(), 0);
    S sel = S(0);
    int cnt = 0;
    for (size_t i = 0; i < w.size(); ++i) {
        if (w[i] > r.delta) {
            r.t[i] = 1;
            sel += std::abs(w[i]);
            ++cnt;
        } else if (w[i] < -r.delta) {
            r.t[i] = -1;
            sel += std::abs(w[i]);
            ++cnt;
        }
    }
    r.alpha = cnt > 0 ? sel / S(cnt) : S(0);
    return r;
}

// ||w - alpha*t||^2 summed over elements
template <class S>
S approx_error(std::span<const S> w, S alpha, std::span<const int8_t> t) {
    if (w.size() != t.size()) throw ShapeError("approx_error: shape mismatch");
    S acc = S(0);
    for (size_t i = 0; i < w.size(); ++i) {
        const S d = w[i] - alpha * S(t[i]);
        acc += d * d;
    }
    return acc;
}

// Threshold-interval objective value (sum_{|w|>delta} |w|)^2 / |I_delta|;
// 0 when the interval is empty. Used for oracle-vs-heuristic comparisons.
template <class S>
S threshold_objective(std::span<const S> w, S delta) {
    S sel = S(0);
    int cnt = 0;
    for (S v : w)
        if (std::abs(v) > delta) {
            sel += std::abs(v);
            ++cnt;
        }
    return cnt > 0 ? sel * sel / S(cnt) : S(0);
}

// ---- tape nodes ----

// Ternarize activations with STE backward.
template <class S>
Tensor<S> ternarize_activation(Tape<S>* tape, const Tensor<S>& x) {
    CustomNode<S> node;
    node.forward = [](const std::vector<Tensor<S>>& in) {
        Tensor<S> out = Tensor<S>::zeros(in[0].shape);
        ternarize<S>({in[0].ptr(), size_t(in[0].size())}, {out.ptr(), size_t(out.size())});
        return std::vector<Tensor<S>>{out};
    };
    auto xd = x.data;
    node.backward = [xd](const std::vector<std::vector<S>>& up) {
        std::vector<S> g(xd->size());
        ternarize_backward<S>({xd->data(), xd->size()}, {up[0].data(), up[0].size()}, {g.data(), g.size()});
        return std::vector<std::vector<S>>{std::move(g)};
    };
    return register_custom(tape, node, {x})[0];
}

// Training-time soft-threshold ternary convolution: the latent pair is
// binarized with the shared scale, both branch convolutions run on the same
// input, and the branch sum is scaled once at the end. Keeping the branch
// accumulation in +-1 arithmetic makes the output bit-comparable with the
// fused ternary kernel.
//
// Backward routes the conventional kernel gradients of the quantized views
// through sttn_backward_pair and the input gradient through the fused kernel.
template <class S>
Tensor<S> sttn_pair_conv2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w1, const Tensor<S>& w2,
                           int stride, int pad, BackwardMode mode, S* alpha_out = nullptr) {
    if (w1.shape != w2.shape) throw ShapeError("sttn_pair_conv2d: latent kernel shapes differ");
    auto g = conv_geom<S>(x.shape, w1.shape, stride, pad);
    auto quant = std::make_shared<PairQuant<S>>(
        sttn_quantize_pair<S>({w1.ptr(), size_t(w1.size())}, {w2.ptr(), size_t(w2.size())}));
    if (alpha_out) *alpha_out = quant->alpha;

    CustomNode<S> node;
    auto cols = std::make_shared<std::vector<S>>();
    bool keep = tape && (x.requires_grad || w1.requires_grad || w2.requires_grad);
    node.forward = [g, quant, cols, keep](const std::vector<Tensor<S>>& in) {
        Tensor<S> out = Tensor<S>::zeros({g.N, g.F, g.OH, g.OW});
        std::vector<S> branch(static_cast<size_t>(out.size()));
        im2col_batch(g, in[0].ptr(), *cols);
        conv_cols_gemm(g, quant->b1.data(), *cols, out.ptr());
        conv_cols_gemm(g, quant->b2.data(), *cols, branch.data());
        const S a = quant->alpha;
        for (int64_t i = 0; i < out.size(); ++i) out[i] = a * (out[i] + branch[size_t(i)]);
        if (!keep) {
            cols->clear();
            cols->shrink_to_fit();
        }
        return std::vector<Tensor<S>>{out};
    };
    auto xd = x.data;
    auto w1d = w1.data;
    auto w2d = w2.data;
    bool need_gx = x.requires_grad;
    node.backward = [g, quant, cols, xd, w1d, w2d, need_gx, mode](const std::vector<std::vector<S>>& up) {
        const auto& gy = up[0];
        const size_t nk = w1d->size();
        // gradient of the quantized views: same conventional conv kernel
        // gradient for both branches (the branches share input and output)
        std::vector<S> gview(nk);
        conv2d_wgrad_raw(g, *cols, gy.data(), gview.data());
        std::vector<S> gw1(nk), gw2(nk);
        sttn_backward_pair<S>({gview.data(), nk}, {gview.data(), nk}, {w1d->data(), nk},
                              {w2d->data(), nk}, quant->alpha, mode, {gw1.data(), nk}, {gw2.data(), nk});
        std::vector<S> gx;
        if (need_gx) {
            std::vector<S> fused(nk);
            for (size_t i = 0; i < nk; ++i) fused[i] = quant->alpha * (quant->b1[i] + quant->b2[i]);
            gx.resize(xd->size());
            conv2d_xgrad_raw(g, fused.data(), gy.data(), gx.data());
        }
        return std::vector<std::vector<S>>{std::move(gx), std::move(gw1), std::move(gw2)};
    };
    return register_custom(tape, node, {x, w1, w2})[0];
}

// Hard-threshold baseline convolution: latent kernel ternarized with the 0.7
// mean-magnitude heuristic every forward, straight-through kernel gradient.
template <class S>
Tensor<S> twn_conv2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, int stride, int pad,
                     S* alpha_out = nullptr) {
    auto g = conv_geom<S>(x.shape, w.shape, stride, pad);
    auto q = std::make_shared<TwnResult<S>>(twn_quantize<S>({w.ptr(), size_t(w.size())}, TwnMode::heuristic));
    if (alpha_out) *alpha_out = q->alpha;
    auto cols = std::make_shared<std::vector<S>>();
    bool keep = tape && (x.requires_grad || w.requires_grad);

    CustomNode<S> node;
    node.forward = [g, q, cols, keep](const std::vector<Tensor<S>>& in) {
        std::vector<S> t(q->t.size());
        for (size_t i = 0; i < t.size(); ++i) t[i] = S(q->t[i]);
        Tensor<S> out = Tensor<S>::zeros({g.N, g.F, g.OH, g.OW});
        conv2d_forward_raw(g, in[0].ptr(), t.data(), out.ptr(), keep ? cols.get() : nullptr);
        for (int64_t i = 0; i < out.size(); ++i) out[i] *= q->alpha;
        return std::vector<Tensor<S>>{out};
    };
    auto xd = x.data;
    bool need_gx = x.requires_grad;
    node.backward = [g, q, cols, xd, need_gx](const std::vector<std::vector<S>>& up) {
        const auto& gy = up[0];
        const size_t nk = q->t.size();
        std::vector<S> gw(nk);
        conv2d_wgrad_raw(g, *cols, gy.data(), gw.data());  // straight-through
        std::vector<S> gx;
        if (need_gx) {
            std::vector<S> scaled(nk);
            for (size_t i = 0; i < nk; ++i) scaled[i] = q->alpha * S(q->t[i]);
            gx.resize(xd->size());
            conv2d_xgrad_raw(g, scaled.data(), gy.data(), gx.data());
        }
        return std::vector<std::vector<S>>{std::move(gx), std::move(gw)};
    };
    return register_custom(tape, node, {x, w})[0];
}

}  // namespace sttn::quant
