#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "sttn/gemm.hpp"
#include "sttn/tensor.hpp"

namespace sttn {

// im2col for one image, cross-correlation layout: rows are k = (c, kh, kw)
// channel-major, columns are output positions p = (oh, ow).
template <class S>
void im2col(const S* img, int C, int H, int W, int kh, int kw, int stride, int pad, S* cols) {
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    const int P = OH * OW;
    int64_t row = 0;
    for (int c = 0; c < C; ++c) {
        const S* plane = img + int64_t(c) * H * W;
        for (int r = 0; r < kh; ++r) {
            for (int s = 0; s < kw; ++s, ++row) {
                S* dst = cols + row * P;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + r;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + OW, S(0));
                        dst += OW;
                        continue;
                    }
                    const S* src_row = plane + int64_t(ih) * W;
                    int iw = -pad + s;
                    for (int ow = 0; ow < OW; ++ow, ++dst, iw += stride)
                        *dst = (iw >= 0 && iw < W) ? src_row[iw] : S(0);
                }
            }
        }
    }
}

// scatter-add transpose of im2col
template <class S>
void col2im(const S* cols, int C, int H, int W, int kh, int kw, int stride, int pad, S* img) {
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    const int P = OH * OW;
    int64_t row = 0;
    for (int c = 0; c < C; ++c) {
        S* plane = img + int64_t(c) * H * W;
        for (int r = 0; r < kh; ++r) {
            for (int s = 0; s < kw; ++s, ++row) {
                const S* src = cols + row * P;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + r;
                    if (ih < 0 || ih >= H) {
                        src += OW;
                        continue;
                    }
                    S* dst_row = plane + int64_t(ih) * W;
                    int iw = -pad + s;
                    for (int ow = 0; ow < OW; ++ow, ++src, iw += stride)
                        if (iw >= 0 && iw < W) dst_row[iw] += *src;
                }
            }
        }
    }
}

// ---- raw (tape-free) convolution kernels, shared by conv2d and the
// ---- quantized block nodes

template <class S>
struct ConvGeom {
    int N, C, H, W, F, kh, kw, stride, pad, OH, OW, P, K;
};

template <class S>
ConvGeom<S> conv_geom(const Shape& xs, const Shape& ws, int stride, int pad) {
    if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d expects 4-d input and kernel");
    if (xs[1] != ws[1])
        throw ShapeError("conv2d channel mismatch: input C=" + std::to_string(xs[1]) +
                         ", kernel C=" + std::to_string(ws[1]));
    ConvGeom<S> g;
    g.N = xs[0]; g.C = xs[1]; g.H = xs[2]; g.W = xs[3];
    g.F = ws[0]; g.kh = ws[2]; g.kw = ws[3];
    g.stride = stride; g.pad = pad;
    g.OH = conv_out_dim(g.H, g.kh, stride, pad);
    g.OW = conv_out_dim(g.W, g.kw, stride, pad);
    g.P = g.OH * g.OW;
    g.K = g.C * g.kh * g.kw;
    return g;
}

template <class S>
void im2col_batch(const ConvGeom<S>& g, const S* x, std::vector<S>& cols) {
    cols.resize(size_t(g.N) * g.K * g.P);
    parallel_for(g.N, [&](int64_t lo, int64_t hi) {
        for (int64_t b = lo; b < hi; ++b)
            im2col(x + size_t(b) * g.C * g.H * g.W, g.C, g.H, g.W, g.kh, g.kw, g.stride, g.pad,
                   cols.data() + size_t(b) * g.K * g.P);
    });
}

// out[N,F,P] = w[F,K] x cols (per-image blocks)
template <class S>
void conv_cols_gemm(const ConvGeom<S>& g, const S* w, const std::vector<S>& cols, S* out) {
    parallel_for(g.N, [&](int64_t lo, int64_t hi) {
        for (int64_t b = lo; b < hi; ++b)
            gemm_nn(g.F, g.K, g.P, w, cols.data() + size_t(b) * g.K * g.P, out + size_t(b) * g.F * g.P);
    });
}

// cols (size K*N*P, per-image blocks) is kept for the weight gradient when non-null
template <class S>
void conv2d_forward_raw(const ConvGeom<S>& g, const S* x, const S* w, S* out, std::vector<S>* keep_cols) {
    std::vector<S> local;
    std::vector<S>* cols = keep_cols ? keep_cols : &local;
    im2col_batch(g, x, *cols);
    conv_cols_gemm(g, w, *cols, out);
}

template <class S>
void conv2d_wgrad_raw(const ConvGeom<S>& g, const std::vector<S>& cols, const S* gy, S* gw) {
    std::fill(gw, gw + size_t(g.F) * g.K, S(0));
    std::vector<S> tmp(size_t(g.F) * g.K);
    for (int b = 0; b < g.N; ++b) {
        const S* cb = cols.data() + size_t(b) * g.K * g.P;
        gemm_nt(g.F, g.P, g.K, gy + size_t(b) * g.F * g.P, cb, tmp.data());
        for (size_t i = 0; i < tmp.size(); ++i) gw[i] += tmp[i];
    }
}

template <class S>
void conv2d_xgrad_raw(const ConvGeom<S>& g, const S* w, const S* gy, S* gx) {
    std::fill(gx, gx + size_t(g.N) * g.C * g.H * g.W, S(0));
    std::vector<S> dcols(size_t(g.K) * g.P);
    for (int b = 0; b < g.N; ++b) {
        gemm_tn(g.K, g.F, g.P, w, gy + size_t(b) * g.F * g.P, dcols.data());
        col2im(dcols.data(), g.C, g.H, g.W, g.kh, g.kw, g.stride, g.pad,
               gx + size_t(b) * g.C * g.H * g.W);
    }
}

// ---- tape-recorded primitives

template <class S>
Tensor<S> conv2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, int stride, int pad) {
    auto g = conv_geom<S>(x.shape, w.shape, stride, pad);
    Tensor<S> out = Tensor<S>::zeros({g.N, g.F, g.OH, g.OW});
    bool rg = x.requires_grad || w.requires_grad;
    auto cols = std::make_shared<std::vector<S>>();
    conv2d_forward_raw(g, x.ptr(), w.ptr(), out.ptr(), (tape && rg) ? cols.get() : nullptr);
    out.requires_grad = rg;
    if (!tape || !rg) return out;

    typename Tape<S>::Node rec;
    rec.inputs = {x.id, w.id};
    rec.outputs = {out.id};
    auto xd = x.data; auto wd = w.data;
    bool need_gx = x.requires_grad, need_gw = w.requires_grad;
    int64_t xid = x.id, wid = w.id, oid = out.id;
    rec.backward = [g, cols, xd, wd, need_gx, need_gw, xid, wid, oid](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        if (need_gw) {
            auto& gw = tp.grad_buf(wid, size_t(g.F) * g.K);
            std::vector<S> tmp(gw.size());
            conv2d_wgrad_raw(g, *cols, gy->data(), tmp.data());
            for (size_t i = 0; i < gw.size(); ++i) gw[i] += tmp[i];
        }
        if (need_gx) {
            auto& gx = tp.grad_buf(xid, xd->size());
            std::vector<S> tmp(xd->size());
            conv2d_xgrad_raw(g, wd->data(), gy->data(), tmp.data());
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
        }
    };
    tape->record(std::move(rec));
    return out;
}

// y = x W^T + b, x:[N,din], w:[dout,din], b:[dout] (pass undefined Tensor for no bias)
template <class S>
Tensor<S> linear(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x.shape.size() != 2 || w.shape.size() != 2) throw ShapeError("linear expects 2-d input and weight");
    if (x.shape[1] != w.shape[1])
        throw ShapeError("linear dim mismatch: x " + shape_str(x.shape) + " vs w " + shape_str(w.shape));
    const int N = x.shape[0], din = x.shape[1], dout = w.shape[0];
    const bool has_bias = b.defined();
    if (has_bias && (b.shape.size() != 1 || b.shape[0] != dout)) throw ShapeError("linear bias shape");
    Tensor<S> out = Tensor<S>::zeros({N, dout});
    gemm_nt(N, din, dout, x.ptr(), w.ptr(), out.ptr());
    if (has_bias)
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < dout; ++j) out[i * dout + j] += b[j];
    bool rg = x.requires_grad || w.requires_grad || (has_bias && b.requires_grad);
    out.requires_grad = rg;
    if (!tape || !rg) return out;

    typename Tape<S>::Node rec;
    rec.inputs = {x.id, w.id};
    if (has_bias) rec.inputs.push_back(b.id);
    rec.outputs = {out.id};
    auto xd = x.data; auto wd = w.data;
    bool ngx = x.requires_grad, ngw = w.requires_grad, ngb = has_bias && b.requires_grad;
    int64_t xid = x.id, wid = w.id, bid = has_bias ? b.id : -1, oid = out.id;
    rec.backward = [=](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        if (ngx) {
            auto& gx = tp.grad_buf(xid, size_t(N) * din);
            std::vector<S> tmp(gx.size());
            gemm_nn(N, dout, din, gy->data(), wd->data(), tmp.data());
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
        }
        if (ngw) {
            auto& gw = tp.grad_buf(wid, size_t(dout) * din);
            std::vector<S> tmp(gw.size());
            gemm_tn(dout, N, din, gy->data(), xd->data(), tmp.data());
            for (size_t i = 0; i < gw.size(); ++i) gw[i] += tmp[i];
        }
        if (ngb) {
            auto& gb = tp.grad_buf(bid, size_t(dout));
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < dout; ++j) gb[j] += (*gy)[size_t(i) * dout + j];
        }
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
Tensor<S> relu(Tape<S>* tape, const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape);
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
    out.requires_grad = x.requires_grad;
    if (!tape || !x.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {x.id};
    rec.outputs = {out.id};
    auto xd = x.data;
    int64_t xid = x.id, oid = out.id;
    rec.backward = [xd, xid, oid, n](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        auto& gx = tp.grad_buf(xid, size_t(n));
        for (int64_t i = 0; i < n; ++i)
            if ((*xd)[size_t(i)] > S(0)) gx[size_t(i)] += (*gy)[size_t(i)];
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape != b.shape)
        throw ShapeError("add shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<S> out = Tensor<S>::zeros(a.shape);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    out.requires_grad = a.requires_grad || b.requires_grad;
    if (!tape || !out.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {a.id, b.id};
    rec.outputs = {out.id};
    bool nga = a.requires_grad, ngb = b.requires_grad;
    int64_t aid = a.id, bid = b.id, oid = out.id;
    rec.backward = [=](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        if (nga) {
            auto& ga = tp.grad_buf(aid, size_t(n));
            for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += (*gy)[size_t(i)];
        }
        if (ngb) {
            auto& gb = tp.grad_buf(bid, size_t(n));
            for (int64_t i = 0; i < n; ++i) gb[size_t(i)] += (*gy)[size_t(i)];
        }
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape != b.shape)
        throw ShapeError("mul shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<S> out = Tensor<S>::zeros(a.shape);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    out.requires_grad = a.requires_grad || b.requires_grad;
    if (!tape || !out.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {a.id, b.id};
    rec.outputs = {out.id};
    auto ad = a.data; auto bd = b.data;
    bool nga = a.requires_grad, ngb = b.requires_grad;
    int64_t aid = a.id, bid = b.id, oid = out.id;
    rec.backward = [=](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        if (nga) {
            auto& ga = tp.grad_buf(aid, size_t(n));
            for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += (*gy)[size_t(i)] * (*bd)[size_t(i)];
        }
        if (ngb) {
            auto& gb = tp.grad_buf(bid, size_t(n));
            for (int64_t i = 0; i < n; ++i) gb[size_t(i)] += (*gy)[size_t(i)] * (*ad)[size_t(i)];
        }
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
Tensor<S> sum(Tape<S>* tape, const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros({1});
    S acc = S(0);
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    out[0] = acc;
    out.requires_grad = x.requires_grad;
    if (!tape || !x.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {x.id};
    rec.outputs = {out.id};
    int64_t xid = x.id, oid = out.id;
    rec.backward = [xid, oid, n](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        auto& gx = tp.grad_buf(xid, size_t(n));
        for (int64_t i = 0; i < n; ++i) gx[size_t(i)] += (*gy)[0];
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
Tensor<S> reshape(Tape<S>* tape, const Tensor<S>& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape " + shape_str(x.shape) + " -> " + shape_str(shape) + " changes element count");
    Tensor<S> out(shape, *x.data, x.requires_grad);
    if (!tape || !x.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {x.id};
    rec.outputs = {out.id};
    int64_t xid = x.id, oid = out.id, n = x.size();
    rec.backward = [xid, oid, n](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        auto& gx = tp.grad_buf(xid, size_t(n));
        for (int64_t i = 0; i < n; ++i) gx[size_t(i)] += (*gy)[size_t(i)];
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
Tensor<S> maxpool2d(Tape<S>* tape, const Tensor<S>& x, int k, int stride) {
    if (x.shape.size() != 4) throw ShapeError("maxpool2d expects 4-d input");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int OH = conv_out_dim(H, k, stride, 0);
    const int OW = conv_out_dim(W, k, stride, 0);
    Tensor<S> out = Tensor<S>::zeros({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(N) * C * OH * OW);
    int64_t o = 0;
    for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c) {
            const S* plane = x.ptr() + (size_t(b) * C + c) * H * W;
            const int64_t base = (size_t(b) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++o) {
                    S best = -std::numeric_limits<S>::infinity();
                    int64_t best_i = -1;
                    for (int r = 0; r < k; ++r)
                        for (int s = 0; s < k; ++s) {
                            const int ih = oh * stride + r, iw = ow * stride + s;
                            const S v = plane[ih * W + iw];
                            if (v > best) {
                                best = v;
                                best_i = base + ih * W + iw;
                            }
                        }
                    out[o] = best;
                    (*argmax)[size_t(o)] = best_i;
                }
        }
    out.requires_grad = x.requires_grad;
    if (!tape || !x.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {x.id};
    rec.outputs = {out.id};
    int64_t xid = x.id, oid = out.id, xn = x.size(), on = out.size();
    rec.backward = [argmax, xid, oid, xn, on](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        auto& gx = tp.grad_buf(xid, size_t(xn));
        for (int64_t i = 0; i < on; ++i) gx[size_t((*argmax)[size_t(i)])] += (*gy)[size_t(i)];
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
Tensor<S> global_avgpool(Tape<S>* tape, const Tensor<S>& x) {
    if (x.shape.size() != 4) throw ShapeError("global_avgpool expects 4-d input");
    const int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor<S> out = Tensor<S>::zeros({N, C});
    for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c) {
            const S* p = x.ptr() + (size_t(b) * C + c) * HW;
            S acc = S(0);
            for (int i = 0; i < HW; ++i) acc += p[i];
            out[b * C + c] = acc / S(HW);
        }
    out.requires_grad = x.requires_grad;
    if (!tape || !x.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {x.id};
    rec.outputs = {out.id};
    int64_t xid = x.id, oid = out.id;
    rec.backward = [=](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        auto& gx = tp.grad_buf(xid, size_t(N) * C * HW);
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const S g = (*gy)[size_t(b) * C + c] / S(HW);
                S* p = gx.data() + (size_t(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) p[i] += g;
            }
    };
    tape->record(std::move(rec));
    return out;
}

// zero-pad extra channels at the end (residual shortcuts across width changes)
template <class S>
Tensor<S> pad_channels(Tape<S>* tape, const Tensor<S>& x, int extra) {
    if (x.shape.size() != 4) throw ShapeError("pad_channels expects 4-d input");
    if (extra < 0) throw ShapeError("pad_channels extra < 0");
    const int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor<S> out = Tensor<S>::zeros({N, C + extra, x.shape[2], x.shape[3]});
    for (int b = 0; b < N; ++b)
        std::copy(x.ptr() + size_t(b) * C * HW, x.ptr() + size_t(b + 1) * C * HW,
                  out.ptr() + size_t(b) * (C + extra) * HW);
    out.requires_grad = x.requires_grad;
    if (!tape || !x.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {x.id};
    rec.outputs = {out.id};
    int64_t xid = x.id, oid = out.id;
    rec.backward = [=](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        auto& gx = tp.grad_buf(xid, size_t(N) * C * HW);
        for (int b = 0; b < N; ++b)
            for (int64_t i = 0; i < int64_t(C) * HW; ++i)
                gx[size_t(b) * C * HW + size_t(i)] += (*gy)[size_t(b) * (C + extra) * HW + size_t(i)];
    };
    tape->record(std::move(rec));
    return out;
}

// per-channel bias over [N,C,H,W]
template <class S>
Tensor<S> bias_channel(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& b) {
    if (x.shape.size() != 4 || b.shape.size() != 1 || b.shape[0] != x.shape[1])
        throw ShapeError("bias_channel shape mismatch");
    const int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor<S> out = Tensor<S>::zeros(x.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = x.ptr() + (size_t(n) * C + c) * HW;
            S* q = out.ptr() + (size_t(n) * C + c) * HW;
            const S bv = b[c];
            for (int i = 0; i < HW; ++i) q[i] = p[i] + bv;
        }
    out.requires_grad = x.requires_grad || b.requires_grad;
    if (!tape || !out.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {x.id, b.id};
    rec.outputs = {out.id};
    bool ngx = x.requires_grad, ngb = b.requires_grad;
    int64_t xid = x.id, bid = b.id, oid = out.id;
    rec.backward = [=](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        if (ngx) {
            auto& gx = tp.grad_buf(xid, size_t(int64_t(N) * C * HW));
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*gy)[i];
        }
        if (ngb) {
            auto& gb = tp.grad_buf(bid, size_t(C));
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const S* gp = gy->data() + (size_t(n) * C + c) * HW;
                    S acc = S(0);
                    for (int i = 0; i < HW; ++i) acc += gp[i];
                    gb[size_t(c)] += acc;
                }
        }
    };
    tape->record(std::move(rec));
    return out;
}

template <class S>
struct BatchNormState {
    Tensor<S> gamma, beta;
    std::vector<S> running_mean, running_var;
    S momentum = S(0.1);
    S eps = S(1e-5);

    explicit BatchNormState(int channels = 0)
        : gamma(Tensor<S>::full({std::max(channels, 1)}, S(1), true)),
          beta(Tensor<S>::zeros({std::max(channels, 1)}, true)),
          running_mean(size_t(std::max(channels, 1)), S(0)),
          running_var(size_t(std::max(channels, 1)), S(1)) {}
};

// Per-channel batch norm over [N,C,H,W]. Training mode normalizes with biased
// batch statistics and folds them into the running buffers; eval mode is the
// affine map through the running statistics.
template <class S>
Tensor<S> batchnorm2d(Tape<S>* tape, const Tensor<S>& x, BatchNormState<S>& bn, bool train) {
    if (x.shape.size() != 4) throw ShapeError("batchnorm2d expects 4-d input");
    const int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    if (C != bn.gamma.shape[0]) throw ShapeError("batchnorm2d channel mismatch");
    const int64_t M = int64_t(N) * HW;
    const S* xp = x.ptr();

    std::vector<S> mean(C), invstd(C);
    if (train) {
        for (int c = 0; c < C; ++c) {
            S acc = S(0);
            for (int b = 0; b < N; ++b) {
                const S* p = xp + (size_t(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) acc += p[i];
            }
            mean[c] = acc / S(M);
        }
        for (int c = 0; c < C; ++c) {
            S acc = S(0);
            for (int b = 0; b < N; ++b) {
                const S* p = xp + (size_t(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    const S d = p[i] - mean[c];
                    acc += d * d;
                }
            }
            const S var = acc / S(M);
            invstd[c] = S(1) / std::sqrt(var + bn.eps);
            bn.running_mean[c] = (S(1) - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c];
            bn.running_var[c] = (S(1) - bn.momentum) * bn.running_var[c] + bn.momentum * var;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = bn.running_mean[c];
            invstd[c] = S(1) / std::sqrt(bn.running_var[c] + bn.eps);
        }
    }

    Tensor<S> out = Tensor<S>::zeros(x.shape);
    auto xhat = std::make_shared<std::vector<S>>(size_t(x.size()));
    for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c) {
            const S* p = xp + (size_t(b) * C + c) * HW;
            S* q = out.ptr() + (size_t(b) * C + c) * HW;
            S* h = xhat->data() + (size_t(b) * C + c) * HW;
            const S g = bn.gamma[c], bt = bn.beta[c], mu = mean[c], is = invstd[c];
            for (int i = 0; i < HW; ++i) {
                h[i] = (p[i] - mu) * is;
                q[i] = g * h[i] + bt;
            }
        }
    bool rg = x.requires_grad || bn.gamma.requires_grad || bn.beta.requires_grad;
    out.requires_grad = rg;
    if (!tape || !rg) return out;

    typename Tape<S>::Node rec;
    rec.inputs = {x.id, bn.gamma.id, bn.beta.id};
    rec.outputs = {out.id};
    auto gamma_d = bn.gamma.data;
    auto invstd_sh = std::make_shared<std::vector<S>>(std::move(invstd));
    bool ngx = x.requires_grad;
    int64_t xid = x.id, gid = bn.gamma.id, bid = bn.beta.id, oid = out.id;
    rec.backward = [=](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        auto& ggamma = tp.grad_buf(gid, size_t(C));
        auto& gbeta = tp.grad_buf(bid, size_t(C));
        std::vector<S> sum_gy(C, S(0)), sum_gyh(C, S(0));
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const S* gp = gy->data() + (size_t(b) * C + c) * HW;
                const S* h = xhat->data() + (size_t(b) * C + c) * HW;
                S a0 = S(0), a1 = S(0);
                for (int i = 0; i < HW; ++i) {
                    a0 += gp[i];
                    a1 += gp[i] * h[i];
                }
                sum_gy[c] += a0;
                sum_gyh[c] += a1;
            }
        for (int c = 0; c < C; ++c) {
            gbeta[size_t(c)] += sum_gy[c];
            ggamma[size_t(c)] += sum_gyh[c];
        }
        if (!ngx) return;
        auto& gx = tp.grad_buf(xid, size_t(int64_t(N) * C * HW));
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const S* gp = gy->data() + (size_t(b) * C + c) * HW;
                const S* h = xhat->data() + (size_t(b) * C + c) * HW;
                S* gq = gx.data() + (size_t(b) * C + c) * HW;
                const S gis = (*gamma_d)[size_t(c)] * (*invstd_sh)[size_t(c)];
                if (train) {
                    const S m = S(M);
                    for (int i = 0; i < HW; ++i)
                        gq[i] += gis * (gp[i] - sum_gy[c] / m - h[i] * sum_gyh[c] / m);
                } else {
                    for (int i = 0; i < HW; ++i) gq[i] += gis * gp[i];
                }
            }
    };
    tape->record(std::move(rec));
    return out;
}

// Mean softmax cross-entropy over the batch; labels are class indices.
template <class S>
Tensor<S> softmax_cross_entropy(Tape<S>* tape, const Tensor<S>& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2) throw ShapeError("softmax_cross_entropy expects [N,classes] logits");
    const int N = logits.shape[0], K = logits.shape[1];
    if (int(labels.size()) != N) throw ShapeError("label count does not match batch");
    for (int y : labels)
        if (y < 0 || y >= K) throw ValueError("label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
    auto probs = std::make_shared<std::vector<S>>(size_t(N) * K);
    S loss = S(0);
    for (int i = 0; i < N; ++i) {
        const S* row = logits.ptr() + size_t(i) * K;
        S m = row[0];
        for (int j = 1; j < K; ++j) m = std::max(m, row[j]);
        S z = S(0);
        for (int j = 0; j < K; ++j) z += std::exp(row[j] - m);
        const S logz = std::log(z) + m;
        for (int j = 0; j < K; ++j) (*probs)[size_t(i) * K + j] = std::exp(row[j] - logz);
        loss += logz - row[labels[size_t(i)]];
    }
    Tensor<S> out = Tensor<S>::zeros({1});
    out[0] = loss / S(N);
    out.requires_grad = logits.requires_grad;
    if (!tape || !logits.requires_grad) return out;
    typename Tape<S>::Node rec;
    rec.inputs = {logits.id};
    rec.outputs = {out.id};
    auto lbl = labels;
    int64_t lid = logits.id, oid = out.id;
    rec.backward = [probs, lbl, lid, oid, N, K](Tape<S>& tp) {
        const auto* gy = tp.grad_of(oid);
        if (!gy) return;
        const S g = (*gy)[0] / S(N);
        auto& gx = tp.grad_buf(lid, size_t(N) * K);
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < K; ++j) {
                S p = (*probs)[size_t(i) * K + j];
                if (j == lbl[size_t(i)]) p -= S(1);
                gx[size_t(i) * K + j] += g * p;
            }
    };
    tape->record(std::move(rec));
    return out;
}

}  // namespace sttn
