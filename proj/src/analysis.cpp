#include "sttn/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "sttn/bitplane.hpp"

namespace sttn {

namespace {

void fill_histogram(LayerAnalysis& la, const std::vector<const float*>& latents, int64_t n,
                    const std::vector<int8_t>& dest) {
    constexpr int B = LayerAnalysis::kBins;
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    for (const float* w : latents)
        for (int64_t i = 0; i < n; ++i) {
            lo = std::min(lo, w[i]);
            hi = std::max(hi, w[i]);
        }
    if (!(hi > lo)) hi = lo + 1e-6f;
    la.bin_lo = lo;
    la.bin_hi = hi;
    const double width = (double(hi) - double(lo)) / B;
    for (const float* w : latents)
        for (int64_t i = 0; i < n; ++i) {
            int b = int((double(w[i]) - double(lo)) / width);
            b = std::clamp(b, 0, B - 1);
            la.hist[size_t(b)]++;
            const int8_t d = dest[size_t(i)];
            if (d < 0) la.to_neg[size_t(b)]++;
            else if (d == 0) la.to_zero[size_t(b)]++;
            else la.to_pos[size_t(b)]++;
        }
}

}  // namespace

std::vector<LayerAnalysis> analyze_model(Model& model, Model* float_ref) {
    auto blocks = model.quant_blocks();
    if (model.cfg.mode == QuantMode::float_full)
        throw ValueError("analyze: checkpoint is full precision, no quantized layers to report");

    std::vector<std::pair<std::string, QuantConvBlock*>> ref_blocks;
    if (float_ref) {
        ref_blocks = float_ref->quant_blocks();
        if (ref_blocks.size() != blocks.size())
            throw ValueError("analyze: float reference has a different quantized-layer structure");
    }

    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<LayerAnalysis> out;
    for (size_t bi = 0; bi < blocks.size(); ++bi) {
        auto& [name, q] = blocks[bi];
        LayerAnalysis la;
        la.name = name;
        la.kernel_elems = q->w1.size();
        const TernaryKernel fused = q->fused_kernel();
        la.scale = fused.scale;
        la.sparsity = fused.sparsity();

        const int64_t n = q->w1.size();
        if (q->w2.defined()) {
            const float a = q->current_alpha();
            la.alpha = a;
            la.err_sttn = double(quant::pair_objective<float>({q->w1.ptr(), size_t(n)},
                                                              {q->w2.ptr(), size_t(n)}, a));
            double fe = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                const double d = double(q->w1[i]) + double(q->w2[i]) - double(fused.scale) * fused.t[size_t(i)];
                fe += d * d;
            }
            la.err_sttn_fused = fe;
            fill_histogram(la, {q->w1.ptr(), q->w2.ptr()}, n, fused.t);
        } else {
            la.alpha = q->last_alpha;
            la.err_sttn = nan;
            la.err_sttn_fused = double(quant::approx_error<float>(
                {q->w1.ptr(), size_t(n)}, float(fused.scale), {fused.t.data(), fused.t.size()}));
            fill_histogram(la, {q->w1.ptr()}, n, fused.t);
        }

        if (float_ref) {
            QuantConvBlock* rq = ref_blocks[bi].second;
            if (rq->w1.size() != n)
                throw ValueError("analyze: float reference layer '" + name + "' has different shape");
            std::span<const float> wref{rq->w1.ptr(), size_t(n)};
            auto th = quant::twn_quantize<float>(wref, quant::TwnMode::heuristic);
            la.err_twn_heur = double(quant::approx_error<float>(wref, th.alpha, {th.t.data(), th.t.size()}));
            auto orc = quant::optimal_ternary_oracle<float>(wref);
            la.err_twn_oracle =
                double(quant::approx_error<float>(wref, orc.alpha, {orc.t.data(), orc.t.size()}));
        } else {
            la.err_twn_heur = nan;
            la.err_twn_oracle = nan;
        }
        out.push_back(std::move(la));
    }
    return out;
}

void write_analysis_csv(const std::string& path, const std::vector<LayerAnalysis>& rows) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write '" + path + "'");
    f << "layer,kernel_elems,alpha,scale,sparsity,err_sttn,err_sttn_fused,err_twn_heuristic,err_twn_oracle\n";
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      r.name.c_str(), static_cast<long long>(r.kernel_elems), r.alpha, r.scale, r.sparsity,
                      r.err_sttn, r.err_sttn_fused, r.err_twn_heur, r.err_twn_oracle);
        f << buf;
    }
}

void write_analysis_hist_csv(const std::string& path, const std::vector<LayerAnalysis>& rows) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write '" + path + "'");
    f << "layer,bin,lo,hi,count,to_neg,to_zero,to_pos\n";
    char buf[512];
    for (const auto& r : rows) {
        const double width = (r.bin_hi - r.bin_lo) / LayerAnalysis::kBins;
        for (int b = 0; b < LayerAnalysis::kBins; ++b) {
            std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g,%lld,%lld,%lld,%lld\n", r.name.c_str(), b,
                          r.bin_lo + b * width, r.bin_lo + (b + 1) * width,
                          static_cast<long long>(r.hist[size_t(b)]),
                          static_cast<long long>(r.to_neg[size_t(b)]),
                          static_cast<long long>(r.to_zero[size_t(b)]),
                          static_cast<long long>(r.to_pos[size_t(b)]));
            f << buf;
        }
    }
}

void write_analysis_json(const std::string& path, const std::vector<LayerAnalysis>& rows) {
    nlohmann::json root = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j;
        j["layer"] = r.name;
        j["kernel_elems"] = r.kernel_elems;
        j["alpha"] = r.alpha;
        j["scale"] = r.scale;
        j["sparsity"] = r.sparsity;
        auto num_or_null = [](double v) {
            return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
        };
        j["err_sttn"] = num_or_null(r.err_sttn);
        j["err_sttn_fused"] = num_or_null(r.err_sttn_fused);
        j["err_twn_heuristic"] = num_or_null(r.err_twn_heur);
        j["err_twn_oracle"] = num_or_null(r.err_twn_oracle);
        j["hist_lo"] = r.bin_lo;
        j["hist_hi"] = r.bin_hi;
        j["hist"] = r.hist;
        j["hist_to_neg"] = r.to_neg;
        j["hist_to_zero"] = r.to_zero;
        j["hist_to_pos"] = r.to_pos;
        root.push_back(std::move(j));
    }
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write '" + path + "'");
    f << root.dump(2) << "\n";
}

}  // namespace sttn
