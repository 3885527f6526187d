#pragma once

#include <array>

#include "sttn/model.hpp"

namespace sttn {

// Per-layer quantization report: sparsity of the fused kernel, approximation
// errors under the competing schemes, and a 64-bin latent-weight histogram
// annotated with each bin's ternary destination counts.
struct LayerAnalysis {
    static constexpr int kBins = 64;

    std::string name;
    int64_t kernel_elems = 0;  // elements per latent kernel (N)
    double alpha = 0.0;        // shared scale of the pair (0 for twn baseline)
    double scale = 0.0;        // fused kernel scale
    double sparsity = 0.0;     // zero fraction of the fused ternary kernel

    // approximation errors (sum of squares); NaN when not applicable
    double err_sttn = 0.0;        // ||W1-aB1||^2 + ||W2-aB2||^2 on this model's latents
    double err_sttn_fused = 0.0;  // ||(W1+W2) - 2aT||^2, the fused-kernel view
    double err_twn_heur = 0.0;    // hard-threshold heuristic on the float twin's weights
    double err_twn_oracle = 0.0;  // exact single-kernel optimum on the float twin's weights

    double bin_lo = 0.0, bin_hi = 0.0;  // histogram range over this layer's latents
    std::array<int64_t, kBins> hist{};
    std::array<int64_t, kBins> to_neg{}, to_zero{}, to_pos{};
};

// float_ref, when given, must be the float-mode twin (same arch and width);
// its weights feed the hard-threshold columns.
std::vector<LayerAnalysis> analyze_model(Model& model, Model* float_ref);

void write_analysis_csv(const std::string& path, const std::vector<LayerAnalysis>& rows);
void write_analysis_hist_csv(const std::string& path, const std::vector<LayerAnalysis>& rows);
void write_analysis_json(const std::string& path, const std::vector<LayerAnalysis>& rows);

}  // namespace sttn
