#pragma once

#include <variant>

#include "sttn/bitplane.hpp"
#include "sttn/config.hpp"
#include "sttn/model.hpp"

namespace sttn {

uint32_t crc32(const uint8_t* data, size_t n);

// ---- training checkpoint ("STCK", CRC-protected) ----

struct CheckpointMeta {
    RunConfig cfg;
    NormStats norm;
    int epoch = -1;
    float test_acc = 0.f;
};

void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta);
Model load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr);

// ---- fused inference model ("STTN") ----

struct FusedConvFP {
    int out_ch, in_ch, kh, kw, stride, pad;
    uint8_t post;  // 0 none, 1 relu
    std::vector<float> w, b;
};
struct FusedLinearFP {
    int out_d, in_d;
    uint8_t post;
    std::vector<float> w, b;
};
struct FusedMaxPool {
    int k, stride;
};
struct FusedFlatten {};
struct FusedGlobalAvgPool {};
struct FusedQuantConv {
    int out_ch, in_ch, kh, kw, stride, pad;
    uint8_t post;
    uint8_t ternarize_input;  // 1 = activations ternarized before the conv
    float bn_eps;
    std::vector<float> bn_gamma, bn_beta, bn_mean, bn_var;  // over in_ch
    PackedTernaryKernel kernel;
};
struct FusedResOpen {
    int pad_ch;  // zero channels appended on the skip path
};
struct FusedResClose {};

using FusedRecord = std::variant<FusedConvFP, FusedLinearFP, FusedMaxPool, FusedFlatten,
                                 FusedGlobalAvgPool, FusedQuantConv, FusedResOpen, FusedResClose>;

struct FusedModel {
    int in_ch = 0, in_h = 0, in_w = 0, classes = 0;
    NormStats norm;
    std::vector<FusedRecord> records;

    // logits for a normalized batch [N,C,H,W]; per_layer, when non-null,
    // receives each quantized record's flat output in execution order
    Tensor32 forward(const Tensor32& batch, std::vector<std::vector<float>>* per_layer = nullptr) const;
};

// Fuses every quantized block of a trained model. Throws if the model has
// nothing to fuse (float mode).
FusedModel build_fused(Model& model, const NormStats& norm);

void save_fused(const std::string& path, const FusedModel& fm);
FusedModel load_fused(const std::string& path);

// Reads the 4-byte magic to distinguish checkpoint kinds.
std::string sniff_format(const std::string& path);  // "STCK" | "STTN" | error

struct ProbeReport {
    bool ok = false;
    float max_dev = 0.f;      // worst |training - fused| over probed layers
    float tolerance = 0.f;
    std::string worst_layer;
};

// Compares the training graph (eval mode) against the fused pipeline on a
// random probe batch, per quantized layer and on the final logits.
ProbeReport probe_equivalence(Model& model, const FusedModel& fm, uint64_t seed);

// Probe-then-write; refuses to write when the probe fails.
ProbeReport export_fused_checked(Model& model, const NormStats& norm, const std::string& out_path,
                                 uint64_t seed);

}  // namespace sttn
