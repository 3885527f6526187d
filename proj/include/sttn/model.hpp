#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sttn/bitplane.hpp"
#include "sttn/quantize.hpp"

namespace sttn {

enum class QuantMode { float_full, sttn_2_2, sttn_2_32, twn_baseline };
enum class Arch { lenet_t, vgg7_t, resmini_t };
enum class PostAct { none, relu };

const char* to_string(QuantMode m);
const char* to_string(Arch a);
QuantMode quant_mode_from(const std::string& s);
Arch arch_from(const std::string& s);

struct ModelConfig {
    Arch arch = Arch::lenet_t;
    QuantMode mode = QuantMode::float_full;
    quant::BackwardMode backward = quant::BackwardMode::consistent;
    float width_mult = 1.f;
    int classes = 10;
    // input geometry, fixed by the architecture
    int in_ch = 1, in_h = 28, in_w = 28;
};

struct Param {
    std::string name;
    Tensor32* value = nullptr;
    bool decay = false;  // weight decay applies to latent conv/linear weights only
};

struct NamedBuffer {
    std::string name;
    std::vector<float>* value = nullptr;
};

struct Layer {
    virtual ~Layer() = default;
    virtual Tensor32 forward(Tape32* tape, const Tensor32& x, bool train) = 0;
    virtual void collect_params(const std::string&, std::vector<Param>&) {}
    virtual void collect_buffers(const std::string&, std::vector<NamedBuffer>&) {}
};

struct ConvFPLayer : Layer {
    Tensor32 w, b;
    int stride, pad;
    PostAct post;
    ConvFPLayer(int out_ch, int in_ch, int kh, int kw, int stride, int pad, PostAct post, Rng& rng);
    Tensor32 forward(Tape32* tape, const Tensor32& x, bool train) override;
    void collect_params(const std::string& prefix, std::vector<Param>& out) override;
};

struct LinearFPLayer : Layer {
    Tensor32 w, b;
    PostAct post;
    LinearFPLayer(int out_d, int in_d, PostAct post, Rng& rng);
    Tensor32 forward(Tape32* tape, const Tensor32& x, bool train) override;
    void collect_params(const std::string& prefix, std::vector<Param>& out) override;
};

struct MaxPoolLayer : Layer {
    int k, stride;
    MaxPoolLayer(int k, int stride) : k(k), stride(stride) {}
    Tensor32 forward(Tape32* tape, const Tensor32& x, bool) override { return maxpool2d(tape, x, k, stride); }
};

struct FlattenLayer : Layer {
    Tensor32 forward(Tape32* tape, const Tensor32& x, bool) override {
        return reshape(tape, x, {x.shape[0], int(x.size() / x.shape[0])});
    }
};

struct GlobalAvgPoolLayer : Layer {
    Tensor32 forward(Tape32* tape, const Tensor32& x, bool) override { return global_avgpool(tape, x); }
};

// The quantized building block: BatchNorm -> ternarization -> ternary conv ->
// activation. Both binary branches consume the same ternarized input. In
// float mode the ternarizer position holds a ReLU and the conv is a plain
// float conv; in weight-only modes the ternarizer is bypassed.
struct QuantConvBlock : Layer {
    QuantMode mode;
    quant::BackwardMode backward;
    BatchNormState<float> bn;
    Tensor32 w1, w2;  // latent pair (sttn modes); w1 doubles as the single latent otherwise
    int out_ch, in_ch, kh, kw, stride, pad;
    PostAct post;
    float last_alpha = 0.f;

    QuantConvBlock(int out_ch, int in_ch, int kh, int kw, int stride, int pad, PostAct post,
                   QuantMode mode, quant::BackwardMode bwd, Rng& rng);
    Tensor32 forward(Tape32* tape, const Tensor32& x, bool train) override;
    void collect_params(const std::string& prefix, std::vector<Param>& out) override;
    void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

    bool quantizes_weights() const { return mode != QuantMode::float_full; }
    bool ternarizes_input() const { return mode == QuantMode::sttn_2_2; }
    float current_alpha() const;       // shared scale refreshed from the latents
    TernaryKernel fused_kernel() const;  // inference kernel (sttn: b1+b2 at 2a; twn: t at a)
};

struct ResidualUnit : Layer {
    std::unique_ptr<QuantConvBlock> a, b;
    int pad_ch;  // extra zero channels on the skip path (0 = identity skip)
    ResidualUnit(std::unique_ptr<QuantConvBlock> a, std::unique_ptr<QuantConvBlock> b, int pad_ch)
        : a(std::move(a)), b(std::move(b)), pad_ch(pad_ch) {}
    Tensor32 forward(Tape32* tape, const Tensor32& x, bool train) override;
    void collect_params(const std::string& prefix, std::vector<Param>& out) override;
    void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;
};

struct NamedLayer {
    std::string name;
    std::unique_ptr<Layer> layer;
};

struct Model {
    ModelConfig cfg;
    std::vector<NamedLayer> layers;

    Tensor32 forward(Tape32* tape, const Tensor32& batch, bool train);
    std::vector<Param> parameters();
    std::vector<NamedBuffer> buffers();
    // quantized blocks in execution order, with their layer names
    std::vector<std::pair<std::string, QuantConvBlock*>> quant_blocks();
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

// argmax over the class dimension of [N,classes] logits
std::vector<int> predict(const Tensor32& logits);

}  // namespace sttn
