#include "sttn/model.hpp"

#include <cmath>

namespace sttn {

const char* to_string(QuantMode m) {
    switch (m) {
        case QuantMode::float_full: return "float";
        case QuantMode::sttn_2_2: return "sttn_2_2";
        case QuantMode::sttn_2_32: return "sttn_2_32";
        case QuantMode::twn_baseline: return "twn_baseline";
    }
    return "?";
}

const char* to_string(Arch a) {
    switch (a) {
        case Arch::lenet_t: return "lenet_t";
        case Arch::vgg7_t: return "vgg7_t";
        case Arch::resmini_t: return "resmini_t";
    }
    return "?";
}

QuantMode quant_mode_from(const std::string& s) {
    if (s == "float") return QuantMode::float_full;
    if (s == "sttn_2_2") return QuantMode::sttn_2_2;
    if (s == "sttn_2_32") return QuantMode::sttn_2_32;
    if (s == "twn_baseline") return QuantMode::twn_baseline;
    throw ValueError("unknown quantization mode '" + s + "' (float|sttn_2_2|sttn_2_32|twn_baseline)");
}

Arch arch_from(const std::string& s) {
    if (s == "lenet_t") return Arch::lenet_t;
    if (s == "vgg7_t") return Arch::vgg7_t;
    if (s == "resmini_t") return Arch::resmini_t;
    throw ValueError("unknown architecture '" + s + "' (lenet_t|vgg7_t|resmini_t)");
}

namespace {
Tensor32 he_init(Shape shape, int fan_in, Rng& rng) {
    Tensor32 t = Tensor32::zeros(shape, true);
    const float s = std::sqrt(2.f / float(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = s * float(rng.gauss());
    return t;
}

Tensor32 apply_post(Tape32* tape, const Tensor32& x, PostAct post) {
    return post == PostAct::relu ? relu(tape, x) : x;
}
}  // namespace

ConvFPLayer::ConvFPLayer(int out_ch, int in_ch, int kh, int kw, int stride, int pad, PostAct post,
                         Rng& rng)
    : w(he_init({out_ch, in_ch, kh, kw}, in_ch * kh * kw, rng)),
      b(Tensor32::zeros({out_ch}, true)),
      stride(stride),
      pad(pad),
      post(post) {}

Tensor32 ConvFPLayer::forward(Tape32* tape, const Tensor32& x, bool) {
    Tensor32 y = conv2d(tape, x, w, stride, pad);
    y = bias_channel(tape, y, b);
    return apply_post(tape, y, post);
}

void ConvFPLayer::collect_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + ".w", &w, true});
    out.push_back({prefix + ".b", &b, false});
}

LinearFPLayer::LinearFPLayer(int out_d, int in_d, PostAct post, Rng& rng)
    : w(he_init({out_d, in_d}, in_d, rng)), b(Tensor32::zeros({out_d}, true)), post(post) {}

Tensor32 LinearFPLayer::forward(Tape32* tape, const Tensor32& x, bool) {
    return apply_post(tape, linear(tape, x, w, b), post);
}

void LinearFPLayer::collect_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + ".w", &w, true});
    out.push_back({prefix + ".b", &b, false});
}

QuantConvBlock::QuantConvBlock(int out_ch, int in_ch, int kh, int kw, int stride, int pad, PostAct post,
                               QuantMode mode, quant::BackwardMode bwd, Rng& rng)
    : mode(mode),
      backward(bwd),
      bn(in_ch),
      w1(he_init({out_ch, in_ch, kh, kw}, in_ch * kh * kw, rng)),
      out_ch(out_ch),
      in_ch(in_ch),
      kh(kh),
      kw(kw),
      stride(stride),
      pad(pad),
      post(post) {
    if (mode == QuantMode::sttn_2_2 || mode == QuantMode::sttn_2_32)
        w2 = he_init({out_ch, in_ch, kh, kw}, in_ch * kh * kw, rng);
}

Tensor32 QuantConvBlock::forward(Tape32* tape, const Tensor32& x, bool train) {
    Tensor32 h = batchnorm2d(tape, x, bn, train);
    Tensor32 y;
    switch (mode) {
        case QuantMode::float_full:
            h = relu(tape, h);
            y = conv2d(tape, h, w1, stride, pad);
            break;
        case QuantMode::sttn_2_2:
            h = quant::ternarize_activation(tape, h);
            y = quant::sttn_pair_conv2d(tape, h, w1, w2, stride, pad, backward, &last_alpha);
            break;
        case QuantMode::sttn_2_32:
            y = quant::sttn_pair_conv2d(tape, h, w1, w2, stride, pad, backward, &last_alpha);
            break;
        case QuantMode::twn_baseline:
            y = quant::twn_conv2d(tape, h, w1, stride, pad, &last_alpha);
            break;
    }
    return apply_post(tape, y, post);
}

void QuantConvBlock::collect_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + ".bn.gamma", &bn.gamma, false});
    out.push_back({prefix + ".bn.beta", &bn.beta, false});
    out.push_back({prefix + ".w1", &w1, true});
    if (w2.defined()) out.push_back({prefix + ".w2", &w2, true});
}

void QuantConvBlock::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
    out.push_back({prefix + ".bn.running_mean", &bn.running_mean});
    out.push_back({prefix + ".bn.running_var", &bn.running_var});
}

float QuantConvBlock::current_alpha() const {
    if (!w2.defined()) return 0.f;
    return quant::shared_alpha<float>({w1.ptr(), size_t(w1.size())}, {w2.ptr(), size_t(w2.size())});
}

TernaryKernel QuantConvBlock::fused_kernel() const {
    if (mode == QuantMode::sttn_2_2 || mode == QuantMode::sttn_2_32) {
        const float a = current_alpha();
        return fuse_pair({w1.ptr(), size_t(w1.size())}, {w2.ptr(), size_t(w2.size())}, out_ch, in_ch, kh,
                         kw, a);
    }
    if (mode == QuantMode::twn_baseline) {
        auto q = quant::twn_quantize<float>({w1.ptr(), size_t(w1.size())}, quant::TwnMode::heuristic);
        TernaryKernel k;
        k.out_ch = out_ch;
        k.in_ch = in_ch;
        k.kh = kh;
        k.kw = kw;
        k.t = std::move(q.t);
        k.scale = q.alpha;
        return k;
    }
    throw ValueError("fused_kernel: block is full precision, nothing to fuse");
}

Tensor32 ResidualUnit::forward(Tape32* tape, const Tensor32& x, bool train) {
    Tensor32 main = b->forward(tape, a->forward(tape, x, train), train);
    Tensor32 skip = pad_ch > 0 ? pad_channels(tape, x, pad_ch) : x;
    return add(tape, main, skip);
}

void ResidualUnit::collect_params(const std::string& prefix, std::vector<Param>& out) {
    a->collect_params(prefix + ".a", out);
    b->collect_params(prefix + ".b", out);
}

void ResidualUnit::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
    a->collect_buffers(prefix + ".a", out);
    b->collect_buffers(prefix + ".b", out);
}

Tensor32 Model::forward(Tape32* tape, const Tensor32& batch, bool train) {
    if (batch.shape.size() != 4 || batch.shape[1] != cfg.in_ch || batch.shape[2] != cfg.in_h ||
        batch.shape[3] != cfg.in_w)
        throw ShapeError("model input " + shape_str(batch.shape) + " does not match " +
                         std::string(to_string(cfg.arch)) + " input [Nx" + std::to_string(cfg.in_ch) +
                         "x" + std::to_string(cfg.in_h) + "x" + std::to_string(cfg.in_w) + "]");
    if (tape)
        for (auto& p : parameters()) tape->watch(*p.value);
    Tensor32 h = batch;
    for (auto& nl : layers) h = nl.layer->forward(tape, h, train);
    return h;
}

std::vector<Param> Model::parameters() {
    std::vector<Param> out;
    for (auto& nl : layers) nl.layer->collect_params(nl.name, out);
    return out;
}

std::vector<NamedBuffer> Model::buffers() {
    std::vector<NamedBuffer> out;
    for (auto& nl : layers) nl.layer->collect_buffers(nl.name, out);
    return out;
}

std::vector<std::pair<std::string, QuantConvBlock*>> Model::quant_blocks() {
    std::vector<std::pair<std::string, QuantConvBlock*>> out;
    for (auto& nl : layers) {
        if (auto* q = dynamic_cast<QuantConvBlock*>(nl.layer.get()))
            out.emplace_back(nl.name, q);
        else if (auto* r = dynamic_cast<ResidualUnit*>(nl.layer.get())) {
            out.emplace_back(nl.name + ".a", r->a.get());
            out.emplace_back(nl.name + ".b", r->b.get());
        }
    }
    return out;
}

namespace {
int scaled(int base, float mult) { return std::max(1, int(std::lround(double(base) * mult))); }
}

Model build_model(const ModelConfig& cfg_in, uint64_t seed) {
    Model m;
    m.cfg = cfg_in;
    auto& cfg = m.cfg;
    Rng rng(seed);
    const QuantMode q = cfg.mode;
    const auto bwd = cfg.backward;

    auto block = [&](int out_ch, int in_ch, int k, int pad, PostAct post) {
        return std::make_unique<QuantConvBlock>(out_ch, in_ch, k, k, 1, pad, post, q, bwd, rng);
    };

    switch (cfg.arch) {
        case Arch::lenet_t: {
            cfg.in_ch = 1;
            cfg.in_h = cfg.in_w = 28;
            const int c1 = scaled(8, cfg.width_mult), c2 = scaled(16, cfg.width_mult);
            m.layers.push_back({"stem", std::make_unique<ConvFPLayer>(c1, 1, 5, 5, 1, 2, PostAct::relu, rng)});
            m.layers.push_back({"pool1", std::make_unique<MaxPoolLayer>(2, 2)});
            m.layers.push_back({"block1", block(c2, c1, 3, 1, PostAct::relu)});
            m.layers.push_back({"pool2", std::make_unique<MaxPoolLayer>(2, 2)});
            m.layers.push_back({"block2", block(c2, c2, 3, 1, PostAct::relu)});
            m.layers.push_back({"flatten", std::make_unique<FlattenLayer>()});
            m.layers.push_back({"head", std::make_unique<LinearFPLayer>(cfg.classes, c2 * 7 * 7, PostAct::none, rng)});
            break;
        }
        case Arch::vgg7_t: {
            cfg.in_ch = 3;
            cfg.in_h = cfg.in_w = 32;
            const int c1 = scaled(128, cfg.width_mult), c2 = scaled(256, cfg.width_mult),
                      c3 = scaled(512, cfg.width_mult), fc = scaled(1024, cfg.width_mult);
            m.layers.push_back({"stem", std::make_unique<ConvFPLayer>(c1, 3, 3, 3, 1, 1, PostAct::relu, rng)});
            m.layers.push_back({"block1", block(c1, c1, 3, 1, PostAct::relu)});
            m.layers.push_back({"pool1", std::make_unique<MaxPoolLayer>(2, 2)});
            m.layers.push_back({"block2", block(c2, c1, 3, 1, PostAct::relu)});
            m.layers.push_back({"block3", block(c2, c2, 3, 1, PostAct::relu)});
            m.layers.push_back({"pool2", std::make_unique<MaxPoolLayer>(2, 2)});
            m.layers.push_back({"block4", block(c3, c2, 3, 1, PostAct::relu)});
            m.layers.push_back({"block5", block(c3, c3, 3, 1, PostAct::relu)});
            m.layers.push_back({"pool3", std::make_unique<MaxPoolLayer>(2, 2)});
            m.layers.push_back({"flatten", std::make_unique<FlattenLayer>()});
            m.layers.push_back({"fc1", std::make_unique<LinearFPLayer>(fc, c3 * 4 * 4, PostAct::relu, rng)});
            m.layers.push_back({"head", std::make_unique<LinearFPLayer>(cfg.classes, fc, PostAct::none, rng)});
            break;
        }
        case Arch::resmini_t: {
            cfg.in_ch = 3;
            cfg.in_h = cfg.in_w = 32;
            const int c1 = scaled(16, cfg.width_mult), c2 = scaled(32, cfg.width_mult),
                      c3 = scaled(64, cfg.width_mult);
            auto unit = [&](int out_ch, int in_ch) {
                auto a = std::make_unique<QuantConvBlock>(out_ch, in_ch, 3, 3, 1, 1, PostAct::relu, q, bwd, rng);
                auto b = std::make_unique<QuantConvBlock>(out_ch, out_ch, 3, 3, 1, 1, PostAct::none, q, bwd, rng);
                return std::make_unique<ResidualUnit>(std::move(a), std::move(b), out_ch - in_ch);
            };
            m.layers.push_back({"stem", std::make_unique<ConvFPLayer>(c1, 3, 3, 3, 1, 1, PostAct::relu, rng)});
            m.layers.push_back({"unit1", unit(c1, c1)});
            m.layers.push_back({"unit2", unit(c1, c1)});
            m.layers.push_back({"pool1", std::make_unique<MaxPoolLayer>(2, 2)});
            m.layers.push_back({"unit3", unit(c2, c1)});
            m.layers.push_back({"pool2", std::make_unique<MaxPoolLayer>(2, 2)});
            m.layers.push_back({"unit4", unit(c3, c2)});
            m.layers.push_back({"gap", std::make_unique<GlobalAvgPoolLayer>()});
            m.layers.push_back({"head", std::make_unique<LinearFPLayer>(cfg.classes, c3, PostAct::none, rng)});
            break;
        }
    }
    return m;
}

std::vector<int> predict(const Tensor32& logits) {
    const int N = logits.shape[0], K = logits.shape[1];
    std::vector<int> out(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
        int best = 0;
        for (int j = 1; j < K; ++j)
            if (logits[size_t(i) * K + j] > logits[size_t(i) * K + best]) best = j;
        out[size_t(i)] = best;
    }
    return out;
}

}  // namespace sttn
