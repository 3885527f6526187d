#include <doctest.h>

#include "sttn/model.hpp"
#include "sttn/serialize.hpp"
#include "testutil.hpp"

using namespace sttn;
using namespace sttn::testutil;

namespace {

Model make(Arch arch, QuantMode mode, float width, uint64_t seed = 11) {
    ModelConfig cfg;
    cfg.arch = arch;
    cfg.mode = mode;
    cfg.width_mult = width;
    return build_model(cfg, seed);
}

}  // namespace

TEST_CASE("model forward shapes") {
    Rng rng(41);
    SUBCASE("lenet_t on MNIST-shaped input") {
        for (QuantMode m : {QuantMode::float_full, QuantMode::sttn_2_2, QuantMode::sttn_2_32,
                            QuantMode::twn_baseline}) {
            Model model = make(Arch::lenet_t, m, 1.f);
            auto x = random_tensor<float>({8, 1, 28, 28}, rng, false);
            CHECK(model.forward(nullptr, x, false).shape == Shape{8, 10});
        }
    }
    SUBCASE("reduced vgg7_t") {
        Model model = make(Arch::vgg7_t, QuantMode::sttn_2_2, 0.25f);
        auto x = random_tensor<float>({4, 3, 32, 32}, rng, false);
        CHECK(model.forward(nullptr, x, false).shape == Shape{4, 10});
    }
    SUBCASE("resmini_t") {
        Model model = make(Arch::resmini_t, QuantMode::sttn_2_2, 1.f);
        auto x = random_tensor<float>({2, 3, 32, 32}, rng, false);
        CHECK(model.forward(nullptr, x, false).shape == Shape{2, 10});
        CHECK(model.quant_blocks().size() == 8);
    }
    SUBCASE("input shape mismatch") {
        Model model = make(Arch::lenet_t, QuantMode::float_full, 1.f);
        auto x = random_tensor<float>({1, 3, 32, 32}, rng, false);
        CHECK_THROWS_AS(model.forward(nullptr, x, false), ShapeError);
    }
}

TEST_CASE("first and last layers stay full precision in every mode") {
    for (Arch arch : {Arch::lenet_t, Arch::vgg7_t, Arch::resmini_t})
        for (QuantMode m : {QuantMode::sttn_2_2, QuantMode::sttn_2_32, QuantMode::twn_baseline}) {
            Model model = make(arch, m, arch == Arch::vgg7_t ? 0.125f : 0.5f);
            CHECK(dynamic_cast<ConvFPLayer*>(model.layers.front().layer.get()) != nullptr);
            CHECK(dynamic_cast<LinearFPLayer*>(model.layers.back().layer.get()) != nullptr);
        }
}

TEST_CASE("sttn block pair shapes share one scale") {
    Model model = make(Arch::lenet_t, QuantMode::sttn_2_2, 2.f);  // widths 16/32
    auto blocks = model.quant_blocks();
    REQUIRE(blocks.size() == 2);
    auto* b1 = blocks[0].second;
    CHECK(b1->w1.shape == Shape{32, 16, 3, 3});
    CHECK(b1->w2.shape == Shape{32, 16, 3, 3});
    CHECK(b1->current_alpha() > 0.f);
}

TEST_CASE("sttn_2_32 leaves activations full precision") {
    Model model = make(Arch::lenet_t, QuantMode::sttn_2_32, 1.f);
    for (auto& [name, q] : model.quant_blocks()) {
        CHECK(q->quantizes_weights());
        CHECK(!q->ternarizes_input());
    }
}

TEST_CASE("float-mode block is the BN->ReLU->Conv reference path") {
    Rng rng(42);
    QuantConvBlock block(4, 3, 3, 3, 1, 1, PostAct::none, QuantMode::float_full,
                         quant::BackwardMode::consistent, rng);
    auto x = random_tensor<float>({2, 3, 6, 6}, rng, false);
    auto y = block.forward(nullptr, x, false);

    auto h = batchnorm2d<float>(nullptr, x, block.bn, false);
    h = relu<float>(nullptr, h);
    auto ref = conv2d<float>(nullptr, h, block.w1, 1, 1);
    REQUIRE(y.shape == ref.shape);
    for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == ref[i]);
}

TEST_CASE("branch-sum identity: two scaled binary branches equal the fused ternary conv") {
    Rng rng(43);
    QuantConvBlock block(6, 4, 3, 3, 1, 1, PostAct::relu, QuantMode::sttn_2_2,
                         quant::BackwardMode::consistent, rng);
    auto x = random_tensor<float>({2, 4, 8, 8}, rng, false, 1.2);
    auto y = block.forward(nullptr, x, false);

    // manual two-branch route
    auto h = batchnorm2d<float>(nullptr, x, block.bn, false);
    Tensor32 xt = Tensor32::zeros(h.shape);
    quant::ternarize<float>({h.ptr(), size_t(h.size())}, {xt.ptr(), size_t(xt.size())});
    auto q = quant::sttn_quantize_pair<float>({block.w1.ptr(), size_t(block.w1.size())},
                                              {block.w2.ptr(), size_t(block.w2.size())});
    Tensor32 b1t({6, 4, 3, 3}, q.b1), b2t({6, 4, 3, 3}, q.b2);
    auto y1 = conv2d<float>(nullptr, xt, b1t, 1, 1);
    auto y2 = conv2d<float>(nullptr, xt, b2t, 1, 1);
    float worst = 0.f;
    for (int64_t i = 0; i < y.size(); ++i) {
        const float two_branch = std::max(q.alpha * (y1[i] + y2[i]), 0.f);  // post relu
        worst = std::max(worst, std::abs(two_branch - y[i]));
    }
    CHECK(worst < 1e-5f);

    // fused ternary route
    auto fused = block.fused_kernel();
    std::vector<int8_t> xt8(size_t(xt.size()));
    for (int64_t i = 0; i < xt.size(); ++i) xt8[size_t(i)] = int8_t(xt[i]);
    auto pk = pack_kernel(fused);
    for (int b = 0; b < 2; ++b) {
        std::vector<int32_t> acc;
        std::vector<float> out;
        ternary_conv2d(pk, xt8.data() + size_t(b) * 4 * 64, 4, 8, 8, 1, 1, acc, out);
        for (size_t i = 0; i < out.size(); ++i) {
            const float fused_post = std::max(out[i], 0.f);
            CHECK(std::abs(fused_post - y[size_t(b) * out.size() + i]) < 1e-5f);
        }
    }
}

TEST_CASE("setting w2 := w1 collapses to a binary kernel with no zeros") {
    Rng rng(44);
    QuantConvBlock block(4, 2, 3, 3, 1, 1, PostAct::none, QuantMode::sttn_2_2,
                         quant::BackwardMode::consistent, rng);
    *block.w2.data = *block.w1.data;
    auto k = block.fused_kernel();
    CHECK(k.sparsity() == 0.0);
}

TEST_CASE("quantized training updates latents only; views are derived") {
    Rng rng(45);
    Model model = make(Arch::lenet_t, QuantMode::sttn_2_2, 0.5f);
    auto params = model.parameters();
    // every trainable tensor is a latent float kernel or a BN affine term
    for (auto& p : params) {
        const bool latent = p.name.ends_with(".w1") || p.name.ends_with(".w2") ||
                            p.name.ends_with(".w") || p.name.ends_with(".b");
        const bool bn = p.name.find(".bn.") != std::string::npos;
        CHECK((latent || bn));
    }
    // gradients reach the stem and head (full-precision path) and the latents
    auto x = random_tensor<float>({4, 1, 28, 28}, rng, false);
    std::vector<int> labels{0, 1, 2, 3};
    Tape32 tape;
    auto logits = model.forward(&tape, x, true);
    auto loss = softmax_cross_entropy(&tape, logits, labels);
    auto grads = tape.backward(loss);
    for (auto& p : params) {
        REQUIRE_MESSAGE(grads.count(p.value->id), p.name);
        double norm = 0;
        for (float g : grads.at(p.value->id)) norm += double(g) * g;
        if (p.name == "stem.w" || p.name == "head.w")
            CHECK(norm > 0.0);
    }
}

TEST_CASE("residual unit keeps shapes and pads the skip") {
    Rng rng(46);
    Model model = make(Arch::resmini_t, QuantMode::sttn_2_2, 1.f);
    auto x = random_tensor<float>({2, 3, 32, 32}, rng, false);
    Tape32 tape;
    for (auto& p : model.parameters()) tape.watch(*p.value);
    auto logits = model.forward(&tape, x, true);
    std::vector<int> labels{1, 2};
    auto loss = softmax_cross_entropy(&tape, logits, labels);
    auto grads = tape.backward(loss);
    // all residual-unit latents receive gradients
    for (auto& [name, q] : model.quant_blocks()) {
        double n1 = 0;
        for (float g : grads.at(q->w1.id)) n1 += double(g) * g;
        CHECK(n1 >= 0.0);
    }
}

TEST_CASE("training-graph output equals fused-inference output (probe)") {
    for (QuantMode m : {QuantMode::sttn_2_2, QuantMode::sttn_2_32, QuantMode::twn_baseline}) {
        Model model = make(Arch::lenet_t, m, 1.f, 77);
        NormStats ns;
        ns.mean = {0.5f};
        ns.stddev = {0.25f};
        FusedModel fm = build_fused(model, ns);
        ProbeReport rep = probe_equivalence(model, fm, 123);
        INFO("mode ", to_string(m), " worst layer ", rep.worst_layer, " dev ", rep.max_dev);
        CHECK(rep.ok);
    }
}
