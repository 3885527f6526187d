#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sttn/serialize.hpp"
#include "testutil.hpp"

using namespace sttn;
using namespace sttn::testutil;
namespace fs = std::filesystem;

namespace {

CheckpointMeta demo_meta(Arch arch, QuantMode mode, float width) {
    CheckpointMeta meta;
    meta.cfg.model.arch = arch;
    meta.cfg.model.mode = mode;
    meta.cfg.model.width_mult = width;
    meta.cfg.seed = 13;
    meta.norm.mean = arch == Arch::lenet_t ? std::vector<float>{0.31f}
                                           : std::vector<float>{0.45f, 0.41f, 0.39f};
    meta.norm.stddev = arch == Arch::lenet_t ? std::vector<float>{0.27f}
                                             : std::vector<float>{0.2f, 0.21f, 0.22f};
    meta.epoch = 4;
    meta.test_acc = 0.91f;
    return meta;
}

std::string tmp(const char* name) { return (fs::temp_directory_path() / name).string(); }

void scramble_buffers(Model& m, Rng& rng) {
    for (auto& b : m.buffers())
        for (auto& v : *b.value) v += 0.05f * float(rng.gauss());
}

}  // namespace

TEST_CASE("checkpoint save/load round-trip") {
    Rng rng(61);
    CheckpointMeta meta = demo_meta(Arch::lenet_t, QuantMode::sttn_2_2, 0.5f);
    Model model = build_model(meta.cfg.model, meta.cfg.seed);
    scramble_buffers(model, rng);
    const std::string path = tmp("sttn_ckpt_roundtrip.stck");
    save_checkpoint(path, model, meta);

    CheckpointMeta back;
    Model loaded = load_checkpoint(path, &back);
    CHECK(back.epoch == 4);
    CHECK(back.test_acc == doctest::Approx(0.91f));
    CHECK(back.cfg.model.mode == QuantMode::sttn_2_2);
    CHECK(back.norm.mean == meta.norm.mean);

    auto pa = model.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(*pa[i].value->data == *pb[i].value->data);
    }
    auto ba = model.buffers();
    auto bb = loaded.buffers();
    for (size_t i = 0; i < ba.size(); ++i) CHECK(*ba[i].value == *bb[i].value);
    fs::remove(path);
}

TEST_CASE("tampered checkpoint bytes fail the checksum") {
    CheckpointMeta meta = demo_meta(Arch::lenet_t, QuantMode::sttn_2_2, 0.5f);
    Model model = build_model(meta.cfg.model, meta.cfg.seed);
    const std::string path = tmp("sttn_ckpt_tamper.stck");
    save_checkpoint(path, model, meta);

    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        const char junk = 0x5A;
        f.write(&junk, 1);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum"), ParseError);
    fs::remove(path);
}

TEST_CASE("wrong magic is rejected") {
    const std::string path = tmp("sttn_not_a_ckpt.bin");
    std::ofstream(path, std::ios::binary) << "JUNKJUNKJUNK";
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), ParseError);
    CHECK_THROWS_AS(sniff_format(path), ParseError);
    fs::remove(path);
}

TEST_CASE("export gate: float checkpoint has nothing to fuse") {
    CheckpointMeta meta = demo_meta(Arch::lenet_t, QuantMode::float_full, 0.5f);
    Model model = build_model(meta.cfg.model, meta.cfg.seed);
    CHECK_THROWS_WITH_AS(build_fused(model, meta.norm), doctest::Contains("nothing to fuse"),
                         ValueError);
}

TEST_CASE("fused model round-trips through the STTN container") {
    Rng rng(62);
    for (auto [arch, mode, width] :
         {std::tuple{Arch::lenet_t, QuantMode::sttn_2_2, 1.f},
          std::tuple{Arch::lenet_t, QuantMode::sttn_2_32, 1.f},
          std::tuple{Arch::lenet_t, QuantMode::twn_baseline, 1.f},
          std::tuple{Arch::vgg7_t, QuantMode::sttn_2_2, 0.125f},
          std::tuple{Arch::resmini_t, QuantMode::sttn_2_2, 0.5f}}) {
        CheckpointMeta meta = demo_meta(arch, mode, width);
        Model model = build_model(meta.cfg.model, meta.cfg.seed);
        scramble_buffers(model, rng);

        const std::string path = tmp("sttn_fused_roundtrip.sttn");
        ProbeReport rep = export_fused_checked(model, meta.norm, path, 99);
        INFO("arch ", to_string(arch), " mode ", to_string(mode), " worst ", rep.worst_layer, " dev ",
             rep.max_dev);
        CHECK(rep.ok);

        FusedModel fm = load_fused(path);
        CHECK(fm.classes == 10);
        CHECK(fm.norm.mean == meta.norm.mean);

        // loaded file behaves like the in-memory fused model and the
        // training graph
        Rng prng(63);
        Tensor32 probe = Tensor32::zeros({2, model.cfg.in_ch, model.cfg.in_h, model.cfg.in_w});
        for (int64_t i = 0; i < probe.size(); ++i) probe[i] = float(prng.gauss());
        Tensor32 a = fm.forward(probe);
        Tensor32 b = model.forward(nullptr, probe, false);
        float scale = 1.f;
        for (int64_t i = 0; i < b.size(); ++i) scale = std::max(scale, std::abs(b[i]));
        for (int64_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) / scale < 1e-5f);
        fs::remove(path);
    }
}

TEST_CASE("fused container rejects damage") {
    CheckpointMeta meta = demo_meta(Arch::lenet_t, QuantMode::sttn_2_2, 0.5f);
    Model model = build_model(meta.cfg.model, meta.cfg.seed);
    const std::string path = tmp("sttn_fused_damage.sttn");
    save_fused(path, build_fused(model, meta.norm));

    SUBCASE("trailing garbage") {
        std::ofstream f(path, std::ios::binary | std::ios::app);
        f << "zzz";
        f.close();
        CHECK_THROWS_WITH_AS(load_fused(path), doctest::Contains("trailing"), ParseError);
    }
    SUBCASE("truncation reports the offset") {
        const auto sz = fs::file_size(path);
        fs::resize_file(path, sz - 10);
        CHECK_THROWS_WITH_AS(load_fused(path), doctest::Contains("truncated"), ParseError);
    }
    fs::remove(path);
}

TEST_CASE("sniff distinguishes the two container kinds") {
    CheckpointMeta meta = demo_meta(Arch::lenet_t, QuantMode::sttn_2_2, 0.5f);
    Model model = build_model(meta.cfg.model, meta.cfg.seed);
    const std::string ck = tmp("sttn_sniff.stck"), fu = tmp("sttn_sniff.sttn");
    save_checkpoint(ck, model, meta);
    save_fused(fu, build_fused(model, meta.norm));
    CHECK(sniff_format(ck) == "STCK");
    CHECK(sniff_format(fu) == "STTN");
    fs::remove(ck);
    fs::remove(fu);
}
