#include <doctest.h>

#include "sttn/config.hpp"

using namespace sttn;

TEST_CASE("config parses keys, comments and defaults") {
    const std::string text =
        "# desk run\n"
        "arch = lenet_t\n"
        "mode = sttn_2_2\n"
        "dataset = mnist_idx\n"
        "data_dir = /tmp/mnist   # inline comment\n"
        "epochs = 20\n"
        "batch = 64\n"
        "lr = 0.005\n"
        "seed = 42\n";
    RunConfig cfg = parse_config_text(text, "test");
    CHECK(cfg.model.arch == Arch::lenet_t);
    CHECK(cfg.model.mode == QuantMode::sttn_2_2);
    CHECK(cfg.data_dir == "/tmp/mnist");
    CHECK(cfg.epochs == 20);
    CHECK(cfg.seed == 42);
    CHECK(cfg.model.backward == quant::BackwardMode::consistent);  // default
    CHECK(cfg.threads == 0);                                       // default single-thread
    CHECK(cfg.model.width_mult == 1.f);
}

TEST_CASE("vgg7 defaults to the reduced width multiplier") {
    RunConfig cfg = parse_config_text("arch = vgg7_t\n", "test");
    CHECK(cfg.model.width_mult == doctest::Approx(0.25f));
    RunConfig wide = parse_config_text("arch = vgg7_t\nwidth_mult = 1.0\n", "test");
    CHECK(wide.model.width_mult == doctest::Approx(1.0f));
}

TEST_CASE("config errors carry key names and line numbers") {
    CHECK_THROWS_WITH_AS(parse_config_text("arch = lenet_t\nbogus_key = 3\n", "cfg"),
                         doctest::Contains("line 2"), ParseError);
    CHECK_THROWS_WITH_AS(parse_config_text("arch = lenet_t\nbogus_key = 3\n", "cfg"),
                         doctest::Contains("bogus_key"), ParseError);
    CHECK_THROWS_WITH_AS(parse_config_text("epochs = soon\n", "cfg"), doctest::Contains("'epochs'"),
                         ParseError);
    CHECK_THROWS_WITH_AS(parse_config_text("mode =\n", "cfg"), doctest::Contains("no value"),
                         ParseError);
    CHECK_THROWS_WITH_AS(parse_config_text("mode = int4\n", "cfg"), doctest::Contains("int4"),
                         ParseError);
    CHECK_THROWS_WITH_AS(parse_config_text("this is not a config\n", "cfg"),
                         doctest::Contains("key = value"), ParseError);
}

TEST_CASE("config round-trips through its text form") {
    RunConfig cfg;
    cfg.model.arch = Arch::resmini_t;
    cfg.model.mode = QuantMode::sttn_2_32;
    cfg.model.backward = quant::BackwardMode::paper_literal;
    cfg.model.width_mult = 0.5f;
    cfg.dataset = DatasetKind::cifar10_bin;
    cfg.data_dir = "/data/cifar10";
    cfg.epochs = 7;
    cfg.batch = 32;
    cfg.lr = 0.0042f;
    cfg.weight_decay = 2e-6f;
    cfg.seed = 1234;
    cfg.augment_pad_crop = true;
    cfg.augment_hflip = true;
    cfg.threads = 2;

    RunConfig back = parse_config_text(config_to_text(cfg), "roundtrip");
    CHECK(back.model.arch == cfg.model.arch);
    CHECK(back.model.mode == cfg.model.mode);
    CHECK(back.model.backward == cfg.model.backward);
    CHECK(back.model.width_mult == doctest::Approx(cfg.model.width_mult));
    CHECK(back.dataset == cfg.dataset);
    CHECK(back.data_dir == cfg.data_dir);
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.batch == cfg.batch);
    CHECK(back.lr == doctest::Approx(cfg.lr));
    CHECK(back.seed == cfg.seed);
    CHECK(back.augment_pad_crop == cfg.augment_pad_crop);
    CHECK(back.augment_hflip == cfg.augment_hflip);
    CHECK(back.threads == cfg.threads);
}
