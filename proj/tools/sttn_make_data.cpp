// Generates the deterministic synthetic corpora (digit glyphs in MNIST IDX
// format, colored shapes in CIFAR-10 binary format) for offline runs.
#include <cstdio>

#include <CLI11.hpp>

#include "sttn/synth.hpp"

int main(int argc, char** argv) {
    CLI::App app{"synthetic corpus generator"};
    std::string kind = "digits", out_dir = "data/synth_digits";
    int train = 60000, test = 10000;
    uint64_t seed = 7;
    app.add_option("--kind", kind, "digits (IDX) | shapes (CIFAR-10 binary)")
        ->check(CLI::IsMember({"digits", "shapes"}));
    app.add_option("--out", out_dir, "output directory")->required();
    app.add_option("--train", train, "training sample count");
    app.add_option("--test", test, "test sample count");
    app.add_option("--seed", seed, "generator seed");
    CLI11_PARSE(app, argc, argv);

    try {
        if (kind == "digits")
            sttn::synth::write_digit_corpus_idx(out_dir, train, test, seed);
        else
            sttn::synth::write_shape_corpus_cifar(out_dir, train, test, seed);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    std::printf("wrote %s corpus to %s (%d train, %d test, seed %llu)\n", kind.c_str(), out_dir.c_str(),
                train, test, static_cast<unsigned long long>(seed));
    return 0;
}
