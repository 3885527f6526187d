#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "sttn/analysis.hpp"
#include "sttn/serialize.hpp"
#include "sttn/train.hpp"

namespace {

using namespace sttn;

std::string default_metrics_path(const std::string& out) { return out + ".metrics.csv"; }

int cmd_train(const std::string& config_path, const std::string& out_path, int64_t seed_override,
              int threads_override) {
    RunConfig cfg = parse_config_file(config_path);
    if (seed_override >= 0) cfg.seed = uint64_t(seed_override);
    if (threads_override >= 0) cfg.threads = threads_override;
    set_threads(cfg.threads);
    if (cfg.data_dir.empty())
        throw ParseError("config '" + config_path + "': missing dataset path key 'data_dir'");

    std::printf("loading %s from %s\n", to_string(cfg.dataset), cfg.data_dir.c_str());
    Dataset train_ds = load_split(cfg.dataset, cfg.data_dir, true);
    Dataset test_ds = load_split(cfg.dataset, cfg.data_dir, false);
    NormStats ns = compute_norm_stats(train_ds);

    Model model = build_model(cfg.model, cfg.seed);
    std::printf("training %s (%s) for %d epochs, batch %d, lr %g, seed %llu\n",
                to_string(cfg.model.arch), to_string(cfg.model.mode), cfg.epochs, cfg.batch,
                double(cfg.lr), static_cast<unsigned long long>(cfg.seed));

    const auto t0 = std::chrono::steady_clock::now();
    TrainOutcome outcome = train_model(
        cfg, model, train_ds, test_ds, ns,
        [&](Model& m, int epoch, float acc) {
            CheckpointMeta meta{cfg, ns, epoch, acc};
            save_checkpoint(out_path, m, meta);
        },
        [&](const MetricsRow& r) {
            std::printf("epoch %3d  lr %.6f  train_loss %.4f  train_acc %.4f  test_acc %.4f\n", r.epoch,
                        double(r.lr), double(r.train_loss), double(r.train_acc), double(r.test_acc));
            std::fflush(stdout);
        });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    write_metrics_csv(default_metrics_path(out_path), outcome.log);
    if (outcome.log.empty() && !outcome.diverged) {
        // zero-epoch run: still persist the untouched init for downstream tools
        CheckpointMeta meta{cfg, ns, -1, 0.f};
        save_checkpoint(out_path, model, meta);
    }
    if (outcome.diverged) {
        std::fprintf(stderr, "training aborted: %s\n", outcome.note.c_str());
        return 2;
    }
    std::printf("done in %.1fs; best test_acc %.4f (epoch %d); checkpoint %s, metrics %s\n", secs,
                double(outcome.best_test_acc), outcome.best_epoch, out_path.c_str(),
                default_metrics_path(out_path).c_str());
    return 0;
}

int cmd_export(const std::string& ckpt_path, const std::string& out_path, int64_t seed_override) {
    CheckpointMeta meta;
    Model model = load_checkpoint(ckpt_path, &meta);
    const uint64_t seed = seed_override >= 0 ? uint64_t(seed_override) : meta.cfg.seed + 17;
    ProbeReport rep = export_fused_checked(model, meta.norm, out_path, seed);
    std::printf("exported %s -> %s (probe max relative deviation %.3g at layer %s)\n", ckpt_path.c_str(),
                out_path.c_str(), double(rep.max_dev), rep.worst_layer.c_str());
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, int batch) {
    const std::string kind = sniff_format(model_path);
    if (kind == "STCK") {
        CheckpointMeta meta;
        Model model = load_checkpoint(model_path, &meta);
        Dataset test_ds = load_split(meta.cfg.dataset, data_dir, false);
        const float acc = evaluate(model, test_ds, meta.norm, batch);
        std::printf("checkpoint %s (%s, %s): test accuracy %.4f\n", model_path.c_str(),
                    to_string(meta.cfg.model.arch), to_string(meta.cfg.model.mode), double(acc));
        return 0;
    }
    FusedModel fm = load_fused(model_path);
    const DatasetKind dk = fm.in_ch == 1 ? DatasetKind::mnist_idx : DatasetKind::cifar10_bin;
    Dataset test_ds = load_split(dk, data_dir, false);
    size_t correct = 0;
    std::vector<size_t> idx;
    std::vector<int> labels;
    AugmentOptions no_aug;
    for (size_t start = 0; start < test_ds.count(); start += size_t(batch)) {
        const size_t n = std::min(size_t(batch), test_ds.count() - start);
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), start);
        Tensor32 x = make_batch(test_ds, idx, fm.norm, no_aug, nullptr, labels);
        Tensor32 logits = fm.forward(x);
        const auto pred = predict(logits);
        for (size_t i = 0; i < n; ++i) correct += (pred[i] == labels[i]);
    }
    const double acc = test_ds.count() ? double(correct) / double(test_ds.count()) : 0.0;
    std::printf("fused model %s: test accuracy %.4f (packed ternary path)\n", model_path.c_str(), acc);
    return 0;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& float_ref_path,
                const std::string& out_prefix, int threads_override) {
    if (threads_override >= 0) set_threads(threads_override);
    CheckpointMeta meta;
    Model model = load_checkpoint(ckpt_path, &meta);
    Model ref;
    Model* refp = nullptr;
    if (!float_ref_path.empty()) {
        CheckpointMeta rmeta;
        ref = load_checkpoint(float_ref_path, &rmeta);
        if (rmeta.cfg.model.mode != QuantMode::float_full)
            throw ValueError("--float-ref must be a float-mode checkpoint");
        refp = &ref;
    }
    auto rows = analyze_model(model, refp);
    write_analysis_csv(out_prefix + ".csv", rows);
    write_analysis_hist_csv(out_prefix + "_hist.csv", rows);
    write_analysis_json(out_prefix + ".json", rows);
    std::printf("layer  sparsity  err_sttn  err_twn_heuristic  err_twn_oracle\n");
    double total_sttn = 0, total_heur = 0;
    for (const auto& r : rows) {
        std::printf("%-12s  %.4f  %10.4f  %10.4f  %10.4f\n", r.name.c_str(), r.sparsity, r.err_sttn,
                    r.err_twn_heur, r.err_twn_oracle);
        if (!std::isnan(r.err_sttn)) total_sttn += r.err_sttn;
        if (!std::isnan(r.err_twn_heur)) total_heur += r.err_twn_heur;
    }
    if (refp)
        std::printf("totals: sttn %.4f vs twn heuristic %.4f\n", total_sttn, total_heur);
    bool decreasing = true;
    for (size_t i = 1; i < rows.size(); ++i)
        if (rows[i].sparsity > rows[i - 1].sparsity + 1e-9) decreasing = false;
    std::printf("sparsity trend early->late: %s\n",
                decreasing ? "monotonically decreasing" : "not monotonic (reported, not asserted)");
    std::printf("wrote %s.csv, %s_hist.csv, %s.json\n", out_prefix.c_str(), out_prefix.c_str(),
                out_prefix.c_str());
    return 0;
}

int cmd_bench(const std::string& out_path, int reps, int64_t seed) {
    struct Case {
        int m, k, n;
    };
    const Case cases[] = {{256, 2304, 196}, {64, 576, 1024}, {128, 1152, 196}, {16, 72, 12544}};
    std::ofstream f(out_path);
    if (!f) throw ParseError("cannot write '" + out_path + "'");
    f << "m,k,n,path,ms,gmacs,speedup\n";
    char buf[256];
    for (const auto& c : cases) {
        BenchRow row = bench_ternary_gemm(c.m, c.k, c.n, reps, uint64_t(seed));
        std::snprintf(buf, sizeof buf, "%d,%d,%d,packed,%.9g,%.9g,%.9g\n", row.m, row.k, row.n,
                      row.packed_ms, row.packed_gmacs, row.speedup);
        f << buf;
        std::snprintf(buf, sizeof buf, "%d,%d,%d,naive_float,%.9g,%.9g,1\n", row.m, row.k, row.n,
                      row.naive_ms, row.naive_gmacs);
        f << buf;
        std::printf("%4dx%4dx%5d  packed %8.3f ms (%7.2f GMAC/s)   naive %8.3f ms (%6.2f GMAC/s)   x%.1f\n",
                    row.m, row.k, row.n, row.packed_ms, row.packed_gmacs, row.naive_ms, row.naive_gmacs,
                    row.speedup);
    }
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"soft-threshold ternary network toolkit"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_path, dataset_path, float_ref_path;
    int64_t seed = -1;
    int threads = -1, batch = 64, reps = 9;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "run config file")->required();
    train->add_option("--out", out_path, "checkpoint output path")->default_val("model.stck");
    train->add_option("--seed", seed, "override config seed");
    train->add_option("--threads", threads, "worker threads (0 = deterministic single-thread)");

    auto* exp = app.add_subcommand("export", "fuse a trained checkpoint into a ternary model");
    exp->add_option("--checkpoint", checkpoint_path, "training checkpoint (STCK)")->required();
    exp->add_option("--out", out_path, "fused model output path")->required();
    exp->add_option("--seed", seed, "probe batch seed");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or fused model");
    ev->add_option("--checkpoint", checkpoint_path, "checkpoint (STCK) or fused model (STTN)")->required();
    ev->add_option("--dataset", dataset_path, "dataset directory")->required();
    ev->add_option("--batch", batch, "eval batch size");

    auto* an = app.add_subcommand("analyze", "per-layer sparsity and approximation report");
    an->add_option("--checkpoint", checkpoint_path, "quantized training checkpoint")->required();
    an->add_option("--float-ref", float_ref_path, "float-mode twin checkpoint for threshold baselines");
    an->add_option("--out", out_path, "output prefix")->default_val("analysis");
    an->add_option("--threads", threads, "worker threads");

    auto* be = app.add_subcommand("bench", "packed vs naive float kernel benchmark");
    be->add_option("--out", out_path, "benchmark csv path")->default_val("bench.csv");
    be->add_option("--reps", reps, "repetitions per measurement");
    be->add_option("--seed", seed, "operand seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, out_path, seed, threads);
        if (exp->parsed()) return cmd_export(checkpoint_path, out_path, seed);
        if (ev->parsed()) return cmd_eval(checkpoint_path, dataset_path, batch);
        if (an->parsed()) return cmd_analyze(checkpoint_path, float_ref_path, out_path, threads);
        if (be->parsed()) return cmd_bench(out_path, reps, seed < 0 ? 42 : seed);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
