#pragma once

#include <functional>

#include "sttn/config.hpp"
#include "sttn/data.hpp"
#include "sttn/model.hpp"

namespace sttn {

struct NonFiniteGradient : ValueError {
    using ValueError::ValueError;
};

struct AdamState {
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    float weight_decay = 1e-6f;
    int64_t step = 0;
    std::vector<std::vector<float>> m, v;  // one slot per parameter, same order

    void init(const std::vector<Param>& params);
};

// Bias-corrected Adam with decoupled weight decay on the flagged parameters.
// Validates every gradient before touching any parameter; a non-finite
// gradient aborts the step with no mutation.
void adam_step(AdamState& st, std::vector<Param>& params,
               const std::unordered_map<int64_t, std::vector<float>>& grads, float lr);

float cosine_lr(float base_lr, int epoch, int total_epochs);

struct MetricsRow {
    int epoch = 0;
    float lr = 0, train_loss = 0, train_acc = 0, test_acc = 0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

struct TrainOutcome {
    std::vector<MetricsRow> log;
    float best_test_acc = 0.f;
    int best_epoch = -1;
    bool diverged = false;
    std::string note;
};

// Full training loop: cosine schedule, Adam, per-epoch train/test metrics.
// on_best fires whenever test accuracy improves (checkpointing hook); a
// non-finite loss or gradient aborts with the last good state already saved.
TrainOutcome train_model(const RunConfig& cfg, Model& model, const Dataset& train_ds,
                         const Dataset& test_ds, const NormStats& ns,
                         const std::function<void(Model&, int, float)>& on_best = {},
                         const std::function<void(const MetricsRow&)>& on_epoch = {});

float evaluate(Model& model, const Dataset& ds, const NormStats& ns, int batch);

}  // namespace sttn
