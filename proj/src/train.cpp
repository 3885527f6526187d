#include "sttn/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace sttn {

void AdamState::init(const std::vector<Param>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(size_t(p.value->size()), 0.f);
        v.emplace_back(size_t(p.value->size()), 0.f);
    }
}

void adam_step(AdamState& st, std::vector<Param>& params,
               const std::unordered_map<int64_t, std::vector<float>>& grads, float lr) {
    if (lr <= 0.f) throw ValueError("adam_step: lr must be > 0");
    if (st.m.size() != params.size()) throw ValueError("adam_step: state not initialized for these params");

    static const std::vector<float> kZero;
    std::vector<const std::vector<float>*> g(params.size(), &kZero);
    for (size_t i = 0; i < params.size(); ++i) {
        const auto it = grads.find(params[i].value->id);
        if (it == grads.end()) continue;
        if (int64_t(it->second.size()) != params[i].value->size())
            throw ValueError("adam_step: gradient shape mismatch for '" + params[i].name + "'");
        for (float x : it->second)
            if (!std::isfinite(x))
                throw NonFiniteGradient("non-finite gradient for parameter '" + params[i].name +
                                        "'; step aborted");
        g[i] = &it->second;
    }

    st.step += 1;
    const float bc1 = 1.f - std::pow(st.beta1, float(st.step));
    const float bc2 = 1.f - std::pow(st.beta2, float(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].value;
        auto& mi = st.m[i];
        auto& vi = st.v[i];
        const bool has_g = !g[i]->empty();
        for (int64_t j = 0; j < p.size(); ++j) {
            const float gj = has_g ? (*g[i])[size_t(j)] : 0.f;
            mi[size_t(j)] = st.beta1 * mi[size_t(j)] + (1.f - st.beta1) * gj;
            vi[size_t(j)] = st.beta2 * vi[size_t(j)] + (1.f - st.beta2) * gj * gj;
            const float mhat = mi[size_t(j)] / bc1;
            const float vhat = vi[size_t(j)] / bc2;
            float upd = lr * mhat / (std::sqrt(vhat) + st.eps);
            if (params[i].decay) upd += lr * st.weight_decay * p[j];
            p[j] -= upd;
        }
    }
}

float cosine_lr(float base_lr, int epoch, int total_epochs) {
    if (epoch < 0 || epoch > total_epochs) throw ValueError("cosine_lr: epoch outside [0,total]");
    if (total_epochs == 0) return base_lr;
    return 0.5f * base_lr * (1.f + std::cos(3.14159265358979323846 * double(epoch) / total_epochs));
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write metrics csv '" + path + "'");
    f << "epoch,lr,train_loss,train_acc,test_acc\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, double(r.lr),
                      double(r.train_loss), double(r.train_acc), double(r.test_acc));
        f << buf;
    }
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open metrics csv '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "epoch,lr,train_loss,train_acc,test_acc")
        throw ParseError("metrics csv '" + path + "': unexpected header '" + line + "'");
    std::vector<MetricsRow> rows;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        MetricsRow r;
        std::istringstream ss(line);
        char c1, c2, c3, c4;
        ss >> r.epoch >> c1 >> r.lr >> c2 >> r.train_loss >> c3 >> r.train_acc >> c4 >> r.test_acc;
        if (ss.fail() || c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
            throw ParseError("metrics csv '" + path + "' line " + std::to_string(lineno) + ": bad row");
        rows.push_back(r);
    }
    return rows;
}

float evaluate(Model& model, const Dataset& ds, const NormStats& ns, int batch) {
    size_t correct = 0;
    std::vector<size_t> idx(batch);
    std::vector<int> labels;
    AugmentOptions no_aug;
    for (size_t start = 0; start < ds.count(); start += size_t(batch)) {
        const size_t n = std::min(size_t(batch), ds.count() - start);
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), start);
        Tensor32 x = make_batch(ds, idx, ns, no_aug, nullptr, labels);
        Tensor32 logits = model.forward(nullptr, x, false);
        const auto pred = predict(logits);
        for (size_t i = 0; i < n; ++i) correct += (pred[i] == labels[i]);
    }
    return ds.count() ? float(correct) / float(ds.count()) : 0.f;
}

TrainOutcome train_model(const RunConfig& cfg, Model& model, const Dataset& train_ds,
                         const Dataset& test_ds, const NormStats& ns,
                         const std::function<void(Model&, int, float)>& on_best,
                         const std::function<void(const MetricsRow&)>& on_epoch) {
    TrainOutcome out;
    auto params = model.parameters();
    AdamState adam;
    adam.weight_decay = cfg.weight_decay;
    adam.init(params);

    Rng rng(cfg.seed);
    AugmentOptions aug{cfg.augment_pad_crop, cfg.augment_hflip, 2};
    std::vector<size_t> order(train_ds.count());
    std::iota(order.begin(), order.end(), size_t(0));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const float lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        rng.shuffle(order);
        double loss_sum = 0.0;
        size_t seen = 0, correct = 0;
        std::vector<int> labels;
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
            const size_t n = std::min(size_t(cfg.batch), order.size() - start);
            std::span<const size_t> idx(order.data() + start, n);
            Tensor32 x = make_batch(train_ds, idx, ns, aug, &rng, labels);
            Tape32 tape;
            Tensor32 logits = model.forward(&tape, x, true);
            Tensor32 loss = softmax_cross_entropy(&tape, logits, labels);
            if (!std::isfinite(loss[0])) {
                out.diverged = true;
                out.note = "loss diverged (non-finite) at epoch " + std::to_string(epoch) +
                           ", batch offset " + std::to_string(start) +
                           "; aborted, last good checkpoint kept";
                return out;
            }
            auto grads = tape.backward(loss);
            try {
                adam_step(adam, params, grads, lr);
            } catch (const NonFiniteGradient& e) {
                out.diverged = true;
                out.note = std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")";
                return out;
            }
            const auto pred = predict(logits);
            for (size_t i = 0; i < n; ++i) correct += (pred[i] == labels[i]);
            loss_sum += double(loss[0]) * double(n);
            seen += n;
        }
        MetricsRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = seen ? float(loss_sum / double(seen)) : 0.f;
        row.train_acc = seen ? float(double(correct) / double(seen)) : 0.f;
        row.test_acc = evaluate(model, test_ds, ns, cfg.batch);
        out.log.push_back(row);
        if (on_epoch) on_epoch(row);
        if (row.test_acc > out.best_test_acc || out.best_epoch < 0) {
            out.best_test_acc = row.test_acc;
            out.best_epoch = epoch;
            if (on_best) on_best(model, epoch, row.test_acc);
        }
    }
    return out;
}

}  // namespace sttn
