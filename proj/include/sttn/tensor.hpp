#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "sttn/common.hpp"

namespace sttn {

namespace detail {
inline int64_t next_tensor_id() {
    static std::atomic<int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// Dense N-d array. Copies share storage; data is treated as immutable once an
// op has consumed it (the trainer rewrites parameter storage between steps).
template <class S>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;
    bool requires_grad = false;
    int64_t id = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<S> d, bool rg = false)
        : shape(std::move(s)),
          data(std::make_shared<std::vector<S>>(std::move(d))),
          requires_grad(rg),
          id(detail::next_tensor_id()) {
        if (int64_t(data->size()) != numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data->size()) +
                             " does not match shape " + shape_str(shape));
        for (int d : shape)
            if (d < 1) throw ShapeError("tensor dimension < 1 in shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s, bool rg = false) {
        size_t n = size_t(numel(s));
        return Tensor(std::move(s), std::vector<S>(n, S(0)), rg);
    }
    static Tensor full(Shape s, S v, bool rg = false) {
        size_t n = size_t(numel(s));
        return Tensor(std::move(s), std::vector<S>(n, v), rg);
    }

    int64_t size() const { return data ? int64_t(data->size()) : 0; }
    S* ptr() { return data->data(); }
    const S* ptr() const { return data->data(); }
    S& operator[](int64_t i) { return (*data)[size_t(i)]; }
    S operator[](int64_t i) const { return (*data)[size_t(i)]; }
    bool defined() const { return bool(data); }

    int dim(int i) const { return shape[size_t(i)]; }
};

// Reverse-mode tape. Ops append nodes in execution order (inputs always
// precede outputs); backward replays the list once, in reverse.
template <class S>
class Tape {
public:
    struct Node {
        std::vector<int64_t> inputs;
        std::vector<int64_t> outputs;
        // reads output grads via grad_of(), accumulates into input grads
        std::function<void(Tape&)> backward;
    };

    void watch(const Tensor<S>& t) {
        if (t.requires_grad) watched_.emplace(t.id, t.shape);
    }

    void record(Node n) { nodes_.push_back(std::move(n)); }

    size_t node_count() const { return nodes_.size(); }

    // Gradient accumulation buffer for a tensor id, created on first touch.
    std::vector<S>& grad_buf(int64_t id, size_t n) {
        auto [it, fresh] = grads_.try_emplace(id);
        if (fresh) it->second.assign(n, S(0));
        return it->second;
    }

    // nullptr if the id has received no gradient (treated as zero upstream)
    const std::vector<S>* grad_of(int64_t id) const {
        auto it = grads_.find(id);
        return it == grads_.end() ? nullptr : &it->second;
    }

    // Runs the whole backward pass from a scalar loss. Returns a map from
    // tensor id to gradient buffer; watched tensors that the loss never
    // reached get explicit zero gradients.
    std::unordered_map<int64_t, std::vector<S>> backward(const Tensor<S>& loss) {
        if (numel(loss.shape) != 1)
            throw TapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape));
        validate_order();
        grads_.clear();
        grad_buf(loss.id, 1)[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            bool any = false;
            for (int64_t out : it->outputs)
                if (grads_.count(out)) {
                    any = true;
                    break;
                }
            if (any) it->backward(*this);
        }
        for (const auto& [id, shape] : watched_)
            grad_buf(id, size_t(numel(shape)));
        return std::move(grads_);
    }

private:
    // Inputs must be produced before they are consumed and each id is
    // produced at most once; anything else means the tape is not a DAG.
    void validate_order() const {
        std::unordered_set<int64_t> produced;
        std::unordered_set<int64_t> consumed;
        for (const auto& n : nodes_) {
            for (int64_t in : n.inputs) consumed.insert(in);
            for (int64_t out : n.outputs) {
                if (produced.count(out))
                    throw TapeError("tape is not topologically ordered: tensor " +
                                    std::to_string(out) + " produced twice");
                if (consumed.count(out))
                    throw TapeError("cycle in tape: tensor " + std::to_string(out) +
                                    " used before it is produced");
                produced.insert(out);
            }
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<int64_t, Shape> watched_;
    std::unordered_map<int64_t, std::vector<S>> grads_;
};

// User-defined differentiable operation: forward runs eagerly, backward maps
// the upstream gradients of the outputs to gradients of the inputs (one per
// input, same order).
template <class S>
struct CustomNode {
    std::function<std::vector<Tensor<S>>(const std::vector<Tensor<S>>&)> forward;
    std::function<std::vector<std::vector<S>>(const std::vector<std::vector<S>>&)> backward;
};

template <class S>
std::vector<Tensor<S>> register_custom(Tape<S>* tape, const CustomNode<S>& node,
                                       const std::vector<Tensor<S>>& inputs) {
    if (!node.forward || !node.backward) throw ValueError("custom node needs forward and backward handles");
    std::vector<Tensor<S>> outs = node.forward(inputs);
    bool needs_grad = false;
    for (const auto& t : inputs) needs_grad |= t.requires_grad;
    if (!tape || !needs_grad) return outs;

    typename Tape<S>::Node rec;
    for (const auto& t : inputs) rec.inputs.push_back(t.id);
    std::vector<Shape> in_shapes;
    for (const auto& t : inputs) in_shapes.push_back(t.shape);
    std::vector<int64_t> out_ids;
    std::vector<size_t> out_sizes;
    for (auto& o : outs) {
        o.requires_grad = true;
        rec.outputs.push_back(o.id);
        out_ids.push_back(o.id);
        out_sizes.push_back(size_t(o.size()));
    }
    auto backward = node.backward;
    auto in_ids = rec.inputs;
    rec.backward = [backward, in_ids, in_shapes, out_ids, out_sizes](Tape<S>& tp) {
        std::vector<std::vector<S>> upstream(out_ids.size());
        for (size_t i = 0; i < out_ids.size(); ++i) {
            const auto* g = tp.grad_of(out_ids[i]);
            upstream[i] = g ? *g : std::vector<S>(out_sizes[i], S(0));
        }
        std::vector<std::vector<S>> gins = backward(upstream);
        if (gins.size() != in_ids.size())
            throw TapeError("custom node backward returned " + std::to_string(gins.size()) +
                            " gradients for " + std::to_string(in_ids.size()) + " inputs");
        for (size_t i = 0; i < in_ids.size(); ++i) {
            if (gins[i].empty()) continue;  // no gradient for this input
            size_t n = size_t(numel(in_shapes[i]));
            if (gins[i].size() != n)
                throw TapeError("custom node gradient " + std::to_string(i) + " has wrong length");
            auto& buf = tp.grad_buf(in_ids[i], n);
            for (size_t j = 0; j < n; ++j) buf[j] += gins[i][j];
        }
    };
    tape->record(std::move(rec));
    return outs;
}

using Tensor32 = Tensor<float>;
using Tape32 = Tape<float>;

}  // namespace sttn
