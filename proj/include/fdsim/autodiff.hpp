#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "fdsim/tensor.hpp"

namespace fdsim {

/// One node of the backward tape. Nodes form a DAG through `inputs`; the
/// backward pass visits each node exactly once in reverse topological order.
struct Node {
    Tensor value;
    Tensor grad;  // same shape as value, allocated on demand during backward
    bool requires_grad = false;
    bool is_param = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Accumulates this node's grad into its inputs' grads.
    std::function<void(Node&)> backprop;

    explicit Node(Tensor v) : value(std::move(v)) {}
};

using Var = std::shared_ptr<Node>;

/// Trainable leaf. Gradients flow into it while `requires_grad` is on.
inline Var make_param(Tensor v) {
    auto n = std::make_shared<Node>(std::move(v));
    n->is_param = true;
    n->requires_grad = true;
    return n;
}

/// Non-trainable leaf (inputs, labels as data).
inline Var make_const(Tensor v) {
    return std::make_shared<Node>(std::move(v));
}

using GradMap = std::unordered_map<const Node*, Tensor>;

// Differentiable ops. All throw DimensionError on shape disagreement.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double c);
Var add_bias(const Var& x, const Var& bias);          // x: N x C, bias: C
Var add_channel_bias(const Var& x, const Var& bias);  // x: N x C x H x W, bias: C
Var relu(const Var& x);
Var sum(const Var& x);  // -> scalar
Var reshape(const Var& x, std::vector<std::size_t> shape);
// Maps the (I*K) x (O*K) low-rank product onto an I x O x K x K kernel:
// entry (i*K + k1, o*K + k2) -> index (i, o, k1, k2).
Var conv_tau_reshape(const Var& x, std::size_t in_ch, std::size_t out_ch, std::size_t kernel);
// input: N x I x H x W, weight: I x O x K x K, stride 1, zero padding `pad`.
Var conv2d(const Var& input, const Var& weight, std::size_t pad);
// 2x2 windows, stride 2; ties broken toward the first element scanned.
Var max_pool2(const Var& x);
// logits: N x C, labels in [0, C). Returns mean loss over the batch.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

/// Reverse-mode sweep from a scalar loss. Returns the gradient for every
/// parameter that participated; frozen parameters get no entry.
GradMap backward(const Var& loss);

struct SgdConfig {
    double learning_rate;
};

/// p <- p - lr * g for every (param, grad) pair. Plain SGD, no state.
void sgd_step(const std::vector<Var>& params, const GradMap& grads, const SgdConfig& cfg);

}  // namespace fdsim
