#include "fdsim/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "fdsim/kernels.hpp"

namespace fdsim {

namespace {

void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) {
        n.grad = Tensor(n.value.shape());
    }
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>(std::move(value));
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs) {
        if (in->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) {
        n->backprop = std::move(backprop);
    }
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             Tensor::shape_string(a.shape()) + " vs " +
                             Tensor::shape_string(b.shape()));
    }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows()) {
        throw DimensionError("matmul: incompatible shapes " +
                             Tensor::shape_string(av.shape()) + " and " +
                             Tensor::shape_string(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
    return make_op(std::move(out), {a, b}, [m, k, n](Node& node) {
        const Tensor& d = node.grad;
        Node& na = *node.inputs[0];
        Node& nb = *node.inputs[1];
        if (na.requires_grad) {
            ensure_grad(na);
            Tensor tmp({m, k});
            kernels::matmul_nt(d.data(), nb.value.data(), tmp.data(), m, n, k);
            for (std::size_t i = 0; i < tmp.size(); ++i) na.grad[i] += tmp[i];
        }
        if (nb.requires_grad) {
            ensure_grad(nb);
            Tensor tmp({k, n});
            kernels::matmul_tn(na.value.data(), d.data(), tmp.data(), k, m, n);
            for (std::size_t i = 0; i < tmp.size(); ++i) nb.grad[i] += tmp[i];
        }
    });
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return make_op(std::move(out), {a, b}, [](Node& node) {
        for (int side = 0; side < 2; ++side) {
            Node& in = *node.inputs[side];
            if (!in.requires_grad) continue;
            ensure_grad(in);
            for (std::size_t i = 0; i < node.grad.size(); ++i) in.grad[i] += node.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make_op(std::move(out), {a, b}, [](Node& node) {
        Node& na = *node.inputs[0];
        Node& nb = *node.inputs[1];
        if (na.requires_grad) {
            ensure_grad(na);
            for (std::size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i];
        }
        if (nb.requires_grad) {
            ensure_grad(nb);
            for (std::size_t i = 0; i < node.grad.size(); ++i) nb.grad[i] -= node.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make_op(std::move(out), {a, b}, [](Node& node) {
        Node& na = *node.inputs[0];
        Node& nb = *node.inputs[1];
        if (na.requires_grad) {
            ensure_grad(na);
            for (std::size_t i = 0; i < node.grad.size(); ++i)
                na.grad[i] += node.grad[i] * nb.value[i];
        }
        if (nb.requires_grad) {
            ensure_grad(nb);
            for (std::size_t i = 0; i < node.grad.size(); ++i)
                nb.grad[i] += node.grad[i] * na.value[i];
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return make_op(std::move(out), {a}, [c](Node& node) {
        Node& in = *node.inputs[0];
        ensure_grad(in);
        for (std::size_t i = 0; i < node.grad.size(); ++i) in.grad[i] += c * node.grad[i];
    });
}

Var add_bias(const Var& x, const Var& bias) {
    const Tensor& xv = x->value;
    const Tensor& bv = bias->value;
    if (xv.ndim() != 2 || bv.size() != xv.cols()) {
        throw DimensionError("add_bias: x " + Tensor::shape_string(xv.shape()) +
                             " vs bias " + Tensor::shape_string(bv.shape()));
    }
    const std::size_t n = xv.rows(), c = xv.cols();
    Tensor out = xv;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
    }
    return make_op(std::move(out), {x, bias}, [n, c](Node& node) {
        Node& nx = *node.inputs[0];
        Node& nb = *node.inputs[1];
        if (nx.requires_grad) {
            ensure_grad(nx);
            for (std::size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i];
        }
        if (nb.requires_grad) {
            ensure_grad(nb);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) nb.grad[j] += node.grad[i * c + j];
            }
        }
    });
}

Var add_channel_bias(const Var& x, const Var& bias) {
    const Tensor& xv = x->value;
    const Tensor& bv = bias->value;
    if (xv.ndim() != 4 || bv.size() != xv.dim(1)) {
        throw DimensionError("add_channel_bias: x " + Tensor::shape_string(xv.shape()) +
                             " vs bias " + Tensor::shape_string(bv.shape()));
    }
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out = xv;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t s = 0; s < hw; ++s) out[(i * c + j) * hw + s] += bv[j];
    return make_op(std::move(out), {x, bias}, [n, c, hw](Node& node) {
        Node& nx = *node.inputs[0];
        Node& nb = *node.inputs[1];
        if (nx.requires_grad) {
            ensure_grad(nx);
            for (std::size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i];
        }
        if (nb.requires_grad) {
            ensure_grad(nb);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    for (std::size_t s = 0; s < hw; ++s)
                        nb.grad[j] += node.grad[(i * c + j) * hw + s];
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return make_op(std::move(out), {x}, [](Node& node) {
        Node& in = *node.inputs[0];
        ensure_grad(in);
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            if (in.value[i] > 0.0) in.grad[i] += node.grad[i];
        }
    });
}

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x->value.values()) s += v;
    return make_op(Tensor::scalar(s), {x}, [](Node& node) {
        Node& in = *node.inputs[0];
        ensure_grad(in);
        const double d = node.grad[0];
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += d;
    });
}

Var reshape(const Var& x, std::vector<std::size_t> shape) {
    Tensor out = x->value.reshaped(std::move(shape));
    return make_op(std::move(out), {x}, [](Node& node) {
        Node& in = *node.inputs[0];
        ensure_grad(in);
        for (std::size_t i = 0; i < node.grad.size(); ++i) in.grad[i] += node.grad[i];
    });
}

Var conv_tau_reshape(const Var& x, std::size_t in_ch, std::size_t out_ch, std::size_t kernel) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 2 || xv.rows() != in_ch * kernel || xv.cols() != out_ch * kernel) {
        throw DimensionError("conv_tau_reshape: expected " +
                             std::to_string(in_ch * kernel) + "x" +
                             std::to_string(out_ch * kernel) + ", got " +
                             Tensor::shape_string(xv.shape()));
    }
    const std::size_t I = in_ch, O = out_ch, K = kernel;
    Tensor out({I, O, K, K});
    for (std::size_t i = 0; i < I; ++i)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t k1 = 0; k1 < K; ++k1)
                for (std::size_t k2 = 0; k2 < K; ++k2)
                    out[((i * O + o) * K + k1) * K + k2] =
                        xv[(i * K + k1) * (O * K) + o * K + k2];
    return make_op(std::move(out), {x}, [I, O, K](Node& node) {
        Node& in = *node.inputs[0];
        ensure_grad(in);
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t k1 = 0; k1 < K; ++k1)
                    for (std::size_t k2 = 0; k2 < K; ++k2)
                        in.grad[(i * K + k1) * (O * K) + o * K + k2] +=
                            node.grad[((i * O + o) * K + k1) * K + k2];
    });
}

Var conv2d(const Var& input, const Var& weight, std::size_t pad) {
    const Tensor& xv = input->value;
    const Tensor& wv = weight->value;
    if (xv.ndim() != 4 || wv.ndim() != 4) {
        throw DimensionError("conv2d: input must be NxIxHxW and weight IxOxKxK");
    }
    const std::size_t N = xv.dim(0), I = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t O = wv.dim(1), K = wv.dim(2);
    if (wv.dim(0) != I || wv.dim(3) != K) {
        throw DimensionError("conv2d: weight " + Tensor::shape_string(wv.shape()) +
                             " does not match input channels " + std::to_string(I));
    }
    if (K > H + 2 * pad || K > W + 2 * pad) {
        throw DimensionError("conv2d: kernel " + std::to_string(K) +
                             " larger than padded input " + std::to_string(H + 2 * pad) +
                             "x" + std::to_string(W + 2 * pad));
    }
    const std::size_t Ho = H + 2 * pad - K + 1;
    const std::size_t Wo = W + 2 * pad - K + 1;
    const std::size_t row_len = I * K * K;

    auto cols = std::make_shared<Tensor>(Tensor({N * Ho * Wo, row_len}));
    kernels::im2col(xv.data(), cols->data(), N, I, H, W, K, pad);

    // Weight I x O x K x K -> (I*K*K) x O with im2col-compatible row order.
    Tensor kmat({row_len, O});
    for (std::size_t i = 0; i < I; ++i)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t k1 = 0; k1 < K; ++k1)
                for (std::size_t k2 = 0; k2 < K; ++k2)
                    kmat[((i * K + k1) * K + k2) * O + o] =
                        wv[((i * O + o) * K + k1) * K + k2];

    Tensor out2d({N * Ho * Wo, O});
    kernels::matmul(cols->data(), kmat.data(), out2d.data(), N * Ho * Wo, row_len, O);

    Tensor out({N, O, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t x = 0; x < Wo; ++x)
                    out[((n * O + o) * Ho + y) * Wo + x] =
                        out2d[(n * Ho * Wo + y * Wo + x) * O + o];

    auto kmat_ptr = std::make_shared<Tensor>(std::move(kmat));
    return make_op(std::move(out), {input, weight},
                   [N, I, H, W, O, K, Ho, Wo, row_len, pad, cols, kmat_ptr](Node& node) {
        // Fold the output gradient back to the (N*Ho*Wo) x O layout.
        Tensor d2d({N * Ho * Wo, O});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t y = 0; y < Ho; ++y)
                    for (std::size_t x = 0; x < Wo; ++x)
                        d2d[(n * Ho * Wo + y * Wo + x) * O + o] =
                            node.grad[((n * O + o) * Ho + y) * Wo + x];
        Node& nin = *node.inputs[0];
        Node& nw = *node.inputs[1];
        if (nw.requires_grad) {
            ensure_grad(nw);
            Tensor dkmat({row_len, O});
            kernels::matmul_tn(cols->data(), d2d.data(), dkmat.data(),
                               row_len, N * Ho * Wo, O);
            for (std::size_t i = 0; i < I; ++i)
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t k1 = 0; k1 < K; ++k1)
                        for (std::size_t k2 = 0; k2 < K; ++k2)
                            nw.grad[((i * O + o) * K + k1) * K + k2] +=
                                dkmat[((i * K + k1) * K + k2) * O + o];
        }
        if (nin.requires_grad) {
            ensure_grad(nin);
            Tensor dcols({N * Ho * Wo, row_len});
            kernels::matmul_nt(d2d.data(), kmat_ptr->data(), dcols.data(),
                               N * Ho * Wo, O, row_len);
            Tensor dx({N, I, H, W});
            kernels::col2im(dcols.data(), dx.data(), N, I, H, W, K, pad);
            for (std::size_t i = 0; i < dx.size(); ++i) nin.grad[i] += dx[i];
        }
    });
}

Var max_pool2(const Var& x) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 4) throw DimensionError("max_pool2: input must be NxCxHxW");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H < 2 || W < 2) throw DimensionError("max_pool2: spatial size below 2x2");
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t xo = 0; xo < Wo; ++xo) {
                    std::size_t best = ((n * C + c) * H + 2 * y) * W + 2 * xo;
                    double bv = xv[best];
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx =
                                ((n * C + c) * H + 2 * y + dy) * W + 2 * xo + dx;
                            if (xv[idx] > bv) {
                                bv = xv[idx];
                                best = idx;
                            }
                        }
                    const std::size_t oidx = ((n * C + c) * Ho + y) * Wo + xo;
                    out[oidx] = bv;
                    (*argmax)[oidx] = best;
                }
    return make_op(std::move(out), {x}, [argmax](Node& node) {
        Node& in = *node.inputs[0];
        ensure_grad(in);
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            in.grad[(*argmax)[i]] += node.grad[i];
        }
    });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Tensor& lv = logits->value;
    if (lv.ndim() != 2) throw DimensionError("softmax_cross_entropy: logits must be NxC");
    const std::size_t N = lv.rows(), C = lv.cols();
    if (labels.size() != N) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(N) + " rows");
    }
    for (std::size_t i = 0; i < N; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C) {
            throw ValidationError("label " + std::to_string(labels[i]) + " at row " +
                                  std::to_string(i) + " outside [0, " + std::to_string(C) + ")");
        }
    }
    auto probs = std::make_shared<Tensor>(Tensor({N, C}));
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        double mx = lv[i * C];
        for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, lv[i * C + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
            const double e = std::exp(lv[i * C + j] - mx);
            (*probs)[i * C + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < C; ++j) (*probs)[i * C + j] /= z;
        loss -= std::log((*probs)[i * C + static_cast<std::size_t>(labels[i])]);
    }
    loss /= static_cast<double>(N);
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return make_op(Tensor::scalar(loss), {logits}, [N, C, probs, labels_copy](Node& node) {
        Node& in = *node.inputs[0];
        ensure_grad(in);
        const double d = node.grad[0] / static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t j = 0; j < C; ++j) {
                double g = (*probs)[i * C + j];
                if (static_cast<std::size_t>((*labels_copy)[i]) == j) g -= 1.0;
                in.grad[i * C + j] += d * g;
            }
        }
    });
}

GradMap backward(const Var& loss) {
    if (loss->value.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            Tensor::shape_string(loss->value.shape()));
    }
    // Reverse topological order over the reachable requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    if (loss->requires_grad) {
        stack.emplace_back(loss.get(), 0);
        visited.insert(loss.get());
    }
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* in = node->inputs[next++].get();
            if (in->requires_grad && !visited.count(in)) {
                visited.insert(in);
                stack.emplace_back(in, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        n->grad = Tensor(n->value.shape());
    }
    GradMap grads;
    if (order.empty()) return grads;
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
        if (n->is_param) grads.emplace(n, n->grad);
    }
    return grads;
}

void sgd_step(const std::vector<Var>& params, const GradMap& grads, const SgdConfig& cfg) {
    if (!(cfg.learning_rate > 0.0)) {
        throw ValidationError("learning_rate must be positive");
    }
    std::size_t matched = 0;
    for (const auto& p : params) {
        auto it = grads.find(p.get());
        if (it == grads.end()) continue;  // frozen this phase
        const Tensor& g = it->second;
        if (!g.same_shape(p->value)) {
            throw ContractError("sgd_step: gradient shape " +
                                Tensor::shape_string(g.shape()) + " does not match parameter " +
                                Tensor::shape_string(p->value.shape()));
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            p->value[i] -= cfg.learning_rate * g[i];
        }
        ++matched;
    }
    if (matched != grads.size()) {
        throw ContractError("sgd_step: gradient map holds entries for parameters "
                            "not in the update list");
    }
}

}  // namespace fdsim
