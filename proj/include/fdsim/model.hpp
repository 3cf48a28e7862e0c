#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fdsim/autodiff.hpp"
#include "fdsim/rng.hpp"
#include "fdsim/tensor.hpp"

namespace fdsim {

enum class LayerKind { FullyConnected, Convolutional };

struct LayerDesc {
    LayerKind kind;
    std::size_t in_dim;   // input features (fc) or input channels (conv)
    std::size_t out_dim;  // output features (fc) or output channels (conv)
    std::size_t kernel;   // 1 for fc
    std::size_t pad;      // conv only
    bool decomposed;
};

enum class Arch { Mlp, Cnn };

/// Reference architectures:
///   mlp: in -> 64 -> 32 -> C, ReLU between layers
///   cnn: conv(1->8, 3x3, pad 1) -> ReLU -> pool2 ->
///        conv(8->16, 3x3, pad 1) -> ReLU -> pool2 -> flatten -> fc(-> C)
struct ModelSpec {
    Arch arch;
    std::size_t classes;
    std::size_t input_dim;             // mlp
    std::size_t in_h = 0, in_w = 0;    // cnn
    std::vector<LayerDesc> layers;

    static ModelSpec mlp(std::size_t input_dim, std::size_t classes);
    static ModelSpec cnn(std::size_t in_h, std::size_t in_w, std::size_t classes);
};

/// One layer's weight, written as sigma + B*A. Biases are stored separately
/// and never decomposed.
struct DecomposedParam {
    LayerKind kind;
    std::size_t in_dim, out_dim, kernel;
    std::size_t inner_rank;
    Var sigma;     // I x O (fc) or I x O x K x K (conv)
    Var factor_b;  // I x r (fc) or (I*K) x r' (conv); zero at init
    Var factor_a;  // r x O (fc) or r' x (O*K) (conv); Gaussian at init
};

struct ModelParams {
    std::vector<DecomposedParam> weights;
    std::vector<Var> biases;  // one per layer

    /// Deep copy: fresh parameter nodes with copied values and flags.
    ModelParams clone() const;
    std::vector<Var> all_params() const;
};

enum class Phase { TauOnly, SigmaOnly, Joint };

/// Inner rank r = max(1, floor(ratio * min(I, O))) for fc layers and
/// max(1, floor(ratio * min(I, O) * K)) for conv layers.
std::size_t rank_for(LayerKind kind, std::size_t in_dim, std::size_t out_dim,
                     std::size_t kernel, double ratio);

/// sigma: Kaiming-uniform fan-in; A ~ Gaussian(0, 1/sqrt(rank)); B = 0;
/// biases = 0.
ModelParams init_decomposed(const ModelSpec& spec, double ratio_fc, double ratio_conv,
                            Rng& rng);

/// sigma + B*A, with the conv product mapped back onto the 4-D kernel.
/// Differentiable with respect to sigma, B and A.
Var effective_weight(const DecomposedParam& p);

/// Routes gradients: tau-only -> B, A; sigma-only -> sigma and biases;
/// joint -> everything.
void set_phase(ModelParams& params, Phase phase);

/// Batch forward through the decomposed model. Features are N x d for mlp
/// and N x 1 x H x W for cnn.
Var forward(const ModelSpec& spec, const ModelParams& params, const Tensor& features);

Var loss(const Var& logits, const std::vector<int>& labels);

/// Concatenation of all shared state (sigma matrices then biases, layer
/// order, row-major).
Tensor flatten_sigma(const ModelParams& params);
/// Writes a flatten_sigma-ordered vector back into the model.
void unflatten_sigma(ModelParams& params, const Tensor& flat);
/// Concatenation of the materialized per-layer products B*A.
Tensor flatten_tau(const ModelParams& params);
/// B*A as a value tensor (2-D product layout).
Tensor materialized_tau(const DecomposedParam& p);

/// Undecomposed counterpart used for equivalence checks: raw weight tensors
/// evaluated without the autodiff tape.
struct PlainModel {
    std::vector<Tensor> weights;  // same shapes as DecomposedParam::sigma
    std::vector<Tensor> biases;
};

Tensor forward_plain(const ModelSpec& spec, const PlainModel& model, const Tensor& features);

// Parameter checkpoint: magic "FDCP", version, layer table of shapes, then
// row-major doubles. Identical bytes across platforms.
void save_params(const ModelParams& params, const std::string& path);
ModelParams load_params(const ModelSpec& spec, const std::string& path);

}  // namespace fdsim
