#include "fdsim/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "fdsim/kernels.hpp"

namespace fdsim {

ModelSpec ModelSpec::mlp(std::size_t input_dim, std::size_t classes) {
    if (classes < 2) throw ValidationError("mlp: class count must be >= 2");
    if (input_dim < 1) throw ValidationError("mlp: input_dim must be >= 1");
    ModelSpec s;
    s.arch = Arch::Mlp;
    s.classes = classes;
    s.input_dim = input_dim;
    s.layers = {
        {LayerKind::FullyConnected, input_dim, 64, 1, 0, true},
        {LayerKind::FullyConnected, 64, 32, 1, 0, true},
        {LayerKind::FullyConnected, 32, classes, 1, 0, true},
    };
    return s;
}

ModelSpec ModelSpec::cnn(std::size_t in_h, std::size_t in_w, std::size_t classes) {
    if (classes < 2) throw ValidationError("cnn: class count must be >= 2");
    if (in_h < 4 || in_w < 4) throw ValidationError("cnn: input must be at least 4x4");
    ModelSpec s;
    s.arch = Arch::Cnn;
    s.classes = classes;
    s.in_h = in_h;
    s.in_w = in_w;
    s.input_dim = in_h * in_w;
    const std::size_t flat = 16 * (in_h / 4) * (in_w / 4);
    s.layers = {
        {LayerKind::Convolutional, 1, 8, 3, 1, true},
        {LayerKind::Convolutional, 8, 16, 3, 1, true},
        {LayerKind::FullyConnected, flat, classes, 1, 0, true},
    };
    return s;
}

std::size_t rank_for(LayerKind kind, std::size_t in_dim, std::size_t out_dim,
                     std::size_t kernel, double ratio) {
    if (!(ratio > 0.0) || ratio > 1.0) {
        throw ValidationError("rank ratio must lie in (0, 1], got " + std::to_string(ratio));
    }
    if (in_dim < 1 || out_dim < 1 || kernel < 1) {
        throw ValidationError("rank_for: dimensions must be >= 1");
    }
    const double base = static_cast<double>(std::min(in_dim, out_dim));
    const double scaled = kind == LayerKind::Convolutional
                              ? ratio * base * static_cast<double>(kernel)
                              : ratio * base;
    // Nudge past representation error so e.g. 0.6 * 5 floors to 3, not 2.
    const auto r = static_cast<std::size_t>(std::floor(scaled + 1e-9));
    return std::max<std::size_t>(1, r);
}

ModelParams init_decomposed(const ModelSpec& spec, double ratio_fc, double ratio_conv,
                            Rng& rng) {
    ModelParams params;
    for (const LayerDesc& layer : spec.layers) {
        DecomposedParam p;
        p.kind = layer.kind;
        p.in_dim = layer.in_dim;
        p.out_dim = layer.out_dim;
        p.kernel = layer.kernel;
        const double ratio =
            layer.kind == LayerKind::Convolutional ? ratio_conv : ratio_fc;
        p.inner_rank = rank_for(layer.kind, layer.in_dim, layer.out_dim, layer.kernel, ratio);

        const bool conv = layer.kind == LayerKind::Convolutional;
        const std::size_t fan_in =
            conv ? layer.in_dim * layer.kernel * layer.kernel : layer.in_dim;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        Tensor sigma = conv ? Tensor({layer.in_dim, layer.out_dim, layer.kernel, layer.kernel})
                            : Tensor({layer.in_dim, layer.out_dim});
        for (std::size_t i = 0; i < sigma.size(); ++i) sigma[i] = rng.uniform(-bound, bound);

        const std::size_t b_rows = conv ? layer.in_dim * layer.kernel : layer.in_dim;
        const std::size_t a_cols = conv ? layer.out_dim * layer.kernel : layer.out_dim;
        Tensor factor_b({b_rows, p.inner_rank});  // zeros, so tau starts at zero
        Tensor factor_a({p.inner_rank, a_cols});
        const double a_std = 1.0 / std::sqrt(static_cast<double>(p.inner_rank));
        for (std::size_t i = 0; i < factor_a.size(); ++i) factor_a[i] = a_std * rng.gaussian();

        p.sigma = make_param(std::move(sigma));
        p.factor_b = make_param(std::move(factor_b));
        p.factor_a = make_param(std::move(factor_a));
        params.weights.push_back(std::move(p));
        params.biases.push_back(make_param(Tensor({layer.out_dim})));
    }
    return params;
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    for (const DecomposedParam& p : weights) {
        DecomposedParam q = p;
        auto copy_param = [](const Var& v) {
            Var c = make_param(v->value);
            c->requires_grad = v->requires_grad;
            return c;
        };
        q.sigma = copy_param(p.sigma);
        q.factor_b = copy_param(p.factor_b);
        q.factor_a = copy_param(p.factor_a);
        out.weights.push_back(std::move(q));
    }
    for (const Var& b : biases) {
        Var c = make_param(b->value);
        c->requires_grad = b->requires_grad;
        out.biases.push_back(std::move(c));
    }
    return out;
}

std::vector<Var> ModelParams::all_params() const {
    std::vector<Var> out;
    for (const DecomposedParam& p : weights) {
        out.push_back(p.sigma);
        out.push_back(p.factor_b);
        out.push_back(p.factor_a);
    }
    for (const Var& b : biases) out.push_back(b);
    return out;
}

Var effective_weight(const DecomposedParam& p) {
    Var tau = matmul(p.factor_b, p.factor_a);
    if (p.kind == LayerKind::Convolutional) {
        tau = conv_tau_reshape(tau, p.in_dim, p.out_dim, p.kernel);
    }
    return add(p.sigma, tau);
}

void set_phase(ModelParams& params, Phase phase) {
    const bool tau_on = phase != Phase::SigmaOnly;
    const bool sigma_on = phase != Phase::TauOnly;
    for (DecomposedParam& p : params.weights) {
        p.sigma->requires_grad = sigma_on;
        p.factor_b->requires_grad = tau_on;
        p.factor_a->requires_grad = tau_on;
    }
    for (Var& b : params.biases) b->requires_grad = sigma_on;
}

Var forward(const ModelSpec& spec, const ModelParams& params, const Tensor& features) {
    if (params.weights.size() != spec.layers.size()) {
        throw DimensionError("forward: parameter count does not match spec");
    }
    Var x = make_const(features);
    if (spec.arch == Arch::Mlp) {
        if (features.ndim() != 2 || features.cols() != spec.input_dim) {
            throw DimensionError("forward: expected batch of " +
                                 std::to_string(spec.input_dim) + "-dim rows, got " +
                                 Tensor::shape_string(features.shape()));
        }
        for (std::size_t i = 0; i < params.weights.size(); ++i) {
            x = add_bias(matmul(x, effective_weight(params.weights[i])), params.biases[i]);
            if (i + 1 < params.weights.size()) x = relu(x);
        }
        return x;
    }
    if (features.ndim() != 4 || features.dim(1) != 1 ||
        features.dim(2) != spec.in_h || features.dim(3) != spec.in_w) {
        throw DimensionError("forward: expected Nx1x" + std::to_string(spec.in_h) + "x" +
                             std::to_string(spec.in_w) + " batch, got " +
                             Tensor::shape_string(features.shape()));
    }
    for (std::size_t i = 0; i + 1 < params.weights.size(); ++i) {
        x = conv2d(x, effective_weight(params.weights[i]), spec.layers[i].pad);
        x = relu(add_channel_bias(x, params.biases[i]));
        x = max_pool2(x);
    }
    const std::size_t n = features.dim(0);
    x = reshape(x, {n, x->value.size() / n});
    const std::size_t last = params.weights.size() - 1;
    return add_bias(matmul(x, effective_weight(params.weights[last])), params.biases[last]);
}

Var loss(const Var& logits, const std::vector<int>& labels) {
    return softmax_cross_entropy(logits, labels);
}

Tensor flatten_sigma(const ModelParams& params) {
    std::size_t total = 0;
    for (const DecomposedParam& p : params.weights) total += p.sigma->value.size();
    for (const Var& b : params.biases) total += b->value.size();
    Tensor out({total});
    std::size_t at = 0;
    for (const DecomposedParam& p : params.weights) {
        for (double v : p.sigma->value.values()) out[at++] = v;
    }
    for (const Var& b : params.biases) {
        for (double v : b->value.values()) out[at++] = v;
    }
    return out;
}

void unflatten_sigma(ModelParams& params, const Tensor& flat) {
    std::size_t at = 0;
    for (DecomposedParam& p : params.weights) {
        for (double& v : p.sigma->value.values()) v = flat[at++];
    }
    for (Var& b : params.biases) {
        for (double& v : b->value.values()) v = flat[at++];
    }
    if (at != flat.size()) {
        throw DimensionError("unflatten_sigma: vector length " + std::to_string(flat.size()) +
                             " does not match model (" + std::to_string(at) + ")");
    }
}

Tensor materialized_tau(const DecomposedParam& p) {
    const Tensor& b = p.factor_b->value;
    const Tensor& a = p.factor_a->value;
    Tensor out({b.rows(), a.cols()});
    kernels::matmul(b.data(), a.data(), out.data(), b.rows(), b.cols(), a.cols());
    return out;
}

Tensor flatten_tau(const ModelParams& params) {
    std::vector<Tensor> taus;
    std::size_t total = 0;
    for (const DecomposedParam& p : params.weights) {
        taus.push_back(materialized_tau(p));
        total += taus.back().size();
    }
    Tensor out({total});
    std::size_t at = 0;
    for (const Tensor& t : taus) {
        for (double v : t.values()) out[at++] = v;
    }
    return out;
}

Tensor forward_plain(const ModelSpec& spec, const PlainModel& model, const Tensor& features) {
    ModelParams tmp;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        DecomposedParam p;
        const LayerDesc& layer = spec.layers[i];
        p.kind = layer.kind;
        p.in_dim = layer.in_dim;
        p.out_dim = layer.out_dim;
        p.kernel = layer.kernel;
        p.inner_rank = 1;
        p.sigma = make_const(model.weights.at(i));
        const bool conv = layer.kind == LayerKind::Convolutional;
        p.factor_b = make_const(Tensor({conv ? layer.in_dim * layer.kernel : layer.in_dim, 1}));
        p.factor_a =
            make_const(Tensor({1, conv ? layer.out_dim * layer.kernel : layer.out_dim}));
        tmp.weights.push_back(std::move(p));
        tmp.biases.push_back(make_const(model.biases.at(i)));
    }
    // With B identically zero the effective weight is sigma bitwise, so this
    // evaluates the undecomposed network through the same kernels.
    return forward(spec, tmp, features)->value;
}

namespace {

void write_u32(std::ofstream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ofstream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void write_doubles(std::ofstream& os, const Tensor& t) {
    for (double v : t.values()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        write_u64(os, bits);
    }
}

std::uint32_t read_u32(std::ifstream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(path + ": truncated at offset " + std::to_string(is.tellg()));
    }
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

std::uint64_t read_u64(std::ifstream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) {
        throw FormatError(path + ": truncated at offset " + std::to_string(is.tellg()));
    }
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

void read_doubles(std::ifstream& is, Tensor& t, const std::string& path) {
    for (double& v : t.values()) {
        const std::uint64_t bits = read_u64(is, path);
        std::memcpy(&v, &bits, 8);
    }
}

constexpr std::uint32_t kCheckpointMagic = 0x50434446;  // "FDCP" little-endian
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_params(const ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_u32(os, kCheckpointMagic);
    write_u32(os, kCheckpointVersion);
    write_u32(os, static_cast<std::uint32_t>(params.weights.size()));
    // Shape table, then payload, layer order.
    auto write_shape = [&os](const Tensor& t) {
        write_u32(os, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t d : t.shape()) write_u64(os, d);
    };
    for (const DecomposedParam& p : params.weights) {
        write_u32(os, p.kind == LayerKind::Convolutional ? 1 : 0);
        write_u64(os, p.inner_rank);
        write_shape(p.sigma->value);
        write_shape(p.factor_b->value);
        write_shape(p.factor_a->value);
    }
    for (const Var& b : params.biases) write_shape(b->value);
    for (const DecomposedParam& p : params.weights) {
        write_doubles(os, p.sigma->value);
        write_doubles(os, p.factor_b->value);
        write_doubles(os, p.factor_a->value);
    }
    for (const Var& b : params.biases) write_doubles(os, b->value);
    if (!os) throw IoError("write failed for " + path);
}

ModelParams load_params(const ModelSpec& spec, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    if (read_u32(is, path) != kCheckpointMagic) {
        throw FormatError(path + ": bad magic at offset 0");
    }
    if (read_u32(is, path) != kCheckpointVersion) {
        throw FormatError(path + ": unsupported version at offset 4");
    }
    const std::uint32_t layers = read_u32(is, path);
    if (layers != spec.layers.size()) {
        throw FormatError(path + ": layer count " + std::to_string(layers) +
                          " does not match model spec");
    }
    auto read_shape = [&is, &path]() {
        const std::uint32_t nd = read_u32(is, path);
        std::vector<std::size_t> shape(nd);
        for (auto& d : shape) d = read_u64(is, path);
        return shape;
    };
    ModelParams params;
    for (std::uint32_t i = 0; i < layers; ++i) {
        DecomposedParam p;
        p.kind = read_u32(is, path) == 1 ? LayerKind::Convolutional : LayerKind::FullyConnected;
        p.inner_rank = read_u64(is, path);
        p.sigma = make_param(Tensor(read_shape()));
        p.factor_b = make_param(Tensor(read_shape()));
        p.factor_a = make_param(Tensor(read_shape()));
        const LayerDesc& layer = spec.layers[i];
        p.in_dim = layer.in_dim;
        p.out_dim = layer.out_dim;
        p.kernel = layer.kernel;
        params.weights.push_back(std::move(p));
    }
    for (std::uint32_t i = 0; i < layers; ++i) {
        params.biases.push_back(make_param(Tensor(read_shape())));
    }
    for (DecomposedParam& p : params.weights) {
        read_doubles(is, p.sigma->value, path);
        read_doubles(is, p.factor_b->value, path);
        read_doubles(is, p.factor_a->value, path);
    }
    for (Var& b : params.biases) read_doubles(is, b->value, path);
    return params;
}

}  // namespace fdsim
