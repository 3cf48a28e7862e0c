#include "fdsim/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace fdsim {

bool mode_aggregates(Mode mode) {
    return mode != Mode::Local && mode != Mode::LocalLowRank;
}

bool mode_trains_tau(Mode mode) {
    return mode == Mode::FedDecomp || mode == Mode::LocalLowRank ||
           mode == Mode::FedDecompReverse;
}

bool mode_joint(Mode mode) {
    return mode == Mode::Simultaneous || mode == Mode::FedAvgLowRank;
}

namespace {

// Only FedDecomp proper, FedAvg and the simultaneous ablation aggregate the
// complete sigma set, which makes the server aggregate directly comparable
// to flatten_sigma.
bool aggregates_full_sigma(Mode mode) {
    return mode == Mode::FedDecomp || mode == Mode::FedAvg || mode == Mode::Simultaneous;
}

}  // namespace

std::vector<Var> shared_params(const ModelParams& params, Mode mode) {
    std::vector<Var> out;
    const std::size_t layers = params.weights.size();
    switch (mode) {
        case Mode::FedDecomp:
        case Mode::FedAvg:
        case Mode::Simultaneous:
            for (const auto& w : params.weights) out.push_back(w.sigma);
            for (const auto& b : params.biases) out.push_back(b);
            break;
        case Mode::FedPer:
            for (std::size_t i = 0; i + 1 < layers; ++i) out.push_back(params.weights[i].sigma);
            for (std::size_t i = 0; i + 1 < layers; ++i) out.push_back(params.biases[i]);
            break;
        case Mode::FedDecompReverse:
            for (const auto& w : params.weights) out.push_back(w.factor_b);
            for (const auto& w : params.weights) out.push_back(w.factor_a);
            break;
        case Mode::FedAvgLowRank:
            for (const auto& w : params.weights) out.push_back(w.sigma);
            for (const auto& b : params.biases) out.push_back(b);
            for (const auto& w : params.weights) out.push_back(w.factor_b);
            for (const auto& w : params.weights) out.push_back(w.factor_a);
            break;
        case Mode::Local:
        case Mode::LocalLowRank:
            break;
    }
    return out;
}

std::vector<std::size_t> select_participants(std::size_t n, double fraction,
                                             std::uint64_t round_seed) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw ValidationError("participation fraction must lie in (0, 1]");
    }
    const auto count = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(n) - 1e-9));
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    if (count < n) {
        Rng rng(round_seed);
        rng.shuffle(ids);
        ids.resize(count);
        std::sort(ids.begin(), ids.end());
    }
    return ids;
}

GlobalModel aggregate(const std::vector<std::vector<Tensor>>& uploads, std::size_t prev_round) {
    if (uploads.empty()) throw ContractError("aggregate: empty participant list");
    GlobalModel out;
    out.round = prev_round + 1;
    out.shared = uploads.front();
    for (std::size_t u = 1; u < uploads.size(); ++u) {
        if (uploads[u].size() != out.shared.size()) {
            throw DimensionError("aggregate: uploads carry different tensor counts");
        }
        for (std::size_t t = 0; t < out.shared.size(); ++t) {
            if (!uploads[u][t].same_shape(out.shared[t])) {
                throw DimensionError("aggregate: tensor " + std::to_string(t) + " is " +
                                     Tensor::shape_string(uploads[u][t].shape()) + " vs " +
                                     Tensor::shape_string(out.shared[t].shape()));
            }
        }
    }
    // Mean computed as first upload plus the compensated mean of the deltas.
    // Identical uploads then reproduce the common value bit-for-bit (every
    // delta is exactly zero), so a federation whose clients never touch the
    // shared parameters keeps a bitwise-constant aggregate.
    const double inv = 1.0 / static_cast<double>(uploads.size());
    for (std::size_t t = 0; t < out.shared.size(); ++t) {
        for (std::size_t i = 0; i < out.shared[t].size(); ++i) {
            const double base = out.shared[t][i];
            double sum = 0.0;
            double comp = 0.0;
            for (std::size_t u = 1; u < uploads.size(); ++u) {
                const double y = (uploads[u][t][i] - base) - comp;
                const double tmp = sum + y;
                comp = (tmp - sum) - y;
                sum = tmp;
            }
            out.shared[t][i] = base + sum * inv;
        }
    }
    return out;
}

namespace {

void train_epochs(ClientState& client, const ModelSpec& spec, const Dataset& data,
                  Phase phase, std::size_t epochs, double lr, std::size_t batch_size,
                  Rng& rng) {
    if (client.train_idx.empty()) {
        throw CapacityError("client " + std::to_string(client.id) + " has an empty train shard");
    }
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    set_phase(client.model, phase);
    const std::vector<Var> params = client.model.all_params();
    std::vector<std::size_t> order = client.train_idx;
    for (std::size_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += batch_size) {
            const std::size_t end = std::min(at + batch_size, order.size());
            const std::vector<std::size_t> batch(order.begin() + at, order.begin() + end);
            const Tensor feats = gather_features(data, batch);
            const std::vector<int> labels = gather_labels(data, batch);
            const Var l = loss(forward(spec, client.model, feats), labels);
            const GradMap grads = backward(l);
            if (lr > 0.0) sgd_step(params, grads, SgdConfig{lr});
        }
    }
}

std::uint64_t param_bytes(const std::vector<Var>& vars) {
    std::uint64_t total = 0;
    for (const Var& v : vars) total += v->value.size() * sizeof(double);
    return total;
}

std::uint64_t param_count(const std::vector<Var>& vars) {
    std::uint64_t total = 0;
    for (const Var& v : vars) total += v->value.size();
    return total;
}

void load_shared(ModelParams& model, Mode mode, const GlobalModel& global) {
    const std::vector<Var> refs = shared_params(model, mode);
    if (refs.size() != global.shared.size()) {
        throw DimensionError("broadcast: global model tensor count mismatch");
    }
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (!refs[i]->value.same_shape(global.shared[i])) {
            throw DimensionError("broadcast: tensor " + std::to_string(i) + " shape mismatch");
        }
        refs[i]->value = global.shared[i];
    }
}

std::vector<Tensor> shared_values(const ModelParams& model, Mode mode) {
    std::vector<Tensor> out;
    for (const Var& v : shared_params(model, mode)) out.push_back(v->value);
    return out;
}

Tensor sigma_reference(const Federation& fed) {
    if (aggregates_full_sigma(fed.config.mode)) {
        // global.shared is [sigmas..., biases...], the flatten_sigma order.
        std::size_t total = 0;
        for (const Tensor& t : fed.global.shared) total += t.size();
        Tensor flat({total});
        std::size_t at = 0;
        for (const Tensor& t : fed.global.shared) {
            for (double v : t.values()) flat[at++] = v;
        }
        return flat;
    }
    Tensor mean = flatten_sigma(fed.clients.front().model);
    for (std::size_t c = 1; c < fed.clients.size(); ++c) {
        const Tensor f = flatten_sigma(fed.clients[c].model);
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += f[i];
    }
    for (double& v : mean.values()) v /= static_cast<double>(fed.clients.size());
    return mean;
}

std::uint64_t tau_phase_params(const ModelParams& model) {
    std::uint64_t total = 0;
    for (const auto& w : model.weights) {
        total += w.factor_b->value.size() + w.factor_a->value.size();
    }
    return total;
}

std::uint64_t sigma_phase_params(const ModelParams& model) {
    std::uint64_t total = 0;
    for (const auto& w : model.weights) total += w.sigma->value.size();
    for (const auto& b : model.biases) total += b->value.size();
    return total;
}

}  // namespace

void local_update_tau(ClientState& client, const ModelSpec& spec, const Dataset& data,
                      std::size_t epochs, double lr, std::size_t batch_size, Rng& rng) {
    train_epochs(client, spec, data, Phase::TauOnly, epochs, lr, batch_size, rng);
}

void local_update_sigma(ClientState& client, const ModelSpec& spec, const Dataset& data,
                        std::size_t epochs, double lr, std::size_t batch_size, Rng& rng) {
    train_epochs(client, spec, data, Phase::SigmaOnly, epochs, lr, batch_size, rng);
}

Federation build_federation(const ExperimentConfig& config) {
    validate_config(config);
    Federation fed;
    fed.config = config;

    if (config.dataset == "synthetic") {
        fed.data = synth_mixture(config.synth_classes, config.synth_dim,
                                 config.synth_per_class, config.synth_separation, config.seed);
    } else {
        fed.data = load_idx(config.idx_images, config.idx_labels);
    }
    if (config.model == "mlp") {
        if (fed.data.features.ndim() == 4) {
            const std::size_t n = fed.data.features.dim(0);
            fed.data.features = fed.data.features.reshaped({n, fed.data.features.size() / n});
        }
        fed.spec = ModelSpec::mlp(fed.data.features.cols(), fed.data.classes);
    } else {
        if (fed.data.features.ndim() != 4) {
            throw ValidationError("cnn model requires image-shaped data");
        }
        fed.spec = ModelSpec::cnn(fed.data.features.dim(2), fed.data.features.dim(3),
                                  fed.data.classes);
    }

    fed.plan = dirichlet_partition(fed.data.labels, fed.data.classes, config.clients,
                                   config.alpha, config.train_per_client,
                                   config.test_per_client, config.seed);

    Rng server_rng(derive_seed(config.seed, seed_role::kServerInit));
    const ModelParams server_template = init_decomposed(
        fed.spec, config.rank_ratio_fc, config.rank_ratio_conv, server_rng);

    for (std::size_t id = 0; id < config.clients; ++id) {
        ClientState client;
        client.id = id;
        Rng client_rng(derive_seed(config.seed, seed_role::kClientInit, id));
        client.model = init_decomposed(fed.spec, config.rank_ratio_fc, config.rank_ratio_conv,
                                       client_rng);
        // Everyone starts from the server's sigma and biases (the round-1
        // broadcast); the low-rank branch stays client-specific.
        for (std::size_t l = 0; l < client.model.weights.size(); ++l) {
            client.model.weights[l].sigma->value = server_template.weights[l].sigma->value;
            client.model.biases[l]->value = server_template.biases[l]->value;
        }
        client.train_idx = fed.plan.train[id];
        client.test_idx = fed.plan.test[id];
        fed.clients.push_back(std::move(client));
    }

    if (mode_aggregates(config.mode)) {
        fed.global.shared = shared_values(server_template, config.mode);
    }
    fed.global.round = 0;

    fed.sigma_bar_first = sigma_reference(fed);
    for (const ClientState& c : fed.clients) fed.tau_first.push_back(flatten_tau(c.model));
    return fed;
}

RoundMetrics run_round(Federation& fed) {
    const ExperimentConfig& cfg = fed.config;
    const std::size_t round = fed.global.round + 1;
    const std::size_t n = fed.clients.size();
    const std::vector<std::size_t> participants = select_participants(
        n, cfg.participation, derive_seed(cfg.seed, seed_role::kSelect, 0, round));

    std::vector<ModelParams> trained(participants.size());
    std::vector<double> part_acc(participants.size(), 0.0);
    std::vector<std::exception_ptr> failures(participants.size());

#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(participants.size()); ++k) {
        try {
            const std::size_t id = participants[static_cast<std::size_t>(k)];
            const ClientState& persisted = fed.clients[id];
            ClientState worker;
            worker.id = id;
            worker.model = persisted.model.clone();
            worker.train_idx = persisted.train_idx;
            worker.test_idx = persisted.test_idx;
            if (mode_aggregates(cfg.mode)) {
                load_shared(worker.model, cfg.mode, fed.global);
            }
            Rng rng(derive_seed(cfg.seed, seed_role::kShuffle, id, round));
            if (mode_joint(cfg.mode)) {
                train_epochs(worker, fed.spec, fed.data, Phase::Joint, cfg.epochs, cfg.lr,
                             cfg.batch_size, rng);
            } else if (mode_trains_tau(cfg.mode)) {
                local_update_tau(worker, fed.spec, fed.data, cfg.epochs_lora, cfg.lr,
                                 cfg.batch_size, rng);
                local_update_sigma(worker, fed.spec, fed.data, cfg.epochs - cfg.epochs_lora,
                                   cfg.lr, cfg.batch_size, rng);
            } else {
                local_update_sigma(worker, fed.spec, fed.data, cfg.epochs, cfg.lr,
                                   cfg.batch_size, rng);
            }
            part_acc[static_cast<std::size_t>(k)] =
                accuracy(fed.spec, worker.model, gather_features(fed.data, worker.test_idx),
                         gather_labels(fed.data, worker.test_idx));
            trained[static_cast<std::size_t>(k)] = std::move(worker.model);
        } catch (...) {
            failures[static_cast<std::size_t>(k)] = std::current_exception();
        }
    }
    for (const auto& failure : failures) {
        if (failure) std::rethrow_exception(failure);  // federation untouched
    }

    // Commit and aggregate, ascending client id.
    RoundMetrics metrics;
    metrics.round = round;
    metrics.client_accuracy.assign(n, 0.0);
    std::vector<bool> participated(n, false);
    for (std::size_t k = 0; k < participants.size(); ++k) {
        const std::size_t id = participants[k];
        fed.clients[id].model = std::move(trained[k]);
        metrics.client_accuracy[id] = part_acc[k];
        participated[id] = true;
    }
    for (std::size_t id = 0; id < n; ++id) {
        if (!participated[id]) {
            metrics.client_accuracy[id] =
                accuracy(fed.spec, fed.clients[id].model,
                         gather_features(fed.data, fed.clients[id].test_idx),
                         gather_labels(fed.data, fed.clients[id].test_idx));
        }
    }

    if (mode_aggregates(cfg.mode)) {
        std::vector<std::vector<Tensor>> uploads;
        uploads.reserve(participants.size());
        for (std::size_t id : participants) {
            uploads.push_back(shared_values(fed.clients[id].model, cfg.mode));
        }
        fed.global = aggregate(uploads, fed.global.round);
        metrics.uploaded_bytes = static_cast<std::uint64_t>(participants.size()) *
                                 param_bytes(shared_params(fed.clients.front().model, cfg.mode));
    } else {
        fed.global.round = round;
        metrics.uploaded_bytes = 0;
    }

    double acc_sum = 0.0;
    for (double a : metrics.client_accuracy) acc_sum += a;
    metrics.mean_accuracy = acc_sum / static_cast<double>(n);

    std::vector<Tensor> flats;
    flats.reserve(n);
    for (const ClientState& c : fed.clients) flats.push_back(flatten_sigma(c.model));
    const Tensor sigma_bar = sigma_reference(fed);
    metrics.model_difference = model_difference(flats, sigma_bar);

    double dsq = 0.0;
    for (std::size_t i = 0; i < sigma_bar.size(); ++i) {
        const double d = sigma_bar[i] - fed.sigma_bar_first[i];
        dsq += d * d;
    }
    metrics.delta_sigma = std::sqrt(dsq);
    double dtau = 0.0;
    for (std::size_t id = 0; id < n; ++id) {
        const Tensor tau = flatten_tau(fed.clients[id].model);
        double csq = 0.0;
        for (std::size_t i = 0; i < tau.size(); ++i) {
            const double d = tau[i] - fed.tau_first[id][i];
            csq += d * d;
        }
        dtau += std::sqrt(csq);
    }
    metrics.delta_tau = dtau / static_cast<double>(n);

    const ModelParams& sample = fed.clients.front().model;
    const bool tau_trained = mode_trains_tau(cfg.mode) || mode_joint(cfg.mode);
    metrics.trained_params_tau_phase = tau_trained ? tau_phase_params(sample) : 0;
    metrics.trained_params_sigma_phase =
        (mode_joint(cfg.mode) || !mode_trains_tau(cfg.mode) || cfg.epochs_lora < cfg.epochs)
            ? sigma_phase_params(sample)
            : 0;
    return metrics;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
    Federation fed = build_federation(config);
    ExperimentReport report;
    report.config_text = emit_config(config);
    report.config_digest = config_digest(config);
    for (std::size_t t = 0; t < config.rounds; ++t) {
        const auto start = std::chrono::steady_clock::now();
        RoundMetrics metrics = run_round(fed);
        if (config.measure_time) {
            metrics.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        }
        append_round(report, std::move(metrics));
    }
    return report;
}

void save_checkpoint(const Federation& fed, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir);
    for (const ClientState& c : fed.clients) {
        save_params(c.model, dir + "/client_" + std::to_string(c.id) + ".fdcp");
    }
    if (mode_aggregates(fed.config.mode)) {
        // The global aggregate reuses the model layout: wrap it in a
        // template-shaped ModelParams so it shares the FDCP format.
        ModelParams wrapper = fed.clients.front().model.clone();
        load_shared(wrapper, fed.config.mode, fed.global);
        save_params(wrapper, dir + "/global.fdcp");
    }
    nlohmann::ordered_json manifest;
    manifest["round"] = fed.global.round;
    manifest["seed"] = fed.config.seed;
    manifest["config_digest"] = config_digest(fed.config);
    manifest["clients"] = fed.clients.size();
    std::ofstream os(dir + "/manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + dir + "/manifest.json");
    os << manifest.dump(2) << "\n";
}

Federation load_checkpoint(const ExperimentConfig& config, const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw IoError("cannot open " + dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(dir + "/manifest.json: " + e.what());
    }
    if (manifest.at("config_digest").get<std::uint64_t>() != config_digest(config)) {
        throw FormatError(dir + ": checkpoint was written with a different config");
    }
    Federation fed = build_federation(config);
    if (manifest.at("clients").get<std::size_t>() != fed.clients.size()) {
        throw FormatError(dir + ": client count mismatch");
    }
    for (ClientState& c : fed.clients) {
        c.model = load_params(fed.spec, dir + "/client_" + std::to_string(c.id) + ".fdcp");
    }
    if (mode_aggregates(config.mode)) {
        const ModelParams wrapper = load_params(fed.spec, dir + "/global.fdcp");
        fed.global.shared = shared_values(wrapper, config.mode);
    }
    fed.global.round = manifest.at("round").get<std::size_t>();
    return fed;
}

}  // namespace fdsim
