// Federated engine: selection, aggregation, local phases, round atomicity,
// checkpoints, and end-to-end determinism.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "fdsim/engine.hpp"

using namespace fdsim;

namespace {

namespace fs = std::filesystem;

ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.mode = Mode::FedDecomp;
    cfg.clients = 4;
    cfg.rounds = 2;
    cfg.epochs = 2;
    cfg.epochs_lora = 1;
    cfg.rank_ratio_fc = 0.5;
    cfg.alpha = 0.5;
    cfg.lr = 0.01;
    cfg.batch_size = 8;
    cfg.participation = 1.0;
    cfg.synth_classes = 4;
    cfg.synth_dim = 6;
    cfg.synth_per_class = 60;
    cfg.synth_separation = 3.0;
    cfg.train_per_client = 24;
    cfg.test_per_client = 8;
    cfg.model = "mlp";
    cfg.seed = 5;
    cfg.measure_time = false;
    return cfg;
}

Tensor flatten_all(const ModelParams& m) {
    const Tensor sigma = flatten_sigma(m);
    std::size_t total = sigma.size();
    for (const auto& w : m.weights) total += w.factor_b->value.size() + w.factor_a->value.size();
    Tensor out({total});
    std::size_t at = 0;
    for (std::size_t i = 0; i < sigma.size(); ++i) out[at++] = sigma[i];
    for (const auto& w : m.weights) {
        for (double v : w.factor_b->value.values()) out[at++] = v;
        for (double v : w.factor_a->value.values()) out[at++] = v;
    }
    return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

std::string report_text(const ExperimentReport& report) {
    const std::string path = (fs::temp_directory_path() / "fdsim_engine_report.csv").string();
    emit_csv(report, path);
    std::ifstream is(path);
    std::stringstream buf;
    buf << is.rdbuf();
    fs::remove(path);
    return buf.str();
}

}  // namespace

TEST_CASE("select_participants: full fraction, ceil counts, determinism") {
    const auto all = select_participants(8, 1.0, 1);
    CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});

    CHECK(select_participants(40, 0.5, 2).size() == 20);
    CHECK(select_participants(40, 0.9, 2).size() == 36);
    CHECK(select_participants(20, 0.7, 2).size() == 14);
    CHECK(select_participants(7, 0.3, 2).size() == 3);  // ceil(2.1)

    const auto a = select_participants(20, 0.5, 99);
    const auto b = select_participants(20, 0.5, 99);
    CHECK(a == b);
    CHECK(std::is_sorted(a.begin(), a.end()));
    const std::set<std::size_t> uniq(a.begin(), a.end());
    CHECK(uniq.size() == a.size());
    CHECK(a != select_participants(20, 0.5, 100));

    CHECK_THROWS_AS(select_participants(5, 0.0, 1), ValidationError);
    CHECK_THROWS_AS(select_participants(5, 1.5, 1), ValidationError);
}

TEST_CASE("aggregate: idempotence, mean, Kahan oracle, shape errors") {
    const Tensor two({1}, {2.0});
    const Tensor four({1}, {4.0});
    const GlobalModel mean = aggregate({{two}, {four}}, 6);
    CHECK(mean.shared[0][0] == 3.0);
    CHECK(mean.round == 7);

    const GlobalModel same = aggregate({{four}, {four}, {four}}, 0);
    CHECK(same.shared[0][0] == 4.0);

    // Compensated-sum oracle over many random uploads.
    Rng rng(3);
    const std::size_t k = 64, n = 50;
    std::vector<std::vector<Tensor>> uploads(k);
    for (auto& u : uploads) {
        Tensor t({n});
        for (double& v : t.values()) v = rng.gaussian() * 1e6;
        u = {t};
    }
    const GlobalModel agg = aggregate(uploads, 0);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0, comp = 0.0;
        for (std::size_t u = 0; u < k; ++u) {
            const double y = uploads[u][0][i] - comp;
            const double t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        const double expect = sum / static_cast<double>(k);
        CHECK(std::abs(agg.shared[0][i] - expect) <= 1e-12 * std::abs(expect));
    }

    CHECK_THROWS_AS(aggregate({}, 0), ContractError);
    CHECK_THROWS_AS(aggregate({{two}, {two, four}}, 0), DimensionError);
    CHECK_THROWS_AS(aggregate({{two}, {Tensor({2})}}, 0), DimensionError);
}

TEST_CASE("shared parameter sets per mode") {
    const ModelSpec spec = ModelSpec::mlp(6, 3);  // 3 layers
    Rng rng(1);
    const ModelParams m = init_decomposed(spec, 0.5, 0.5, rng);

    CHECK(shared_params(m, Mode::FedDecomp).size() == 6);   // 3 sigma + 3 bias
    CHECK(shared_params(m, Mode::FedAvg).size() == 6);
    CHECK(shared_params(m, Mode::Simultaneous).size() == 6);
    CHECK(shared_params(m, Mode::Local).empty());
    CHECK(shared_params(m, Mode::LocalLowRank).empty());
    CHECK(shared_params(m, Mode::FedDecompReverse).size() == 6);  // 3 B + 3 A
    CHECK(shared_params(m, Mode::FedAvgLowRank).size() == 12);
    const auto fedper = shared_params(m, Mode::FedPer);
    CHECK(fedper.size() == 4);  // all but the last layer
    CHECK(fedper[0] == m.weights[0].sigma);
    CHECK(fedper[1] == m.weights[1].sigma);
    CHECK(fedper[2] == m.biases[0]);
    CHECK(fedper[3] == m.biases[1]);
    const auto rev = shared_params(m, Mode::FedDecompReverse);
    CHECK(rev[0] == m.weights[0].factor_b);
    CHECK(rev[3] == m.weights[0].factor_a);
}

TEST_CASE("local updates: zero epochs and zero lr are bitwise no-ops") {
    const ModelSpec spec = ModelSpec::mlp(6, 3);
    Rng rng(2);
    const Dataset data = synth_mixture(3, 6, 20, 2.0, 4);
    ClientState client;
    client.id = 0;
    client.model = init_decomposed(spec, 0.5, 0.5, rng);
    client.train_idx = {0, 1, 20, 21, 40, 41};

    const Tensor before = flatten_all(client.model);
    Rng r1(10);
    local_update_tau(client, spec, data, 0, 0.1, 4, r1);
    CHECK(bitwise_equal(before, flatten_all(client.model)));
    Rng r2(10);
    local_update_sigma(client, spec, data, 0, 0.1, 4, r2);
    CHECK(bitwise_equal(before, flatten_all(client.model)));
    Rng r3(10);
    local_update_tau(client, spec, data, 2, 0.0, 4, r3);
    CHECK(bitwise_equal(before, flatten_all(client.model)));

    // Empty shard raises a capacity error.
    ClientState empty;
    empty.model = client.model.clone();
    Rng r4(10);
    CHECK_THROWS_AS(local_update_tau(empty, spec, data, 1, 0.1, 4, r4), CapacityError);
}

TEST_CASE("tau phase freezes sigma; sigma phase freezes the factors") {
    const ModelSpec spec = ModelSpec::mlp(6, 3);
    Rng rng(6);
    const Dataset data = synth_mixture(3, 6, 20, 2.0, 4);
    ClientState client;
    client.model = init_decomposed(spec, 0.5, 0.5, rng);
    client.train_idx = {0, 5, 21, 26, 41, 46};

    const Tensor sigma0 = flatten_sigma(client.model);
    Rng r1(11);
    local_update_tau(client, spec, data, 2, 0.05, 3, r1);
    CHECK(bitwise_equal(sigma0, flatten_sigma(client.model)));

    const Tensor tau0 = flatten_tau(client.model);
    CHECK(l2_norm(tau0) > 0.0);  // factors actually moved
    Rng r2(12);
    local_update_sigma(client, spec, data, 2, 0.05, 3, r2);
    CHECK(bitwise_equal(tau0, flatten_tau(client.model)));
    CHECK(!bitwise_equal(sigma0, flatten_sigma(client.model)));
}

TEST_CASE("single full-batch epoch matches an analytic one-layer oracle") {
    // One decomposed fc layer: logits Z = X (sigma + B A) + b.
    // dZ = (softmax(Z) - onehot) / N, dW = X^T dZ, dB = dW A^T, dA = B^T dW,
    // db = column sums of dZ.
    const std::size_t N = 6, D = 4, C = 3, R = 2;
    ModelSpec spec;
    spec.arch = Arch::Mlp;
    spec.classes = C;
    spec.input_dim = D;
    spec.layers = {{LayerKind::FullyConnected, D, C, 1, 0, true}};

    Rng rng(19);
    Dataset data;
    data.classes = C;
    data.features = Tensor({N, D});
    for (double& v : data.features.values()) v = rng.gaussian();
    data.labels = {0, 2, 1, 1, 0, 2};

    ClientState client;
    client.model = init_decomposed(spec, static_cast<double>(R) / C, 0.5, rng);
    REQUIRE(client.model.weights[0].inner_rank == R);
    for (double& v : client.model.weights[0].factor_b->value.values()) v = 0.3 * rng.gaussian();
    client.train_idx.resize(N);
    for (std::size_t i = 0; i < N; ++i) client.train_idx[i] = i;

    const auto& layer = client.model.weights[0];
    const Tensor sigma = layer.sigma->value;
    const Tensor B = layer.factor_b->value;
    const Tensor A = layer.factor_a->value;
    const Tensor bias = client.model.biases[0]->value;

    // Replicate the epoch's shuffled sample order.
    const std::uint64_t shuffle_seed = 23;
    std::vector<std::size_t> order = client.train_idx;
    {
        Rng r(shuffle_seed);
        r.shuffle(order);
    }

    // Oracle gradients at the starting point, in the shuffled row order.
    std::vector<std::vector<double>> dZ(N, std::vector<double>(C, 0.0));
    for (std::size_t row = 0; row < N; ++row) {
        const std::size_t i = order[row];
        std::vector<double> z(C, 0.0);
        for (std::size_t c = 0; c < C; ++c) {
            double w_eff;
            for (std::size_t d = 0; d < D; ++d) {
                w_eff = sigma[d * C + c];
                for (std::size_t r = 0; r < R; ++r) w_eff += B[d * R + r] * A[r * C + c];
                z[c] += data.features[i * D + d] * w_eff;
            }
            z[c] += bias[c];
        }
        double mx = z[0];
        for (double v : z) mx = std::max(mx, v);
        double zsum = 0.0;
        for (double v : z) zsum += std::exp(v - mx);
        for (std::size_t c = 0; c < C; ++c) {
            dZ[row][c] = std::exp(z[c] - mx) / zsum;
            if (c == static_cast<std::size_t>(data.labels[i])) dZ[row][c] -= 1.0;
            dZ[row][c] /= static_cast<double>(N);
        }
    }
    std::vector<double> dW(D * C, 0.0), db(C, 0.0);
    for (std::size_t row = 0; row < N; ++row) {
        const std::size_t i = order[row];
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t c = 0; c < C; ++c)
                dW[d * C + c] += data.features[i * D + d] * dZ[row][c];
        for (std::size_t c = 0; c < C; ++c) db[c] += dZ[row][c];
    }
    std::vector<double> dB(D * R, 0.0), dA(R * C, 0.0);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) dB[d * R + r] += dW[d * C + c] * A[r * C + c];
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t d = 0; d < D; ++d) dA[r * C + c] += B[d * R + r] * dW[d * C + c];

    const double lr = 0.2;

    SUBCASE("tau phase") {
        Rng r(shuffle_seed);
        local_update_tau(client, spec, data, 1, lr, N, r);
        for (std::size_t i = 0; i < B.size(); ++i)
            CHECK(std::abs(layer.factor_b->value[i] - (B[i] - lr * dB[i])) < 1e-12);
        for (std::size_t i = 0; i < A.size(); ++i)
            CHECK(std::abs(layer.factor_a->value[i] - (A[i] - lr * dA[i])) < 1e-12);
        CHECK(bitwise_equal(sigma, layer.sigma->value));
        CHECK(bitwise_equal(bias, client.model.biases[0]->value));
    }
    SUBCASE("sigma phase") {
        Rng r(shuffle_seed);
        local_update_sigma(client, spec, data, 1, lr, N, r);
        for (std::size_t i = 0; i < sigma.size(); ++i)
            CHECK(std::abs(layer.sigma->value[i] - (sigma[i] - lr * dW[i])) < 1e-12);
        for (std::size_t i = 0; i < C; ++i)
            CHECK(std::abs(client.model.biases[0]->value[i] - (bias[i] - lr * db[i])) < 1e-12);
        CHECK(bitwise_equal(B, layer.factor_b->value));
        CHECK(bitwise_equal(A, layer.factor_a->value));
    }
}

TEST_CASE("degeneracy: zero tau epochs reproduces plain averaging") {
    ExperimentConfig fd = tiny_config();
    fd.rounds = 5;
    fd.epochs_lora = 0;
    ExperimentConfig fa = fd;
    fa.mode = Mode::FedAvg;

    Federation f1 = build_federation(fd);
    Federation f2 = build_federation(fa);
    for (std::size_t r = 0; r < fd.rounds; ++r) {
        run_round(f1);
        run_round(f2);
    }
    REQUIRE(f1.global.shared.size() == f2.global.shared.size());
    for (std::size_t t = 0; t < f1.global.shared.size(); ++t)
        for (std::size_t i = 0; i < f1.global.shared[t].size(); ++i)
            CHECK(std::abs(f1.global.shared[t][i] - f2.global.shared[t][i]) < 1e-9);
}

TEST_CASE("degeneracy: zero sigma epochs keeps the aggregate frozen") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 10;
    cfg.epochs = 2;
    cfg.epochs_lora = 2;  // all epochs on the factors
    Federation fed = build_federation(cfg);
    const std::vector<Tensor> global0 = fed.global.shared;

    std::vector<double> tau_norm_per_round;
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
        run_round(fed);
        for (std::size_t t = 0; t < global0.size(); ++t)
            CHECK(bitwise_equal(global0[t], fed.global.shared[t]));
        double total = 0.0;
        for (const ClientState& c : fed.clients) total += l2_norm(flatten_tau(c.model));
        tau_norm_per_round.push_back(total);
    }
    CHECK(tau_norm_per_round[0] > 0.0);
    CHECK(tau_norm_per_round[1] > tau_norm_per_round[0]);
    CHECK(tau_norm_per_round[2] > tau_norm_per_round[1]);
}

TEST_CASE("single client: aggregation is the identity on its sigma") {
    ExperimentConfig cfg = tiny_config();
    cfg.clients = 1;
    cfg.rounds = 1;
    Federation fed = build_federation(cfg);
    run_round(fed);
    const Tensor sigma = flatten_sigma(fed.clients[0].model);
    std::size_t at = 0;
    for (const Tensor& t : fed.global.shared) {
        for (double v : t.values()) {
            CHECK(v == sigma[at]);
            ++at;
        }
    }
    CHECK(at == sigma.size());
}

TEST_CASE("uploaded bytes match between feddecomp and fedavg, zero for local") {
    ExperimentConfig fd = tiny_config();
    fd.rounds = 1;
    ExperimentConfig fa = fd;
    fa.mode = Mode::FedAvg;
    ExperimentConfig lo = fd;
    lo.mode = Mode::Local;

    const auto r_fd = run_experiment(fd);
    const auto r_fa = run_experiment(fa);
    const auto r_lo = run_experiment(lo);
    CHECK(r_fd.rounds[0].uploaded_bytes == r_fa.rounds[0].uploaded_bytes);
    CHECK(r_fd.rounds[0].uploaded_bytes > 0);
    CHECK(r_lo.rounds[0].uploaded_bytes == 0);
}

TEST_CASE("trained-parameter accounting: tau phase is smaller at low rank") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 1;
    cfg.rank_ratio_fc = 0.25;
    const auto report = run_experiment(cfg);
    const auto& m = report.rounds[0];
    CHECK(m.trained_params_tau_phase > 0);
    CHECK(m.trained_params_sigma_phase > 0);
    CHECK(m.trained_params_tau_phase < m.trained_params_sigma_phase);
}

TEST_CASE("a failing client aborts the round atomically") {
    ExperimentConfig cfg = tiny_config();
    Federation fed = build_federation(cfg);
    run_round(fed);

    std::vector<Tensor> before;
    for (const ClientState& c : fed.clients) before.push_back(flatten_all(c.model));
    const std::vector<Tensor> global_before = fed.global.shared;
    const std::size_t round_before = fed.global.round;

    fed.clients[2].train_idx.clear();  // sabotage one client
    CHECK_THROWS_AS(run_round(fed), CapacityError);

    for (std::size_t i = 0; i < fed.clients.size(); ++i)
        CHECK(bitwise_equal(before[i], flatten_all(fed.clients[i].model)));
    for (std::size_t t = 0; t < global_before.size(); ++t)
        CHECK(bitwise_equal(global_before[t], fed.global.shared[t]));
    CHECK(fed.global.round == round_before);
}

TEST_CASE("every mode runs and reports finite metrics") {
    for (Mode mode : {Mode::FedDecomp, Mode::FedAvg, Mode::Local, Mode::LocalLowRank,
                      Mode::FedAvgLowRank, Mode::Simultaneous, Mode::FedDecompReverse,
                      Mode::FedPer}) {
        ExperimentConfig cfg = tiny_config();
        cfg.mode = mode;
        const ExperimentReport report = run_experiment(cfg);
        REQUIRE(report.rounds.size() == cfg.rounds);
        CHECK(report.has_best);
        for (const RoundMetrics& m : report.rounds) {
            CHECK(std::isfinite(m.mean_accuracy));
            CHECK(std::isfinite(m.model_difference));
            CHECK(std::isfinite(m.delta_sigma));
            CHECK(std::isfinite(m.delta_tau));
            CHECK(m.client_accuracy.size() == cfg.clients);
        }
    }
}

TEST_CASE("zero rounds yield an empty report with undefined best") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 0;
    const ExperimentReport report = run_experiment(cfg);
    CHECK(report.rounds.empty());
    CHECK(!report.has_best);
}

TEST_CASE("identical config and seed give byte-identical reports") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 3;
    const std::string a = report_text(run_experiment(cfg));
    const std::string b = report_text(run_experiment(cfg));
    CHECK(a == b);
    CHECK(!a.empty());
}

TEST_CASE("thread count does not change the results") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 3;
    const int max_threads = omp_get_max_threads();
    omp_set_num_threads(1);
    const std::string serial = report_text(run_experiment(cfg));
    omp_set_num_threads(4);
    const std::string parallel = report_text(run_experiment(cfg));
    omp_set_num_threads(max_threads);
    CHECK(serial == parallel);
}

TEST_CASE("partial participation trains only the selected clients") {
    ExperimentConfig cfg = tiny_config();
    cfg.clients = 6;
    cfg.participation = 0.5;
    Federation fed = build_federation(cfg);
    std::vector<Tensor> before;
    for (const ClientState& c : fed.clients) before.push_back(flatten_all(c.model));
    run_round(fed);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < fed.clients.size(); ++i)
        changed += bitwise_equal(before[i], flatten_all(fed.clients[i].model)) ? 0 : 1;
    CHECK(changed == 3);  // ceil(0.5 * 6)
}

TEST_CASE("checkpoint save/resume reproduces the uninterrupted run") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 4;

    // Uninterrupted.
    Federation straight = build_federation(cfg);
    std::vector<RoundMetrics> expect;
    for (std::size_t r = 0; r < 4; ++r) expect.push_back(run_round(straight));

    // Interrupted after round 2.
    const std::string dir = (fs::temp_directory_path() / "fdsim_ckpt_test").string();
    fs::remove_all(dir);
    Federation first = build_federation(cfg);
    run_round(first);
    run_round(first);
    save_checkpoint(first, dir);

    Federation resumed = load_checkpoint(cfg, dir);
    CHECK(resumed.global.round == 2);
    for (std::size_t r = 2; r < 4; ++r) {
        const RoundMetrics m = run_round(resumed);
        CHECK(m.round == expect[r].round);
        CHECK(m.mean_accuracy == expect[r].mean_accuracy);
        CHECK(m.model_difference == expect[r].model_difference);
        CHECK(m.delta_sigma == expect[r].delta_sigma);
        CHECK(m.delta_tau == expect[r].delta_tau);
        CHECK(m.uploaded_bytes == expect[r].uploaded_bytes);
    }

    // A different config must be rejected by the digest check.
    ExperimentConfig other = cfg;
    other.lr *= 2.0;
    CHECK_THROWS_AS(load_checkpoint(other, dir), FormatError);
    fs::remove_all(dir);
}
