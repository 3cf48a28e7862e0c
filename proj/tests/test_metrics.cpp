// Accuracy, dispersion/drift metrics, and the report writers.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "fdsim/metrics.hpp"
#include "fdsim/model.hpp"
#include "fdsim/rng.hpp"

using namespace fdsim;

namespace {

namespace fs = std::filesystem;

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.gaussian();
    return t;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, sep)) out.push_back(field);
    return out;
}

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

// A model that always predicts class `winner`: zero weights, one hot bias.
ModelParams constant_predictor(const ModelSpec& spec, std::size_t winner) {
    Rng rng(1);
    ModelParams params = init_decomposed(spec, 0.5, 0.5, rng);
    for (auto& w : params.weights) w.sigma->value.fill(0.0);
    params.biases.back()->value.fill(0.0);
    params.biases.back()->value[winner] = 1.0;
    return params;
}

}  // namespace

TEST_CASE("accuracy: constant predictor on single-class shards") {
    const ModelSpec spec = ModelSpec::mlp(4, 3);
    const ModelParams model = constant_predictor(spec, 0);
    Rng rng(2);
    const Tensor x = random_tensor({10, 4}, rng);
    CHECK(accuracy(spec, model, x, std::vector<int>(10, 0)) == 1.0);
    CHECK(accuracy(spec, model, x, std::vector<int>(10, 1)) == 0.0);
    CHECK_THROWS_AS(accuracy(spec, model, Tensor({0, 4}), {}), CapacityError);
}

TEST_CASE("accuracy: argmax ties break toward the lowest class index") {
    // All-zero model: every logit equals the bias, all biases zero -> ties
    // everywhere, predicted class must be 0.
    const ModelSpec spec = ModelSpec::mlp(4, 3);
    ModelParams model = constant_predictor(spec, 0);
    model.biases.back()->value.fill(0.0);
    Rng rng(3);
    const Tensor x = random_tensor({6, 4}, rng);
    CHECK(accuracy(spec, model, x, std::vector<int>(6, 0)) == 1.0);
    CHECK(accuracy(spec, model, x, std::vector<int>(6, 2)) == 0.0);
}

TEST_CASE("accuracy: random model near chance on a large balanced shard") {
    const std::size_t C = 4, n = 4000;
    const ModelSpec spec = ModelSpec::mlp(6, C);
    Rng rng(5);
    const ModelParams model = init_decomposed(spec, 0.5, 0.5, rng);
    Rng data_rng(6);
    const Tensor x = random_tensor({n, 6}, data_rng);
    // Labels independent of the inputs: expected accuracy is exactly 1/C.
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(data_rng.index(C));
    const double acc = accuracy(spec, model, x, labels);
    const double sigma = std::sqrt((1.0 / C) * (1.0 - 1.0 / C) / n);
    CHECK(std::abs(acc - 1.0 / C) < 3.0 * sigma + 1e-12);
}

TEST_CASE("model_difference: zero, symmetric pair, and norm oracle") {
    Rng rng(7);
    const Tensor bar = random_tensor({20}, rng);
    const std::vector<Tensor> same = {bar, bar, bar};
    CHECK(model_difference(same, bar) == 0.0);

    Tensor up = bar, down = bar;
    Tensor v = random_tensor({20}, rng);
    for (std::size_t i = 0; i < 20; ++i) {
        up[i] += v[i];
        down[i] -= v[i];
    }
    const std::vector<Tensor> pair = {up, down};
    CHECK(model_difference(pair, bar) == doctest::Approx(l2_norm(v)).epsilon(1e-12));

    // Straight-line oracle on random inputs.
    std::vector<Tensor> clients;
    for (int i = 0; i < 5; ++i) clients.push_back(random_tensor({20}, rng));
    double expect = 0.0;
    for (const Tensor& c : clients) {
        double sq = 0.0;
        for (std::size_t i = 0; i < 20; ++i) sq += (c[i] - bar[i]) * (c[i] - bar[i]);
        expect += std::sqrt(sq);
    }
    expect /= 5.0;
    CHECK(model_difference(clients, bar) == doctest::Approx(expect).epsilon(1e-12));

    // Linear scaling of the deviations scales the metric.
    std::vector<Tensor> scaled = clients;
    for (Tensor& c : scaled)
        for (std::size_t i = 0; i < 20; ++i) c[i] = bar[i] + 3.0 * (c[i] - bar[i]);
    CHECK(model_difference(scaled, bar) ==
          doctest::Approx(3.0 * model_difference(clients, bar)).epsilon(1e-12));

    CHECK_THROWS_AS(model_difference(std::vector<Tensor>{}, bar), ContractError);
    CHECK_THROWS_AS(model_difference(std::vector<Tensor>{Tensor({3})}, bar), DimensionError);
}

TEST_CASE("delta_norms: identical snapshots and unit shift") {
    DeltaHistory h;
    Rng rng(8);
    h.sigma_bar_first = random_tensor({10}, rng);
    h.sigma_bar_last = h.sigma_bar_first;
    h.tau_first = {random_tensor({6}, rng)};
    h.tau_last = h.tau_first;
    const auto [ds0, dt0] = delta_norms(h);
    CHECK(ds0 == 0.0);
    CHECK(dt0 == 0.0);

    h.sigma_bar_last[3] += 1.0;  // unit vector shift
    const auto [ds1, dt1] = delta_norms(h);
    CHECK(ds1 == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(dt1 == 0.0);

    DeltaHistory bad;
    bad.sigma_bar_first = Tensor({2});
    bad.sigma_bar_last = Tensor({3});
    CHECK_THROWS_AS(delta_norms(bad), ContractError);
}

TEST_CASE("append_round keeps the running best") {
    ExperimentReport report;
    CHECK(!report.has_best);
    double best_so_far = 0.0;
    Rng rng(9);
    for (std::size_t r = 1; r <= 30; ++r) {
        RoundMetrics m;
        m.round = r;
        m.mean_accuracy = rng.uniform();
        best_so_far = std::max(best_so_far, m.mean_accuracy);
        append_round(report, m);
        CHECK(report.has_best);
        CHECK(report.best_mean_accuracy == best_so_far);  // non-decreasing
    }
}

TEST_CASE("csv: empty report is header-only, columns are 7 + N") {
    ExperimentReport report;
    const std::string path = tmp_path("fdsim_empty.csv");
    emit_csv(report, path);
    std::ifstream is(path);
    std::string header, extra;
    CHECK(std::getline(is, header));
    CHECK(!std::getline(is, extra));
    CHECK(split(header, ',').size() == 7);  // no clients

    RoundMetrics m;
    m.round = 1;
    m.client_accuracy = {0.5, 0.25, 0.75};
    m.mean_accuracy = 0.5;
    append_round(report, m);
    emit_csv(report, path);
    std::ifstream is2(path);
    std::getline(is2, header);
    CHECK(split(header, ',').size() == 7 + 3);
    fs::remove(path);
}

TEST_CASE("csv: write-then-parse round-trips every numeric field exactly") {
    ExperimentReport report;
    Rng rng(10);
    for (std::size_t r = 1; r <= 4; ++r) {
        RoundMetrics m;
        m.round = r;
        m.client_accuracy = {rng.uniform(), rng.uniform()};
        m.mean_accuracy = (m.client_accuracy[0] + m.client_accuracy[1]) / 2.0;
        m.model_difference = rng.gaussian();
        m.delta_sigma = rng.gaussian();
        m.delta_tau = rng.gaussian();
        m.uploaded_bytes = rng.next_u64() % 1000000;
        m.seconds = rng.uniform() * 3.0;
        append_round(report, m);
    }
    const std::string path = tmp_path("fdsim_roundtrip.csv");
    emit_csv(report, path);

    std::ifstream is(path);
    std::string line;
    std::getline(is, line);  // header
    for (const RoundMetrics& m : report.rounds) {
        REQUIRE(std::getline(is, line));
        const auto f = split(line, ',');
        REQUIRE(f.size() == 9);
        CHECK(std::stoull(f[0]) == m.round);
        CHECK(std::stod(f[1]) == m.mean_accuracy);
        CHECK(std::stod(f[2]) == m.client_accuracy[0]);
        CHECK(std::stod(f[3]) == m.client_accuracy[1]);
        CHECK(std::stod(f[4]) == m.model_difference);
        CHECK(std::stod(f[5]) == m.delta_sigma);
        CHECK(std::stod(f[6]) == m.delta_tau);
        CHECK(std::stoull(f[7]) == m.uploaded_bytes);
        CHECK(std::stod(f[8]) == m.seconds);
    }
    fs::remove(path);
}

TEST_CASE("json report carries the undefined-best marker for empty runs") {
    ExperimentReport report;
    report.config_text = "clients = 2\n";
    report.config_digest = 42;
    const std::string path = tmp_path("fdsim_report.json");
    emit_json(report, path);
    std::ifstream is(path);
    std::stringstream buf;
    buf << is.rdbuf();
    const std::string text = buf.str();
    CHECK(text.find("\"best_mean_accuracy\": null") != std::string::npos);
    CHECK(text.find("\"rounds\": []") != std::string::npos);
    fs::remove(path);
}
