#include "fdsim/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "fdsim/errors.hpp"

namespace fdsim {

void append_round(ExperimentReport& report, RoundMetrics metrics) {
    if (!report.has_best || metrics.mean_accuracy > report.best_mean_accuracy) {
        report.has_best = true;
        report.best_mean_accuracy = metrics.mean_accuracy;
        report.best_round = metrics.round;
    }
    report.rounds.push_back(std::move(metrics));
}

double accuracy(const ModelSpec& spec, const ModelParams& params, const Tensor& features,
                const std::vector<int>& labels) {
    if (labels.empty()) throw CapacityError("accuracy: empty test shard");
    const Tensor logits = forward(spec, params, features)->value;
    const std::size_t n = logits.rows(), c = logits.cols();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (logits[i * c + j] > logits[i * c + best]) best = j;
        }
        if (best == static_cast<std::size_t>(labels[i])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

double model_difference(std::span<const Tensor> client_sigmas, const Tensor& sigma_bar) {
    if (client_sigmas.empty()) throw ContractError("model_difference: no clients");
    double total = 0.0;
    for (const Tensor& s : client_sigmas) {
        if (!s.same_shape(sigma_bar)) {
            throw DimensionError("model_difference: client vector " +
                                 Tensor::shape_string(s.shape()) + " vs global " +
                                 Tensor::shape_string(sigma_bar.shape()));
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double d = s[i] - sigma_bar[i];
            sq += d * d;
        }
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(client_sigmas.size());
}

std::pair<double, double> delta_norms(const DeltaHistory& history) {
    if (history.sigma_bar_first.size() == 0 || history.tau_first.size() != history.tau_last.size()) {
        throw ContractError("delta_norms: missing first/last snapshot");
    }
    if (!history.sigma_bar_first.same_shape(history.sigma_bar_last)) {
        throw ContractError("delta_norms: snapshot shapes disagree");
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < history.sigma_bar_first.size(); ++i) {
        const double d = history.sigma_bar_last[i] - history.sigma_bar_first[i];
        sq += d * d;
    }
    const double dsigma = std::sqrt(sq);
    double dtau = 0.0;
    for (std::size_t c = 0; c < history.tau_first.size(); ++c) {
        double csq = 0.0;
        for (std::size_t i = 0; i < history.tau_first[c].size(); ++i) {
            const double d = history.tau_last[c][i] - history.tau_first[c][i];
            csq += d * d;
        }
        dtau += std::sqrt(csq);
    }
    if (!history.tau_first.empty()) dtau /= static_cast<double>(history.tau_first.size());
    return {dsigma, dtau};
}

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void emit_csv(const ExperimentReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    const std::size_t n_clients =
        report.rounds.empty() ? 0 : report.rounds.front().client_accuracy.size();
    os << "round,mean_acc";
    for (std::size_t i = 0; i < n_clients; ++i) os << ",acc_client_" << i;
    os << ",model_diff,delta_sigma,delta_tau,uploaded_bytes,secs\n";
    for (const RoundMetrics& r : report.rounds) {
        os << r.round << "," << fmt17(r.mean_accuracy);
        for (double a : r.client_accuracy) os << "," << fmt17(a);
        os << "," << fmt17(r.model_difference) << "," << fmt17(r.delta_sigma) << ","
           << fmt17(r.delta_tau) << "," << r.uploaded_bytes << "," << fmt17(r.seconds) << "\n";
    }
    if (!os) throw IoError("write failed for " + path);
}

void emit_json(const ExperimentReport& report, const std::string& path) {
    nlohmann::ordered_json doc;
    doc["config"] = report.config_text;
    doc["config_digest"] = report.config_digest;
    if (report.has_best) {
        doc["best_mean_accuracy"] = report.best_mean_accuracy;
        doc["best_round"] = report.best_round;
    } else {
        doc["best_mean_accuracy"] = nullptr;
        doc["best_round"] = nullptr;
    }
    doc["rounds"] = nlohmann::ordered_json::array();
    for (const RoundMetrics& r : report.rounds) {
        doc["rounds"].push_back({{"round", r.round},
                                 {"mean_accuracy", r.mean_accuracy},
                                 {"client_accuracy", r.client_accuracy},
                                 {"model_difference", r.model_difference},
                                 {"delta_sigma", r.delta_sigma},
                                 {"delta_tau", r.delta_tau},
                                 {"uploaded_bytes", r.uploaded_bytes},
                                 {"trained_params_tau_phase", r.trained_params_tau_phase},
                                 {"trained_params_sigma_phase", r.trained_params_sigma_phase},
                                 {"secs", r.seconds}});
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << doc.dump(2) << "\n";
    if (!os) throw IoError("write failed for " + path);
}

}  // namespace fdsim
