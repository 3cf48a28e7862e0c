#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fdsim/model.hpp"
#include "fdsim/tensor.hpp"

namespace fdsim {

struct RoundMetrics {
    std::size_t round = 0;  // 1-based
    std::vector<double> client_accuracy;
    double mean_accuracy = 0.0;
    double model_difference = 0.0;
    double delta_sigma = 0.0;
    double delta_tau = 0.0;
    std::uint64_t uploaded_bytes = 0;
    std::uint64_t trained_params_tau_phase = 0;
    std::uint64_t trained_params_sigma_phase = 0;
    double seconds = 0.0;
};

struct ExperimentReport {
    std::string config_text;
    std::uint64_t config_digest = 0;
    std::vector<RoundMetrics> rounds;
    bool has_best = false;  // false marks "undefined" for zero-round runs
    double best_mean_accuracy = 0.0;
    std::size_t best_round = 0;
};

/// Appends a round and keeps best_mean_accuracy = max over rounds.
void append_round(ExperimentReport& report, RoundMetrics metrics);

/// Top-1 accuracy; argmax ties break toward the lowest class index.
double accuracy(const ModelSpec& spec, const ModelParams& params, const Tensor& features,
                const std::vector<int>& labels);

/// (1/N) * sum_i || sigma_i - sigma_bar ||_2 over flattened vectors.
double model_difference(std::span<const Tensor> client_sigmas, const Tensor& sigma_bar);

/// First/last snapshots for the end-of-run drift norms.
struct DeltaHistory {
    Tensor sigma_bar_first, sigma_bar_last;
    std::vector<Tensor> tau_first, tau_last;  // per client, flattened
};

/// (||sigma_bar_last - sigma_bar_first||, mean_i ||tau_i_last - tau_i_first||).
std::pair<double, double> delta_norms(const DeltaHistory& history);

/// Columns: round, mean_acc, acc_client_0..N-1, model_diff, delta_sigma,
/// delta_tau, uploaded_bytes, secs. Doubles printed with 17 significant
/// digits so a read-back is lossless.
void emit_csv(const ExperimentReport& report, const std::string& path);
void emit_json(const ExperimentReport& report, const std::string& path);

}  // namespace fdsim
