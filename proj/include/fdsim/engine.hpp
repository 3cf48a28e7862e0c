#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fdsim/config.hpp"
#include "fdsim/data.hpp"
#include "fdsim/metrics.hpp"
#include "fdsim/model.hpp"
#include "fdsim/rng.hpp"

namespace fdsim {

struct ClientState {
    std::size_t id = 0;
    ModelParams model;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
};

/// Server-held aggregate: values of the mode's shared parameter set, in the
/// order given by shared_params().
struct GlobalModel {
    std::vector<Tensor> shared;
    std::size_t round = 0;
};

struct Federation {
    ExperimentConfig config;
    ModelSpec spec;
    Dataset data;
    PartitionPlan plan;
    std::vector<ClientState> clients;
    GlobalModel global;
    // Round-1 snapshots for the drift norms.
    Tensor sigma_bar_first;
    std::vector<Tensor> tau_first;
};

/// The parameters a client uploads in this mode: sigma matrices and biases
/// for sigma-sharing modes, the low-rank factors for feddecomp-reverse, both
/// for fedavg-lowrank, everything but the last layer for fedper. Empty for
/// the purely local modes.
std::vector<Var> shared_params(const ModelParams& params, Mode mode);

bool mode_aggregates(Mode mode);
bool mode_trains_tau(Mode mode);
bool mode_joint(Mode mode);

/// Uniform sample without replacement of ceil(fraction * n) ids, sorted.
std::vector<std::size_t> select_participants(std::size_t n, double fraction,
                                             std::uint64_t round_seed);

/// Unweighted elementwise mean over participants' uploads; bumps the round.
GlobalModel aggregate(const std::vector<std::vector<Tensor>>& uploads,
                      std::size_t prev_round);

/// E_lora epochs of mini-batch SGD on the low-rank factors; sigma and biases
/// stay bitwise untouched.
void local_update_tau(ClientState& client, const ModelSpec& spec, const Dataset& data,
                      std::size_t epochs, double lr, std::size_t batch_size, Rng& rng);

/// E_global epochs on sigma and biases; the factors stay bitwise untouched.
void local_update_sigma(ClientState& client, const ModelSpec& spec, const Dataset& data,
                        std::size_t epochs, double lr, std::size_t batch_size, Rng& rng);

Federation build_federation(const ExperimentConfig& config);

/// One communication round: broadcast, local phases, evaluation, aggregation.
/// Any client failure aborts atomically with the federation unchanged.
RoundMetrics run_round(Federation& fed);

ExperimentReport run_experiment(const ExperimentConfig& config);

// Full-state checkpoint: per-model binary files plus a JSON manifest with
// round index, seed, and config digest.
void save_checkpoint(const Federation& fed, const std::string& dir);
Federation load_checkpoint(const ExperimentConfig& config, const std::string& dir);

}  // namespace fdsim
