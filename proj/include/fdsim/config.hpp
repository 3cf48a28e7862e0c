#pragma once

#include <cstdint>
#include <string>

namespace fdsim {

enum class Mode {
    FedDecomp,        // alternating tau/sigma, aggregate sigma
    FedAvg,           // all epochs on sigma, aggregate sigma
    Local,            // all epochs on sigma, no aggregation
    LocalLowRank,     // alternating, no aggregation
    FedAvgLowRank,    // joint training, aggregate sigma and factors
    Simultaneous,     // joint training, aggregate sigma only
    FedDecompReverse, // alternating, aggregate factors, sigma stays local
    FedPer,           // all epochs on sigma, aggregate all but the last layer
};

Mode parse_mode(const std::string& name);
std::string mode_name(Mode mode);

struct ExperimentConfig {
    Mode mode = Mode::FedDecomp;
    std::size_t clients = 20;
    std::size_t rounds = 10;
    std::size_t epochs = 5;
    std::size_t epochs_lora = 1;
    double rank_ratio_fc = 0.6;
    double rank_ratio_conv = 0.6;
    double alpha = 0.1;
    double lr = 0.1;
    std::size_t batch_size = 100;
    double participation = 1.0;
    std::string dataset = "synthetic";  // synthetic | idx
    std::size_t synth_classes = 8;
    std::size_t synth_dim = 16;
    std::size_t synth_per_class = 1000;
    double synth_separation = 8.0;
    std::size_t train_per_client = 120;
    std::size_t test_per_client = 40;
    std::string idx_images;
    std::string idx_labels;
    std::string model = "mlp";  // mlp | cnn
    std::uint64_t seed = 1;
    std::string out_dir = ".";
    bool measure_time = true;
};

/// Line-based `key = value` file, `#` comments, unknown keys rejected.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);

/// Canonical text form; parse(emit(c)) == c for every valid config.
std::string emit_config(const ExperimentConfig& cfg);

/// FNV-1a over the canonical text.
std::uint64_t config_digest(const ExperimentConfig& cfg);

/// Range and cross-key checks; throws ValidationError naming the keys.
void validate_config(const ExperimentConfig& cfg);

}  // namespace fdsim
