#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fdsim/tensor.hpp"

namespace fdsim {

struct Dataset {
    Tensor features;          // n x d (flat) or n x 1 x H x W (images)
    std::vector<int> labels;  // values in [0, classes)
    std::size_t classes;

    std::size_t size() const { return labels.size(); }
};

/// Gaussian mixture with unit covariance. Class means are separation * u_c
/// with the unit vectors u_c placed deterministically: classes 0 and 1 are a
/// close "twin" pair split by +/- kTwinSplit along one axis (the globally
/// hard boundary), every other class sits on its own well-separated axis
/// with weight kFarSpread. Client subsets that lack a twin are therefore
/// much easier than the full C-way problem, and skewed class priors carry
/// real information at the twin boundary. separation = 0 collapses all
/// classes onto one distribution. Labels are balanced, samples ordered by
/// class.
Dataset synth_mixture(std::size_t classes, std::size_t dim, std::size_t n_per_class,
                      double separation, std::uint64_t seed);

/// Mean distances at separation sep: the twins are 2 * kTwinSplit * sep
/// apart, all other class pairs at least kFarSpread * sqrt(2) * sep.
inline constexpr double kFarSpread = 0.6;
inline constexpr double kTwinSplit = 0.125;

/// IDX image/label pair (magic 0x803 / 0x801, big-endian dims). Pixels are
/// scaled to [0, 1] doubles.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

struct PartitionPlan {
    std::vector<std::vector<std::size_t>> train;  // per-client index lists
    std::vector<std::vector<std::size_t>> test;
    double alpha;
    std::uint64_t seed;
};

/// Dirichlet non-IID split: per client, class proportions ~ Dir(alpha),
/// rounded by largest remainder and drawn without replacement from shared
/// per-class pools in client-id order. Test indices follow the same
/// proportions from the held-out remainder. Pool shortfalls are
/// redistributed over the client's remaining classes proportionally to
/// residual probability.
PartitionPlan dirichlet_partition(const std::vector<int>& labels, std::size_t classes,
                                  std::size_t n_clients, double alpha,
                                  std::size_t train_per_client, std::size_t test_per_client,
                                  std::uint64_t seed);

struct PartitionStats {
    std::vector<std::vector<double>> histograms;  // per client, normalized, train shard
    double mean_max_proportion;                   // heterogeneity summary
};

PartitionStats partition_stats(const PartitionPlan& plan, const std::vector<int>& labels,
                               std::size_t classes);

/// JSON document: {"alpha":..., "seed":..., "clients":[{"train":[...],"test":[...]}]}
/// with sorted index arrays, for cross-implementation comparison.
void write_partition_json(const PartitionPlan& plan, const std::string& path);

/// Gathers the rows named by `indices` into a contiguous batch.
Tensor gather_features(const Dataset& data, const std::vector<std::size_t>& indices);
std::vector<int> gather_labels(const Dataset& data, const std::vector<std::size_t>& indices);

}  // namespace fdsim
