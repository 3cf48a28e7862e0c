#include "fdsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "fdsim/errors.hpp"
#include "fdsim/rng.hpp"

namespace fdsim {

Dataset synth_mixture(std::size_t classes, std::size_t dim, std::size_t n_per_class,
                      double separation, std::uint64_t seed) {
    if (classes < 2) throw ValidationError("synth_mixture: classes must be >= 2");
    if (dim < 2) throw ValidationError("synth_mixture: dim must be >= 2");
    if (n_per_class < 1) throw ValidationError("synth_mixture: n_per_class must be >= 1");
    if (separation < 0.0) throw ValidationError("synth_mixture: separation must be >= 0");
    if (classes > 2 * (dim - 1)) {
        throw ValidationError("synth_mixture: at most " + std::to_string(2 * (dim - 1)) +
                              " classes fit in dimension " + std::to_string(dim));
    }

    const double s = kFarSpread;
    const double t = kTwinSplit;
    std::vector<std::vector<double>> means(classes, std::vector<double>(dim, 0.0));
    for (std::size_t c = 0; c < classes; ++c) {
        if (c < 2) {
            // the twin pair: same axis, split by +/- t along the twin slot
            const std::size_t twin_slot = dim >= 3 ? 2 : 1;
            const double axis = std::sqrt(1.0 - s * s - t * t);
            means[c][0] = separation * axis;
            means[c][1] += separation * s;
            means[c][twin_slot] += separation * (c == 0 ? t : -t);
        } else {
            const std::size_t slot = 1 + c % (dim - 1);
            const double sign = c < dim - 1 ? 1.0 : -1.0;
            means[c][0] = separation * std::sqrt(1.0 - s * s);
            means[c][slot] += separation * sign * s;
        }
    }

    Rng rng(derive_seed(seed, seed_role::kData));
    const std::size_t n = classes * n_per_class;
    Dataset ds;
    ds.classes = classes;
    ds.features = Tensor({n, dim});
    ds.labels.resize(n);
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t i = 0; i < n_per_class; ++i) {
            const std::size_t row = c * n_per_class + i;
            ds.labels[row] = static_cast<int>(c);
            for (std::size_t j = 0; j < dim; ++j) {
                ds.features[row * dim + j] = means[c][j] + rng.gaussian();
            }
        }
    }
    return ds;
}

namespace {

std::uint32_t read_be_u32(std::ifstream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(path + ": truncated at offset " +
                          std::to_string(static_cast<long long>(is.tellg())));
    }
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("cannot open " + images_path);
    if (read_be_u32(imgs, images_path) != 0x00000803u) {
        throw FormatError(images_path + ": bad image magic at offset 0");
    }
    const std::uint32_t n = read_be_u32(imgs, images_path);
    const std::uint32_t h = read_be_u32(imgs, images_path);
    const std::uint32_t w = read_be_u32(imgs, images_path);

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("cannot open " + labels_path);
    if (read_be_u32(labs, labels_path) != 0x00000801u) {
        throw FormatError(labels_path + ": bad label magic at offset 0");
    }
    const std::uint32_t n_labels = read_be_u32(labs, labels_path);
    if (n_labels != n) {
        throw FormatError(labels_path + ": " + std::to_string(n_labels) + " labels for " +
                          std::to_string(n) + " images (offset 4)");
    }

    Dataset ds;
    ds.features = Tensor({n, 1, h, w});
    ds.labels.resize(n);
    std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * h * w);
    if (!imgs.read(reinterpret_cast<char*>(pixels.data()),
                   static_cast<std::streamsize>(pixels.size()))) {
        throw FormatError(images_path + ": truncated pixel data at offset " +
                          std::to_string(static_cast<long long>(imgs.tellg())));
    }
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        ds.features[i] = static_cast<double>(pixels[i]) / 255.0;
    }
    std::vector<unsigned char> raw(n);
    if (!labs.read(reinterpret_cast<char*>(raw.data()), n)) {
        throw FormatError(labels_path + ": truncated label data at offset " +
                          std::to_string(static_cast<long long>(labs.tellg())));
    }
    int max_label = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        ds.labels[i] = static_cast<int>(raw[i]);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.classes = static_cast<std::size_t>(std::max(max_label + 1, 2));
    return ds;
}

namespace {

/// Largest-remainder rounding of total * weights (weights need not be
/// normalized). Ties go to the lower class index.
std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& weights) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    const std::size_t k = weights.size();
    std::vector<std::size_t> counts(k, 0);
    if (wsum <= 0.0 || total == 0) return counts;
    std::vector<double> remainders(k);
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const double exact = static_cast<double>(total) * weights[c] / wsum;
        counts[c] = static_cast<std::size_t>(std::floor(exact));
        remainders[c] = exact - std::floor(exact);
        assigned += counts[c];
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return remainders[a] > remainders[b];
    });
    for (std::size_t i = 0; assigned < total; ++i) {
        counts[order[i % k]] += 1;
        ++assigned;
    }
    return counts;
}

/// Caps counts at pool availability and redistributes any deficit over the
/// remaining classes proportionally to their probability.
std::vector<std::size_t> resolve_shortfall(std::vector<std::size_t> counts,
                                           const std::vector<std::size_t>& available,
                                           const std::vector<double>& probs) {
    const std::size_t k = counts.size();
    std::vector<bool> capped(k, false);
    for (;;) {
        std::size_t deficit = 0;
        std::size_t worst_class = 0;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > available[c]) {
                if (counts[c] - available[c] > 0) worst_class = c;
                deficit += counts[c] - available[c];
                counts[c] = available[c];
                capped[c] = true;
            }
        }
        if (deficit == 0) return counts;
        std::vector<double> weights(k, 0.0);
        double wsum = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (!capped[c] && counts[c] < available[c]) {
                weights[c] = probs[c] > 0.0 ? probs[c] : 1e-300;
                wsum += weights[c];
            }
        }
        if (wsum == 0.0) {
            throw CapacityError("partition: class " + std::to_string(worst_class) +
                                " pool exhausted and no class can absorb the deficit");
        }
        const std::vector<std::size_t> extra = largest_remainder(deficit, weights);
        for (std::size_t c = 0; c < k; ++c) counts[c] += extra[c];
    }
}

}  // namespace

PartitionPlan dirichlet_partition(const std::vector<int>& labels, std::size_t classes,
                                  std::size_t n_clients, double alpha,
                                  std::size_t train_per_client, std::size_t test_per_client,
                                  std::uint64_t seed) {
    if (!(alpha > 0.0)) throw ValidationError("dirichlet_partition: alpha must be positive");
    if (n_clients < 1) throw ValidationError("dirichlet_partition: need at least one client");
    if (train_per_client < 1) {
        throw ValidationError("dirichlet_partition: every client needs >= 1 training sample");
    }
    std::vector<std::vector<std::size_t>> pools(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
            throw ValidationError("dirichlet_partition: label " + std::to_string(labels[i]) +
                                  " outside [0, " + std::to_string(classes) + ")");
        }
        pools[static_cast<std::size_t>(labels[i])].push_back(i);
    }

    Rng rng(derive_seed(seed, seed_role::kPartition));
    for (auto& pool : pools) rng.shuffle(pool);

    PartitionPlan plan;
    plan.alpha = alpha;
    plan.seed = seed;
    plan.train.resize(n_clients);
    plan.test.resize(n_clients);

    auto available = [&pools]() {
        std::vector<std::size_t> a(pools.size());
        for (std::size_t c = 0; c < pools.size(); ++c) a[c] = pools[c].size();
        return a;
    };
    auto draw = [&pools](const std::vector<std::size_t>& counts,
                         std::vector<std::size_t>& out) {
        for (std::size_t c = 0; c < counts.size(); ++c) {
            for (std::size_t i = 0; i < counts[c]; ++i) {
                out.push_back(pools[c].back());
                pools[c].pop_back();
            }
        }
    };

    for (std::size_t client = 0; client < n_clients; ++client) {
        const std::vector<double> p = rng.dirichlet(alpha, classes);
        draw(resolve_shortfall(largest_remainder(train_per_client, p), available(), p),
             plan.train[client]);
        draw(resolve_shortfall(largest_remainder(test_per_client, p), available(), p),
             plan.test[client]);
    }
    return plan;
}

PartitionStats partition_stats(const PartitionPlan& plan, const std::vector<int>& labels,
                               std::size_t classes) {
    PartitionStats stats;
    stats.histograms.resize(plan.train.size());
    double summary = 0.0;
    for (std::size_t i = 0; i < plan.train.size(); ++i) {
        std::vector<double> hist(classes, 0.0);
        for (std::size_t idx : plan.train[i]) {
            hist[static_cast<std::size_t>(labels[idx])] += 1.0;
        }
        const double n = static_cast<double>(plan.train[i].size());
        double mx = 0.0;
        for (double& h : hist) {
            if (n > 0) h /= n;
            mx = std::max(mx, h);
        }
        summary += mx;
        stats.histograms[i] = std::move(hist);
    }
    stats.mean_max_proportion =
        plan.train.empty() ? 0.0 : summary / static_cast<double>(plan.train.size());
    return stats;
}

void write_partition_json(const PartitionPlan& plan, const std::string& path) {
    nlohmann::ordered_json doc;
    doc["alpha"] = plan.alpha;
    doc["seed"] = plan.seed;
    doc["clients"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < plan.train.size(); ++i) {
        auto train = plan.train[i];
        auto test = plan.test[i];
        std::sort(train.begin(), train.end());
        std::sort(test.begin(), test.end());
        doc["clients"].push_back({{"train", train}, {"test", test}});
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << doc.dump(2) << "\n";
    if (!os) throw IoError("write failed for " + path);
}

Tensor gather_features(const Dataset& data, const std::vector<std::size_t>& indices) {
    const std::size_t row = data.features.size() / data.features.dim(0);
    std::vector<std::size_t> shape = data.features.shape();
    shape[0] = indices.size();
    Tensor out(std::move(shape));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = data.features.data() + indices[i] * row;
        std::copy(src, src + row, out.data() + i * row);
    }
    return out;
}

std::vector<int> gather_labels(const Dataset& data, const std::vector<std::size_t>& indices) {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) out[i] = data.labels[indices[i]];
    return out;
}

}  // namespace fdsim
