#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>
#include <span>
#include <vector>

#include "fdsim/errors.hpp"

namespace fdsim {

/// Deterministic random source. The generator algorithm is pinned so golden
/// files stay stable across platforms:
///  - engine: std::mt19937_64 (fully specified by the standard)
///  - uniform doubles: top 53 bits of the next word, scaled by 2^-53
///  - gaussian: basic Box-Muller, two uniforms per draw, no caching
///  - gamma: Marsaglia-Tsang squeeze, with the u^(1/shape) boost for shape < 1
///  - dirichlet: k independent gamma draws normalized to sum 1
///  - shuffle: Fisher-Yates using rejection-sampled bounded indices
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double gaussian() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Unbiased index in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw ContractError("Rng::index requires n > 0");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = eng_();
        while (v >= limit) v = eng_();
        return static_cast<std::size_t>(v % n);
    }

    /// Gamma(shape, 1), shape > 0.
    double gamma(double shape) {
        if (shape <= 0.0) throw ValidationError("gamma shape must be positive");
        if (shape < 1.0) {
            const double u = 1.0 - uniform();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = gaussian();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            const double u = 1.0 - uniform();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
                return d * v;
            }
        }
    }

    /// Symmetric Dirichlet(alpha, ..., alpha) over k categories.
    std::vector<double> dirichlet(double alpha, std::size_t k) {
        std::vector<double> p(k);
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            p[i] = gamma(alpha);
            sum += p[i];
        }
        for (double& v : p) v /= sum;
        return p;
    }

    std::size_t categorical(std::span<const double> probs) {
        const double u = uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        return probs.size() - 1;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

private:
    std::mt19937_64 eng_;
};

namespace seed_role {
// Per-purpose role constants; sub-seeds are root ^ role ^ mix(id), so adding
// clients never perturbs other clients' streams.
inline constexpr std::uint64_t kServerInit = 0x5eed0001a5a5a5a5ULL;
inline constexpr std::uint64_t kClientInit = 0x5eed0002c3c3c3c3ULL;
inline constexpr std::uint64_t kShuffle = 0x5eed0003d4d4d4d4ULL;
inline constexpr std::uint64_t kPartition = 0x5eed0004e5e5e5e5ULL;
inline constexpr std::uint64_t kSelect = 0x5eed0005f6f6f6f6ULL;
inline constexpr std::uint64_t kData = 0x5eed000687878787ULL;
}  // namespace seed_role

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t role,
                                 std::uint64_t id = 0, std::uint64_t round = 0) {
    return splitmix64(root ^ role ^ splitmix64(id + 1) ^ splitmix64(round * 0x100000001b3ULL + 7));
}

}  // namespace fdsim
