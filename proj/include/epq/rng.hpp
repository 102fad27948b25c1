#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace epq {

// Seeded generator with hand-rolled draw primitives so that sampled artifacts
// are byte-identical across platforms and standard-library versions
// (std::uniform_real_distribution and friends are implementation-defined).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(uniform() * static_cast<double>(n)) % n;
    }

    /// Index drawn from an unnormalized nonnegative weight row (inverse CDF).
    int categorical(const Eigen::Ref<const Eigen::VectorXd>& weights) {
        const double total = weights.sum();
        if (!(total > 0.0))
            throw std::invalid_argument("categorical: weights sum to zero");
        double u = uniform() * total;
        const Eigen::Index n = weights.size();
        for (Eigen::Index i = 0; i < n; ++i) {
            u -= weights[i];
            if (u < 0.0) return static_cast<int>(i);
        }
        // Rounding pushed u past the last bucket with positive mass.
        for (Eigen::Index i = n - 1; i >= 0; --i)
            if (weights[i] > 0.0) return static_cast<int>(i);
        return static_cast<int>(n - 1);
    }

    /// Standard exponential via inverse CDF.
    double exponential() {
        double u;
        do {
            u = uniform();
        } while (u <= 0.0);
        return -std::log(u);
    }

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
};

} // namespace epq
