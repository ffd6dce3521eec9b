#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace mstm {

/// Seedable, splittable random stream.
///
/// A stream is identified by (seed, stream id); the pair is expanded through
/// std::seed_seq into the state of a 64-bit Mersenne twister. Distinct stream
/// ids give statistically independent streams, so replicates, chains and
/// per-sample workers derive their generators as `Rng(seed, id)` without any
/// shared mutable state. Output is bit-identical on one platform/toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                          0x6d73746dU};
        engine_.seed(seq);
    }

    Rng split(std::uint64_t stream) { return Rng(engine_(), stream); }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }

    Eigen::VectorXd normal_vector(Eigen::Index n) {
        Eigen::VectorXd z(n);
        for (Eigen::Index i = 0; i < n; ++i) z[i] = normal();
        return z;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace mstm
