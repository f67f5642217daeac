#pragma once

#include "bstnn/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>

namespace bstnn {

// Source of standard-normal noise for weight sampling. Models draw exactly one
// block per variational parameter per forward pass through this interface,
// which is what lets tests count draws.
class NoiseSource {
public:
    virtual ~NoiseSource() = default;
    virtual void fill_normal(std::span<double> out) = 0;

    Tensor standard_normal(const Shape& shape);
};

// Seeded pseudo-random stream (64-bit Mersenne twister).
class Rng : public NoiseSource {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    std::uint64_t next_u64() { return engine_(); }
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    bool bernoulli(double p) { return uniform() < p; }

    void fill_normal(std::span<double> out) override;

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Decorrelated seed for sub-stream `stream` of `seed` (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

} // namespace bstnn
