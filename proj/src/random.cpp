#include "bstnn/random.hpp"

namespace bstnn {

Tensor NoiseSource::standard_normal(const Shape& shape) {
    Tensor t(shape);
    fill_normal(t.mutable_data());
    return t;
}

std::size_t Rng::index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
}

void Rng::fill_normal(std::span<double> out) {
    for (double& v : out) v = normal_(engine_);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace bstnn
