#pragma once

// Spatial graphs over grid nodes and the normalized propagation operator
// S = D^-1/2 (A + I) D^-1/2 used by graph convolutions.

#include "bstnn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bstnn {

struct Coord {
    double x = 0.0; // meters
    double y = 0.0;
};

double distance(const Coord& a, const Coord& b);

// a_ij = 1 if 0 < d(i, j) < radius, else 0.
Tensor build_adjacency_threshold(std::span<const Coord> coords, double radius);

struct DiffusionKernelOptions {
    // Weights below this value are dropped (0 keeps the dense kernel).
    double cutoff = 0.0;
    // exp(-d^2 / sigma_dk2) instead of exp(-d / sigma_dk2).
    bool squared_distance = false;
};

// a_ij = exp(-d(i, j) / sigma_dk2) for i != j, zero diagonal.
Tensor build_adjacency_diffusion(std::span<const Coord> coords, double sigma_dk2,
                                 const DiffusionKernelOptions& options = {});

// S = D^-1/2 (A + I) D^-1/2 with D_ii = sum_j (A + I)_ij. Nodes listed in
// `independent` lose all their edges first, so their S rows/columns are zero
// off the diagonal.
Tensor normalize_adjacency(const Tensor& adjacency, std::span<const std::size_t> independent = {});

// Nodes with fewer than `min_neighbors` other nodes within `radius`.
std::vector<std::size_t> detect_shore_nodes(std::span<const Coord> coords, double radius,
                                            std::size_t min_neighbors);

class SpatialGraph {
public:
    SpatialGraph() = default;
    SpatialGraph(std::vector<Coord> coords, Tensor adjacency, std::vector<std::string> node_ids = {},
                 std::vector<std::size_t> independent = {});

    // Diffusion-kernel graph over `coords`.
    static SpatialGraph diffusion(std::vector<Coord> coords, double sigma_dk2,
                                  const DiffusionKernelOptions& options = {},
                                  std::vector<std::string> node_ids = {});

    std::size_t size() const { return coords_.size(); }
    const std::vector<Coord>& coords() const { return coords_; }
    const Tensor& adjacency() const { return adjacency_; }
    const Tensor& s_matrix() const { return s_matrix_; }
    const std::vector<std::string>& node_ids() const { return node_ids_; }
    // Nodes whose edges are dropped before normalization, sorted.
    const std::vector<std::size_t>& independent_nodes() const { return independent_; }

    // FNV-1a over the node count and the bytes of S.
    std::uint64_t hash() const;

    // Graph with nodes relabeled: new node i is old node perm[i].
    SpatialGraph permuted(std::span<const std::size_t> perm) const;

private:
    std::vector<Coord> coords_;
    Tensor adjacency_;
    Tensor s_matrix_;
    std::vector<std::string> node_ids_;
    std::vector<std::size_t> independent_;
};

// Nodes CSV (node_id,x,y) and optional edge list CSV (src,dst,weight). Without
// an edge list, the diffusion kernel with `sigma_dk2` builds the adjacency.
SpatialGraph load_graph_csv(const std::filesystem::path& nodes_csv,
                            const std::filesystem::path& edges_csv, double sigma_dk2,
                            const DiffusionKernelOptions& options = {});

} // namespace bstnn
