#include "bstnn/graph.hpp"

#include "bstnn/csv.hpp"
#include "bstnn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

namespace bstnn {

double distance(const Coord& a, const Coord& b) { return std::hypot(a.x - b.x, a.y - b.y); }

Tensor build_adjacency_threshold(std::span<const Coord> coords, double radius) {
    if (coords.empty()) throw ContractError("build_adjacency_threshold: graph needs at least one node");
    if (!(radius > 0.0)) throw DomainError("build_adjacency_threshold: radius must be positive");
    const std::size_t n = coords.size();
    Tensor a(Shape{n, n});
    auto d = a.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dist = distance(coords[i], coords[j]);
            if (dist > 0.0 && dist < radius) d[i * n + j] = d[j * n + i] = 1.0;
        }
    }
    return a;
}

Tensor build_adjacency_diffusion(std::span<const Coord> coords, double sigma_dk2,
                                 const DiffusionKernelOptions& options) {
    if (coords.empty()) throw ContractError("build_adjacency_diffusion: graph needs at least one node");
    if (!(sigma_dk2 > 0.0)) {
        throw DomainError("build_adjacency_diffusion: sigma_dk2 must be positive, got " +
                          std::to_string(sigma_dk2));
    }
    const std::size_t n = coords.size();
    Tensor a(Shape{n, n});
    auto d = a.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double dist = distance(coords[i], coords[j]);
            if (options.squared_distance) dist *= dist;
            double w = std::exp(-dist / sigma_dk2);
            if (w < options.cutoff) w = 0.0;
            d[i * n + j] = d[j * n + i] = w;
        }
    }
    return a;
}

Tensor normalize_adjacency(const Tensor& adjacency, std::span<const std::size_t> independent) {
    if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
        throw DimensionError("normalize_adjacency: adjacency must be square, got " +
                             shape_string(adjacency.shape()));
    }
    const std::size_t n = adjacency.dim(0);
    std::vector<double> a(adjacency.data().begin(), adjacency.data().end());
    for (double v : a) {
        if (v < 0.0 || !std::isfinite(v)) throw DomainError("normalize_adjacency: weights must be finite and non-negative");
    }
    for (std::size_t node : independent) {
        if (node >= n) throw ContractError("normalize_adjacency: independent node index out of range");
        for (std::size_t j = 0; j < n; ++j) a[node * n + j] = a[j * n + node] = 0.0;
    }
    for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1.0;
    std::vector<double> inv_sqrt_deg(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) deg += a[i * n + j];
        inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
    }
    return Tensor(Shape{n, n}, std::move(a));
}

std::vector<std::size_t> detect_shore_nodes(std::span<const Coord> coords, double radius,
                                            std::size_t min_neighbors) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        std::size_t count = 0;
        for (std::size_t j = 0; j < coords.size(); ++j) {
            if (i != j && distance(coords[i], coords[j]) < radius) ++count;
        }
        if (count < min_neighbors) out.push_back(i);
    }
    return out;
}

SpatialGraph::SpatialGraph(std::vector<Coord> coords, Tensor adjacency,
                           std::vector<std::string> node_ids, std::vector<std::size_t> independent)
    : coords_(std::move(coords)), adjacency_(std::move(adjacency)), node_ids_(std::move(node_ids)),
      independent_(std::move(independent)) {
    const std::size_t n = coords_.size();
    if (adjacency_.rank() != 2 || adjacency_.dim(0) != n || adjacency_.dim(1) != n) {
        throw DimensionError("spatial graph: adjacency " + shape_string(adjacency_.shape()) +
                             " does not match " + std::to_string(n) + " nodes");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (adjacency_.at(i, i) != 0.0) throw ContractError("spatial graph: adjacency diagonal must be zero");
        for (std::size_t j = i + 1; j < n; ++j) {
            if (adjacency_.at(i, j) != adjacency_.at(j, i)) {
                throw ContractError("spatial graph: adjacency must be symmetric");
            }
        }
    }
    if (node_ids_.empty()) {
        for (std::size_t i = 0; i < n; ++i) node_ids_.push_back(std::to_string(i));
    }
    if (node_ids_.size() != n) throw DimensionError("spatial graph: node id count mismatch");
    std::sort(independent_.begin(), independent_.end());
    independent_.erase(std::unique(independent_.begin(), independent_.end()), independent_.end());
    s_matrix_ = normalize_adjacency(adjacency_, independent_);
}

SpatialGraph SpatialGraph::diffusion(std::vector<Coord> coords, double sigma_dk2,
                                     const DiffusionKernelOptions& options,
                                     std::vector<std::string> node_ids) {
    Tensor a = build_adjacency_diffusion(coords, sigma_dk2, options);
    return SpatialGraph(std::move(coords), std::move(a), std::move(node_ids));
}

std::uint64_t SpatialGraph::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* bytes, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    const std::uint64_t n = size();
    mix(&n, sizeof(n));
    mix(s_matrix_.data().data(), s_matrix_.size() * sizeof(double));
    return h;
}

SpatialGraph SpatialGraph::permuted(std::span<const std::size_t> perm) const {
    const std::size_t n = size();
    if (perm.size() != n) throw DimensionError("permuted: permutation length differs from node count");
    std::vector<Coord> coords(n);
    std::vector<std::string> ids(n);
    Tensor a(Shape{n, n});
    auto d = a.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
        coords[i] = coords_[perm[i]];
        ids[i] = node_ids_[perm[i]];
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] = adjacency_.at(perm[i], perm[j]);
    }
    std::vector<std::size_t> inverse(n);
    for (std::size_t i = 0; i < n; ++i) inverse[perm[i]] = i;
    std::vector<std::size_t> independent;
    for (std::size_t node : independent_) independent.push_back(inverse[node]);
    return SpatialGraph(std::move(coords), std::move(a), std::move(ids), std::move(independent));
}

SpatialGraph load_graph_csv(const std::filesystem::path& nodes_csv,
                            const std::filesystem::path& edges_csv, double sigma_dk2,
                            const DiffusionKernelOptions& options) {
    CsvReader nodes(nodes_csv);
    const std::size_t c_id = nodes.column(nodes.header().front() == "node_id" ? "node_id" : "node");
    const std::size_t c_x = nodes.column("x");
    const std::size_t c_y = nodes.column("y");
    std::vector<Coord> coords;
    std::vector<std::string> ids;
    std::map<std::string, std::size_t> index;
    while (nodes.next()) {
        ids.push_back(nodes.text(c_id));
        if (!index.emplace(ids.back(), ids.size() - 1).second) {
            throw DataError(nodes_csv.string() + ":" + std::to_string(nodes.line()) +
                            ": duplicate node id '" + ids.back() + "'");
        }
        coords.push_back(Coord{nodes.number(c_x), nodes.number(c_y)});
    }
    if (coords.empty()) throw DataError(nodes_csv.string() + ": no nodes");
    if (edges_csv.empty()) return SpatialGraph::diffusion(std::move(coords), sigma_dk2, options, std::move(ids));

    const std::size_t n = coords.size();
    Tensor a(Shape{n, n});
    auto d = a.mutable_data();
    CsvReader edges(edges_csv);
    const std::size_t c_src = edges.column("src");
    const std::size_t c_dst = edges.column("dst");
    const std::size_t c_w = edges.column("weight");
    while (edges.next()) {
        const auto src = index.find(edges.text(c_src));
        const auto dst = index.find(edges.text(c_dst));
        if (src == index.end() || dst == index.end()) {
            throw DataError(edges_csv.string() + ":" + std::to_string(edges.line()) + ": unknown node id");
        }
        if (src->second == dst->second) continue;
        const double w = edges.number(c_w);
        d[src->second * n + dst->second] = w;
        d[dst->second * n + src->second] = w;
    }
    return SpatialGraph(std::move(coords), std::move(a), std::move(ids));
}

} // namespace bstnn
