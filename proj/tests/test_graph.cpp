#include "bstnn/errors.hpp"
#include "bstnn/graph.hpp"
#include "bstnn/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace bstnn;

namespace {

std::vector<Coord> random_coords(std::size_t n, Rng& rng) {
    std::vector<Coord> c(n);
    for (auto& p : c) p = {3000.0 * rng.uniform(), 3000.0 * rng.uniform()};
    return c;
}

} // namespace

TEST(Threshold, FarApartNodesAreDisconnected) {
    const std::vector<Coord> c{{0, 0}, {10, 0}};
    const Tensor a = build_adjacency_threshold(c, 5.0);
    for (double v : a.data()) EXPECT_EQ(v, 0.0);
}

TEST(Threshold, CloseNodesAreConnected) {
    const std::vector<Coord> c{{0, 0}, {10, 0}};
    const Tensor a = build_adjacency_threshold(c, 20.0);
    EXPECT_EQ(a.at(0, 1), 1.0);
    EXPECT_EQ(a.at(1, 0), 1.0);
    EXPECT_EQ(a.at(0, 0), 0.0);
}

TEST(Threshold, CollinearChain) {
    const std::vector<Coord> c{{0, 0}, {100, 0}, {200, 0}};
    const Tensor a = build_adjacency_threshold(c, 150.0);
    const std::vector<double> expected{0, 1, 0, 1, 0, 1, 0, 1, 0};
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(a[i], expected[i]);
}

TEST(Threshold, InvalidInputs) {
    const std::vector<Coord> none;
    EXPECT_THROW(build_adjacency_threshold(none, 1.0), ContractError);
    const std::vector<Coord> c{{0, 0}};
    EXPECT_THROW(build_adjacency_threshold(c, 0.0), DomainError);
}

TEST(Diffusion, CoincidentNodesHaveUnitWeight) {
    const std::vector<Coord> c{{5, 5}, {5, 5}};
    const Tensor a = build_adjacency_diffusion(c, 1000.0);
    EXPECT_EQ(a.at(0, 1), 1.0);
    EXPECT_EQ(a.at(0, 0), 0.0);
}

TEST(Diffusion, KernelAtBandwidth) {
    const std::vector<Coord> c{{0, 0}, {1000, 0}};
    EXPECT_NEAR(build_adjacency_diffusion(c, 1000.0).at(0, 1), std::exp(-1.0), 1e-15);
}

TEST(Diffusion, DefaultBandwidthAtThreeKilometres) {
    const std::vector<Coord> c{{0, 0}, {0, 3000}};
    EXPECT_NEAR(build_adjacency_diffusion(c, 1000.0).at(0, 1), 0.049787068367863944, 1e-15);
}

TEST(Diffusion, CutoffAndSquaredVariant) {
    const std::vector<Coord> c{{0, 0}, {3000, 0}};
    EXPECT_EQ(build_adjacency_diffusion(c, 1000.0, {.cutoff = 0.1}).at(0, 1), 0.0);
    const std::vector<Coord> d{{0, 0}, {2, 0}};
    EXPECT_NEAR(build_adjacency_diffusion(d, 4.0, {.squared_distance = true}).at(0, 1), std::exp(-1.0), 1e-15);
    EXPECT_THROW(build_adjacency_diffusion(c, -1.0), DomainError);
}

TEST(Normalize, IsolatedNodeIsOne) {
    const Tensor s = normalize_adjacency(Tensor(Shape{1, 1}));
    EXPECT_EQ(s.item(), 1.0);
}

TEST(Normalize, TwoConnectedNodes) {
    const Tensor s = normalize_adjacency(Tensor::matrix({{0, 1}, {1, 0}}));
    for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.5);
    EXPECT_DOUBLE_EQ(s.at(0, 0) + s.at(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(s.at(1, 0) + s.at(1, 1), 1.0);
}

TEST(Normalize, RegularGraphRowSumsAreOne) {
    // 4-cycle: every node has degree 2.
    const Tensor a = Tensor::matrix({{0, 1, 0, 1}, {1, 0, 1, 0}, {0, 1, 0, 1}, {1, 0, 1, 0}});
    const Tensor s = normalize_adjacency(a);
    for (std::size_t i = 0; i < 4; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 4; ++j) row += s.at(i, j);
        EXPECT_NEAR(row, 1.0, 1e-15);
    }
}

TEST(Normalize, MatchesIndependentFormulaOnRandomGraphs) {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const auto coords = random_coords(6, rng);
        const Tensor a = build_adjacency_diffusion(coords, 1000.0);
        const Tensor s = normalize_adjacency(a);
        std::vector<double> deg(6, 1.0);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 6; ++j) deg[i] += a.at(i, j);
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = 0; j < 6; ++j) {
                const double aij = a.at(i, j) + (i == j ? 1.0 : 0.0);
                EXPECT_NEAR(s.at(i, j), aij / std::sqrt(deg[i] * deg[j]), 1e-14);
                EXPECT_EQ(s.at(i, j), s.at(j, i));
            }
        }
        // Spectral radius of S is at most 1: ||S^k x|| stays bounded.
        std::vector<double> x(6, 1.0);
        for (int k = 0; k < 50; ++k) {
            std::vector<double> y(6, 0.0);
            for (std::size_t i = 0; i < 6; ++i)
                for (std::size_t j = 0; j < 6; ++j) y[i] += s.at(i, j) * x[j];
            x = y;
        }
        for (double v : x) EXPECT_LE(std::abs(v), std::sqrt(6.0) + 1e-9);
    }
}

TEST(Normalize, IndependentNodesLoseTheirEdges) {
    const Tensor a = Tensor::matrix({{0, 1, 1}, {1, 0, 1}, {1, 1, 0}});
    const std::vector<std::size_t> independent{2};
    const Tensor s = normalize_adjacency(a, independent);
    EXPECT_EQ(s.at(2, 2), 1.0);
    EXPECT_EQ(s.at(2, 0), 0.0);
    EXPECT_EQ(s.at(1, 2), 0.0);
    EXPECT_DOUBLE_EQ(s.at(0, 1), 0.5);
    const std::vector<std::size_t> bad{3};
    EXPECT_THROW(normalize_adjacency(a, bad), ContractError);
}

TEST(Normalize, RejectsInvalidAdjacency) {
    EXPECT_THROW(normalize_adjacency(Tensor(Shape{2, 3})), DimensionError);
    EXPECT_THROW(normalize_adjacency(Tensor::matrix({{0, -1}, {-1, 0}})), DomainError);
}

TEST(ShoreNodes, SparseNeighbourhoodsDetected) {
    const std::vector<Coord> c{{0, 0}, {1, 0}, {0, 1}, {50, 50}};
    const auto shore = detect_shore_nodes(c, 2.0, 2);
    ASSERT_EQ(shore.size(), 1u);
    EXPECT_EQ(shore[0], 3u);
}

TEST(SpatialGraph, ValidatesAdjacency) {
    const std::vector<Coord> c{{0, 0}, {1, 0}};
    EXPECT_THROW(SpatialGraph(c, Tensor::matrix({{0, 1}, {0.5, 0}})), ContractError);
    EXPECT_THROW(SpatialGraph(c, Tensor::matrix({{1, 1}, {1, 0}})), ContractError);
    EXPECT_THROW(SpatialGraph(c, Tensor(Shape{3, 3})), DimensionError);
}

TEST(SpatialGraph, PermutationRelabelsOperator) {
    Rng rng(12);
    const auto g = SpatialGraph::diffusion(random_coords(5, rng), 1000.0);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    const auto p = g.permuted(perm);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(p.node_ids()[i], g.node_ids()[perm[i]]);
        for (std::size_t j = 0; j < 5; ++j) {
            EXPECT_NEAR(p.s_matrix().at(i, j), g.s_matrix().at(perm[i], perm[j]), 1e-15);
        }
    }
    EXPECT_NE(p.hash(), g.hash());
    EXPECT_EQ(g.hash(), SpatialGraph::diffusion(g.coords(), 1000.0).hash());
}

TEST(SpatialGraph, PermutationCarriesIndependentNodes) {
    const std::vector<Coord> c{{0, 0}, {1, 0}, {2, 0}};
    const SpatialGraph g(c, build_adjacency_threshold(c, 1.5), {}, {0});
    const std::vector<std::size_t> perm{2, 1, 0};
    const auto p = g.permuted(perm);
    ASSERT_EQ(p.independent_nodes().size(), 1u);
    EXPECT_EQ(p.independent_nodes()[0], 2u);
}

TEST(LoadGraphCsv, NodesAndEdges) {
    const auto dir = std::filesystem::temp_directory_path() / "bstnn_graph_test";
    std::filesystem::create_directories(dir);
    {
        std::ofstream n(dir / "nodes.csv");
        n << "node_id,x,y\na,0,0\nb,100,0\nc,0,100\n";
        std::ofstream e(dir / "edges.csv");
        e << "src,dst,weight\na,b,1\nb,c,0.5\n";
    }
    const auto g = load_graph_csv(dir / "nodes.csv", dir / "edges.csv", 1000.0);
    ASSERT_EQ(g.size(), 3u);
    EXPECT_EQ(g.adjacency().at(1, 0), 1.0);
    EXPECT_EQ(g.adjacency().at(2, 1), 0.5);
    EXPECT_EQ(g.adjacency().at(0, 2), 0.0);
    const auto k = load_graph_csv(dir / "nodes.csv", {}, 1000.0);
    EXPECT_NEAR(k.adjacency().at(0, 1), std::exp(-0.1), 1e-15);
    {
        std::ofstream e(dir / "bad.csv");
        e << "src,dst,weight\na,z,1\n";
    }
    EXPECT_THROW(load_graph_csv(dir / "nodes.csv", dir / "bad.csv", 1000.0), DataError);
    std::filesystem::remove_all(dir);
}
