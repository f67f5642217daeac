#include "bstnn/errors.hpp"
#include "bstnn/metrics.hpp"
#include "metric_examples.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace bstnn;

class WorkedExamples : public ::testing::TestWithParam<std::size_t> {};

TEST_P(WorkedExamples, Hold) {
    const auto examples = bstnn::testing::metric_examples();
    const auto& ex = examples.at(GetParam());
    EXPECT_TRUE(ex.check()) << ex.name;
}

INSTANTIATE_TEST_SUITE_P(Metrics, WorkedExamples,
                         ::testing::Range<std::size_t>(0, bstnn::testing::metric_examples().size()));

TEST(Metrics, MaskedPointsAreIgnored) {
    const std::vector<double> p{3.0, 100.0, 4.0}, y{0.0, 0.0, 0.0};
    const std::vector<std::uint8_t> m{1, 0, 1};
    EXPECT_EQ(*rmse(p, y, m), std::sqrt(12.5));
}

TEST(Metrics, UndefinedCases) {
    const std::vector<double> p{1.0, 2.0}, y{3.0, 3.0};
    const std::vector<std::uint8_t> none{0, 0}, all{1, 1};
    EXPECT_FALSE(rmse(p, y, none).has_value());
    EXPECT_FALSE(r2(p, y, all).has_value());
    EXPECT_FALSE(median({}).has_value());
    EXPECT_THROW(rmse(p, std::vector<double>{1.0}, all), DimensionError);
}

TEST(Metrics, WeeklyMedianSkipsUndefinedWeeks) {
    std::vector<double> p{1, -1, 1, -1, 5, 5, 5, 5}, y{1, -1, 1, -1, 2, 2, 2, 2};
    const std::vector<std::uint8_t> m(8, 1);
    EXPECT_EQ(*weekly_median_r2(p, y, m, 4), 1.0);
}

TEST(Metrics, WeeklyBlocksHonourOffset) {
    // With offset 2 the first block is only two points long.
    std::vector<double> y{1, -1, 1, -1, 1, -1}, p{1, -1, 0, 0, 0, 0};
    const std::vector<std::uint8_t> m(6, 1);
    EXPECT_EQ(*weekly_median_r2(p, y, m, 4, 2), 0.5); // blocks score {1, 0}
    EXPECT_EQ(*weekly_median_r2(p, y, m, 4, 0), 0.25); // blocks score {0.5, 0}
}

TEST(Quantiles, LinearInterpolation) {
    const std::vector<double> s{1.0, 2.0, 3.0, 4.0, 5.0};
    EXPECT_EQ(empirical_quantile(s, 0.0), 1.0);
    EXPECT_EQ(empirical_quantile(s, 1.0), 5.0);
    EXPECT_EQ(empirical_quantile(s, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(empirical_quantile(s, 0.05), 1.2);
    EXPECT_DOUBLE_EQ(empirical_quantile(s, 0.95), 4.8);
}

TEST(Intervals, GaussianUsesNormalQuantile) {
    const std::vector<double> mean{1.0}, var{4.0};
    const auto iv = gaussian_intervals(mean, var, {0.9});
    EXPECT_NEAR(iv[0].upper, 1.0 + 2.0 * 1.6448536269514722, 1e-12);
    EXPECT_NEAR(iv[0].lower, 1.0 - 2.0 * 1.6448536269514722, 1e-12);
    EXPECT_THROW(gaussian_intervals(mean, var, {1.0}), DomainError);
}

TEST(Intervals, PicpAndMpiwFromExplicitIntervals) {
    const std::vector<Interval> iv{{0, 2}, {0, 1}, {-1, 1}};
    const std::vector<double> y{1.0, 3.0, 1.0};
    const std::vector<std::uint8_t> m{1, 1, 1};
    EXPECT_DOUBLE_EQ(*picp(iv, y, m), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(*mpiw(iv, m), 5.0 / 3.0);
}

TEST(Intervals, SingleMemberEnsembleIsAContractError) {
    PredictiveEnsemble e;
    e.members = 1;
    e.steps = 2;
    e.nodes = 1;
    e.samples = {0.0, 1.0};
    const std::vector<double> y{0.0, 1.0};
    const std::vector<std::uint8_t> m{1, 1};
    EXPECT_THROW(picp(e, y, m, {0.9}), ContractError);
    const std::vector<double> levels{0.9};
    const auto report = evaluate_ensemble(e, y, m, levels);
    ASSERT_EQ(report.coverage.size(), 1u);
    EXPECT_FALSE(report.coverage[0].picp.has_value());
    EXPECT_TRUE(report.rmse.has_value());
    const auto j = report_to_json(report);
    EXPECT_TRUE(j.dump().find("null") != std::string::npos);
}

TEST(Report, PerNodeScoresAndCsvRoundTrip) {
    Rng rng(3);
    PredictiveEnsemble e;
    e.members = 9;
    e.steps = 50;
    e.nodes = 3;
    e.samples.resize(9 * 50 * 3);
    for (auto& v : e.samples) v = rng.normal();
    std::vector<double> y(150);
    for (auto& v : y) v = rng.normal();
    std::vector<std::uint8_t> m(150, 1);
    for (std::size_t t = 0; t < 50; ++t) m[t * 3 + 2] = 0;
    const std::vector<double> levels{0.75, 0.9};
    const auto r = evaluate_ensemble(e, y, m, levels);
    EXPECT_EQ(r.valid_points, 100u);
    EXPECT_FALSE(r.node_rmse[2].has_value());
    EXPECT_NEAR(*r.mean_rmse, 0.5 * (*r.node_rmse[0] + *r.node_rmse[1]), 1e-15);
    ASSERT_NE(r.at_level(0.9), nullptr);
    EXPECT_GE(*r.at_level(0.9)->picp, *r.at_level(0.75)->picp);
    EXPECT_GE(*r.at_level(0.9)->mpiw, *r.at_level(0.75)->mpiw);

    const auto dir = std::filesystem::temp_directory_path() / "bstnn_metrics_test";
    std::filesystem::create_directories(dir);
    const std::vector<std::string> ids{"a", "b", "c"};
    const std::vector<Coord> coords{{0, 0}, {1, 0}, {2, 0}};
    write_node_csv(dir / "nodes.csv", r, ids, coords);
    const auto table = read_node_csv(dir / "nodes.csv");
    EXPECT_EQ(table.node_ids, ids);
    std::size_t rmse_col = 0;
    while (table.columns[rmse_col] != "rmse") ++rmse_col;
    EXPECT_DOUBLE_EQ(table.values[rmse_col][0], *r.node_rmse[0]);
    EXPECT_TRUE(std::isnan(table.values[rmse_col][2]));
    std::filesystem::remove_all(dir);
    EXPECT_EQ(coverage_label(0.9), "90");
    EXPECT_EQ(coverage_label(0.75), "75");
}
