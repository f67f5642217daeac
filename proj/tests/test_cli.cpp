#include "bstnn/checkpoint.hpp"
#include "bstnn/cli.hpp"
#include "bstnn/csv.hpp"
#include "bstnn/metrics.hpp"
#include "bstnn/training.hpp"

#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace bstnn;
namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

CliResult run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t data_rows(const fs::path& p) {
    const std::string s = slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')) - 1;
}

void collect(const pt::ptree& node, const std::string& name, std::vector<pt::ptree>& out) {
    for (const auto& [key, child] : node) {
        if (key == name) out.push_back(child);
        collect(child, name, out);
    }
}

pt::ptree parse_svg(const fs::path& p) {
    pt::ptree tree;
    pt::read_xml(p.string(), tree);
    return tree;
}

std::vector<std::string> node_fills(const pt::ptree& svg) {
    std::vector<pt::ptree> rects;
    collect(svg, "rect", rects);
    std::vector<std::string> fills;
    for (const auto& r : rects) {
        if (r.get<std::string>("<xmlattr>.class", "") == "node") fills.push_back(r.get<std::string>("<xmlattr>.fill"));
    }
    return fills;
}

double legend_value(const pt::ptree& svg, const std::string& cls) {
    std::vector<pt::ptree> texts;
    collect(svg, "text", texts);
    for (const auto& t : texts) {
        if (t.get<std::string>("<xmlattr>.class", "") == cls) return t.get<double>("<xmlattr>.data-value");
    }
    ADD_FAILURE() << "no legend text " << cls;
    return std::nan("");
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

// A small world: 4 nodes, three 4-week "years".
class CliPipeline : public ::testing::Test {
protected:
    static fs::path root;

    static void SetUpTestSuite() {
        root = fs::temp_directory_path() / "bstnn_cli_test";
        fs::remove_all(root);
        fs::create_directories(root);
        ASSERT_EQ(run({"simulate", "--out", (root / "data").string(), "--nodes", "4", "--hours", "2016", "--seed", "3",
                       "--mask-rate", "0.2"})
                      .code,
                  0);
        const auto r = run({"train", "--data", (root / "data").string(), "--mode", "BTNN", "--out",
                            (root / "btnn").string(), "--epochs", "2", "--max-windows", "64", "--weeks-per-year", "4"});
        ASSERT_EQ(r.code, 0) << r.err;
    }

    static void TearDownTestSuite() { fs::remove_all(root); }

    static std::string data() { return (root / "data").string(); }
    static std::string btnn() { return (root / "btnn" / "model.ckpt").string(); }
};

fs::path CliPipeline::root;

} // namespace

TEST_F(CliPipeline, SimulateWritesConsistentFiles) {
    for (const char* f : {"nodes.csv", "features.csv", "targets.csv", "manifest.json"}) {
        EXPECT_TRUE(fs::exists(root / "data" / f)) << f;
    }
    const auto manifest = nlohmann::json::parse(slurp(root / "data" / "manifest.json"));
    EXPECT_EQ(manifest["rows"]["nodes"].get<std::size_t>(), data_rows(root / "data" / "nodes.csv"));
    EXPECT_EQ(manifest["rows"]["features"].get<std::size_t>(), data_rows(root / "data" / "features.csv"));
    EXPECT_EQ(manifest["rows"]["targets"].get<std::size_t>(), data_rows(root / "data" / "targets.csv"));
    EXPECT_EQ(manifest["rows"]["targets"].get<std::size_t>(), 4u * 2016u);
}

TEST_F(CliPipeline, FullMaskRateMarksEveryTargetValid) {
    const fs::path dir = root / "dense";
    ASSERT_EQ(run({"simulate", "--out", dir.string(), "--nodes", "2", "--hours", "100", "--mask-rate", "1"}).code, 0);
    CsvReader csv(dir / "targets.csv");
    const std::size_t col = csv.column("valid");
    std::size_t rows = 0;
    while (csv.next()) {
        EXPECT_TRUE(csv.boolean(col));
        ++rows;
    }
    EXPECT_EQ(rows, 200u);
}

TEST_F(CliPipeline, SimulateIsByteReproducible) {
    const fs::path dir = root / "again";
    ASSERT_EQ(run({"simulate", "--out", dir.string(), "--nodes", "4", "--hours", "2016", "--seed", "3", "--mask-rate",
                   "0.2"})
                  .code,
              0);
    for (const char* f : {"nodes.csv", "features.csv", "targets.csv", "manifest.json"}) {
        EXPECT_EQ(slurp(dir / f), slurp(root / "data" / f)) << f;
    }
}

TEST_F(CliPipeline, TrainWritesCheckpointAndHistory) {
    EXPECT_TRUE(fs::exists(btnn()));
    EXPECT_EQ(data_rows(root / "btnn" / "history.csv"), 2u);
    EXPECT_TRUE(fs::exists(root / "btnn" / "train.log"));
    const auto ckpt = load_checkpoint(btnn());
    EXPECT_EQ(kind_of(ckpt.trained.model), ModelKind::BTNN);
}

TEST_F(CliPipeline, FineTuningWithoutSourceNamesTheMissingCheckpoint) {
    const auto r = run({"train", "--data", data(), "--mode", "FT", "--out", (root / "ft").string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("--from"), std::string::npos);
    EXPECT_NE(r.err.find("checkpoint"), std::string::npos);
    EXPECT_FALSE(fs::exists(root / "ft" / "model.ckpt"));
}

TEST_F(CliPipeline, PretrainingKeepsTemporalWeights) {
    const auto r = run({"train", "--data", data(), "--mode", "PT", "--from", btnn(), "--out", (root / "pt").string(),
                        "--epochs", "1", "--max-windows", "32", "--weeks-per-year", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto before = load_checkpoint(btnn());
    const auto after = load_checkpoint(root / "pt" / "model.ckpt");
    EXPECT_EQ(kind_of(after.trained.model), ModelKind::BSTNN);
    EXPECT_EQ(parameter_hash(after.trained.model, ParameterGroup::Temporal),
              parameter_hash(before.trained.model, ParameterGroup::Temporal));
}

TEST_F(CliPipeline, EvaluateGivesFiniteMetricsAndValidCoverage) {
    const fs::path ev = root / "eval_train";
    const auto r = run({"evaluate", "--data", data(), "--from", btnn(), "--out", ev.string(), "--ensemble", "5",
                        "--begin", "0", "--end", "672"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = nlohmann::json::parse(slurp(ev / "report.json"));
    EXPECT_TRUE(std::isfinite(report["rmse"].get<double>()));
    EXPECT_TRUE(std::isfinite(report["r2"].get<double>()));
    for (const auto& [label, c] : report["coverage"].items()) {
        const double p = c["picp"].get<double>();
        EXPECT_GE(p, 0.0) << label;
        EXPECT_LE(p, 1.0) << label;
        EXPECT_GE(c["mpiw"].get<double>(), 0.0);
    }
    EXPECT_EQ(data_rows(ev / "predictions.csv"), 672u * 4u);
    EXPECT_EQ(data_rows(ev / "nodes.csv"), 4u);
}

TEST_F(CliPipeline, SingleMemberLeavesCoverageUndefined) {
    const fs::path ev = root / "eval_single";
    ASSERT_EQ(run({"evaluate", "--data", data(), "--from", btnn(), "--out", ev.string(), "--ensemble", "1"}).code, 0);
    const auto report = nlohmann::json::parse(slurp(ev / "report.json"));
    for (const auto& [label, c] : report["coverage"].items()) {
        EXPECT_TRUE(c["picp"].is_null()) << label;
        EXPECT_TRUE(c["mpiw"].is_null()) << label;
    }
    EXPECT_FALSE(report["rmse"].is_null());
}

TEST_F(CliPipeline, RepeatedEvaluationIsByteIdentical) {
    for (const char* name : {"eval_a", "eval_b"}) {
        ASSERT_EQ(run({"evaluate", "--data", data(), "--from", btnn(), "--out", (root / name).string(), "--ensemble",
                       "4", "--seed", "9", "--workers", name[5] == 'a' ? "1" : "3"})
                      .code,
                  0);
    }
    for (const char* f : {"report.json", "nodes.csv", "predictions.csv"}) {
        EXPECT_EQ(slurp(root / "eval_a" / f), slurp(root / "eval_b" / f)) << f;
    }
}

TEST_F(CliPipeline, PredictWritesIntervals) {
    const fs::path out = root / "pred";
    ASSERT_EQ(run({"predict", "--data", data(), "--from", btnn(), "--out", out.string(), "--ensemble", "3", "--begin",
                   "100", "--end", "110"})
                  .code,
              0);
    CsvReader csv(out / "predictions.csv");
    const auto lo = csv.column("lower_90"), hi = csv.column("upper_90"), med = csv.column("median");
    std::size_t rows = 0;
    while (csv.next()) {
        EXPECT_LE(csv.number(lo), csv.number(med));
        EXPECT_LE(csv.number(med), csv.number(hi));
        ++rows;
    }
    EXPECT_EQ(rows, 40u);
}

TEST_F(CliPipeline, PlotHeatmapLegendMatchesNodeExtremes) {
    const fs::path ev = root / "eval_plot";
    ASSERT_EQ(run({"evaluate", "--data", data(), "--from", btnn(), "--out", ev.string(), "--ensemble", "3"}).code, 0);
    const auto r = run({"plot", "--report", ev.string(), "--node", "0", "--node", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto table = read_node_csv(ev / "nodes.csv");
    for (const std::string metric : {std::string("rmse"), std::string("r2"), std::string("picp_90"),
                                     std::string("mpiw_90")}) {
        const auto svg = parse_svg(ev / ("heatmap_" + metric + ".svg"));
        EXPECT_EQ(node_fills(svg).size(), 4u);
        const auto col = std::find(table.columns.begin(), table.columns.end(), metric) - table.columns.begin();
        const auto& v = table.values[static_cast<std::size_t>(col)];
        EXPECT_EQ(legend_value(svg, "legend-min"), *std::min_element(v.begin(), v.end())) << metric;
        EXPECT_EQ(legend_value(svg, "legend-max"), *std::max_element(v.begin(), v.end())) << metric;
    }
    EXPECT_NO_THROW(parse_svg(ev / "timeseries_node_0.svg"));
    EXPECT_NO_THROW(parse_svg(ev / "timeseries_node_2.svg"));
}

TEST(CliPlot, SingleNodeHeatmapIsValidXml) {
    const fs::path dir = fs::temp_directory_path() / "bstnn_plot_one";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_text(dir / "nodes.csv", "node,x,y,valid,rmse,r2,picp_90,mpiw_90\nsolo,10,20,5,0.5,0.8,0.9,1.2\n");
    ASSERT_EQ(run({"plot", "--report", dir.string()}).code, 0);
    const auto svg = parse_svg(dir / "heatmap_rmse.svg");
    EXPECT_EQ(node_fills(svg).size(), 1u);
    fs::remove_all(dir);
}

TEST(CliPlot, ConstantMetricGivesUniformColour) {
    const fs::path dir = fs::temp_directory_path() / "bstnn_plot_const";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_text(dir / "nodes.csv",
               "node,x,y,valid,rmse,r2\na,0,0,5,0.7,0.1\nb,1000,0,5,0.7,0.5\nc,0,1000,5,0.7,0.9\n");
    ASSERT_EQ(run({"plot", "--report", dir.string()}).code, 0);
    const auto fills = node_fills(parse_svg(dir / "heatmap_rmse.svg"));
    ASSERT_EQ(fills.size(), 3u);
    EXPECT_EQ(std::set<std::string>(fills.begin(), fills.end()).size(), 1u);
    const auto varied = node_fills(parse_svg(dir / "heatmap_r2.svg"));
    EXPECT_EQ(std::set<std::string>(varied.begin(), varied.end()).size(), 3u);
    fs::remove_all(dir);
}

TEST(CliErrors, ExitCodes) {
    EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(run({}).code, kExitUsage);
    EXPECT_EQ(run({"train", "--mode", "BTNN"}).code, kExitUsage);
    EXPECT_EQ(run({"--help"}).code, kExitOk);
    const fs::path missing = fs::temp_directory_path() / "bstnn_no_such_dir";
    EXPECT_EQ(run({"train", "--data", missing.string()}).code, kExitData);
    EXPECT_EQ(run({"train", "--data", missing.string(), "--mode", "nonsense"}).code, kExitUsage);
    EXPECT_EQ(run({"simulate", "--out", (missing / "x").string(), "--nodes", "0"}).code, kExitUsage);
    EXPECT_EQ(run({"plot", "--report", missing.string()}).code, kExitData);
}
