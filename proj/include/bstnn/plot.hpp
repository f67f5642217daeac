#pragma once

// SVG output: per-node metric heatmaps over the node coordinates and
// per-node time series with a shaded predictive interval.

#include "bstnn/graph.hpp"
#include "bstnn/metrics.hpp"
#include "bstnn/models.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bstnn {

// Point predictions and central intervals per (time, node), written by
// predict/evaluate and read back for plotting.
struct PredictionTable {
    std::vector<double> levels;
    std::vector<std::int64_t> time;
    std::vector<std::size_t> node;
    std::vector<double> median;
    std::vector<std::vector<double>> lower; // [level][row]
    std::vector<std::vector<double>> upper;
    std::vector<double> target;             // NaN if unknown
    std::vector<std::uint8_t> valid;
};

// Rows ordered (t, n) over [T, N] arrays; `target`/`valid` may be empty.
PredictionTable make_prediction_table(std::span<const double> median, std::span<const double> levels,
                                      const std::vector<std::vector<Interval>>& intervals, std::size_t steps,
                                      std::size_t nodes, std::int64_t start_hour, std::span<const double> target,
                                      Mask valid);
void write_predictions_csv(const std::filesystem::path& path, const PredictionTable& table);
PredictionTable read_predictions_csv(const std::filesystem::path& path);

struct HeatmapLegend {
    double min = 0.0;
    double max = 0.0;
    bool defined = false; // false when every value is NaN
};

// Color for t in [0, 1] on a blue-to-yellow ramp, as "#rrggbb".
std::string ramp_color(double t);

// One square per node at its coordinates; color scale spans the finite data
// range, printed in the legend. NaN values are drawn grey.
std::string heatmap_svg(std::span<const Coord> coords, std::span<const double> values, const std::string& title,
                        HeatmapLegend* legend = nullptr);

// Median line, shaded [lower, upper] band and observed targets as dots.
std::string timeseries_svg(std::span<const double> time, std::span<const double> median,
                           std::span<const double> lower, std::span<const double> upper,
                           std::span<const double> observed, const std::string& title);

} // namespace bstnn
