#pragma once

// Accuracy and interval-coverage metrics.
//
// Undefined metrics (no valid points, zero target variance, fewer than two
// ensemble members) are reported as std::nullopt and serialized as null.
//
// Coverage level c names the central c-interval: PICP_90 uses the empirical
// 5% and 95% quantiles, so a calibrated ensemble gives PICP_90 near 0.90.

#include "bstnn/graph.hpp"
#include "bstnn/models.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace bstnn {

using Mask = std::span<const std::uint8_t>;

struct IntervalSpec {
    double coverage = 0.9;

    double lower() const { return 0.5 * (1.0 - coverage); }
    double upper() const { return 0.5 * (1.0 + coverage); }
    // Throws DomainError unless 0 < coverage < 1.
    void validate() const;
};

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

std::optional<double> rmse(std::span<const double> pred, std::span<const double> target, Mask mask);
std::optional<double> r2(std::span<const double> pred, std::span<const double> target, Mask mask);

// Median with the mean-of-middle-two convention for even counts.
std::optional<double> median(std::vector<double> values);

// r2 per block of `week_length` consecutive points (the first block starts at
// `offset` points into a week), undefined weeks skipped, median of the rest.
std::optional<double> weekly_median_r2(std::span<const double> pred, std::span<const double> target, Mask mask,
                                       std::size_t week_length = 168, std::size_t offset = 0);

// Mean over the defined entries.
std::optional<double> spatial_aggregate(std::span<const std::optional<double>> per_node);

// Quantile of sorted values by linear interpolation between order statistics
// at position q * (n - 1).
double empirical_quantile(std::span<const double> sorted, double q);

// Per-point empirical central intervals of an ensemble, [T, N].
std::vector<Interval> empirical_intervals(const PredictiveEnsemble& ensemble, const IntervalSpec& spec);

// mean +- z * sqrt(variance) with z the standard normal quantile of spec.upper().
std::vector<Interval> gaussian_intervals(std::span<const double> mean, std::span<const double> variance,
                                         const IntervalSpec& spec);

std::optional<double> picp(std::span<const Interval> intervals, std::span<const double> target, Mask mask);
std::optional<double> mpiw(std::span<const Interval> intervals, Mask mask);

// Ensemble forms; E < 2 is a ContractError.
double picp(const PredictiveEnsemble& ensemble, std::span<const double> target, Mask mask, const IntervalSpec& spec);
double mpiw(const PredictiveEnsemble& ensemble, Mask mask, const IntervalSpec& spec);

struct CoverageScores {
    double coverage = 0.0;
    std::optional<double> picp;
    std::optional<double> mpiw;
    std::vector<std::optional<double>> node_picp;
    std::vector<std::optional<double>> node_mpiw;
};

struct MetricReport {
    std::string model;
    std::size_t steps = 0;
    std::size_t nodes = 0;
    std::size_t members = 0;
    std::size_t valid_points = 0;
    std::optional<double> rmse;          // pooled over all valid points
    std::optional<double> r2;            // pooled
    std::optional<double> mean_rmse;     // mean of per-node RMSE
    std::optional<double> mean_r2;       // mean of per-node R^2
    std::optional<double> weekly_r2;     // mean over nodes of the weekly-median R^2
    std::vector<CoverageScores> coverage;
    std::vector<std::optional<double>> node_rmse;
    std::vector<std::optional<double>> node_r2;
    std::vector<std::size_t> node_valid;

    const CoverageScores* at_level(double c) const;
};

enum class IntervalMethod { Empirical, Gaussian };

struct EvaluationInput {
    std::span<const double> point;   // [T, N] point predictions (ensemble median)
    std::span<const double> target;  // [T, N]
    Mask mask;                       // [T, N]
    std::size_t steps = 0;
    std::size_t nodes = 0;
    std::size_t members = 0;
    std::int64_t start_hour = 0;     // for the weekly calendar
};

// Intervals per coverage level are supplied by the caller (empirical or
// Gaussian); with members < 2 coverage metrics are left undefined.
MetricReport build_report(const EvaluationInput& in, std::span<const double> levels,
                          const std::vector<std::vector<Interval>>& intervals);

// Convenience: ensemble median as point prediction with empirical intervals,
// or ensemble mean with Gaussian intervals from `variance`.
MetricReport evaluate_ensemble(const PredictiveEnsemble& ensemble, std::span<const double> target, Mask mask,
                               std::span<const double> levels, std::int64_t start_hour = 0,
                               IntervalMethod method = IntervalMethod::Empirical,
                               std::span<const double> variance = {});

nlohmann::json report_to_json(const MetricReport& report);
void write_report(const std::filesystem::path& path, const MetricReport& report);

// node,x,y,valid,rmse,r2,picp_<c>,mpiw_<c>... with empty cells for undefined.
void write_node_csv(const std::filesystem::path& path, const MetricReport& report,
                    std::span<const std::string> node_ids, std::span<const Coord> coords);

struct NodeMetricTable {
    std::vector<std::string> columns;          // metric columns (after node,x,y)
    std::vector<std::string> node_ids;
    std::vector<Coord> coords;
    std::vector<std::vector<double>> values;   // [column][node], NaN for undefined
};
NodeMetricTable read_node_csv(const std::filesystem::path& path);

std::string coverage_label(double c);

} // namespace bstnn
