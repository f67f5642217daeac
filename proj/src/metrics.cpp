#include "bstnn/metrics.hpp"

#include "bstnn/csv.hpp"
#include "bstnn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <boost/math/distributions/normal.hpp>

namespace bstnn {

namespace {

void require_sizes(std::size_t pred, std::size_t target, std::size_t mask, const char* what) {
    if (pred != target || pred != mask) {
        throw DimensionError(std::string(what) + ": " + std::to_string(pred) + " predictions, " +
                             std::to_string(target) + " targets, " + std::to_string(mask) + " mask entries");
    }
}

nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json optional_array(const std::vector<std::optional<double>>& v) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& x : v) out.push_back(optional_json(x));
    return out;
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

// Gathers column n of a [T, N] array.
template <typename T>
std::vector<T> node_series(std::span<const T> values, std::size_t steps, std::size_t nodes, std::size_t n) {
    std::vector<T> out(steps);
    for (std::size_t t = 0; t < steps; ++t) out[t] = values[t * nodes + n];
    return out;
}

} // namespace

void IntervalSpec::validate() const {
    if (!(coverage > 0.0 && coverage < 1.0)) {
        throw DomainError("coverage level must lie in (0, 1), got " + std::to_string(coverage));
    }
}

std::optional<double> rmse(std::span<const double> pred, std::span<const double> target, Mask mask) {
    require_sizes(pred.size(), target.size(), mask.size(), "rmse");
    double sse = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        const double r = pred[i] - target[i];
        sse += r * r;
        ++count;
    }
    if (count == 0) return std::nullopt;
    return std::sqrt(sse / static_cast<double>(count));
}

std::optional<double> r2(std::span<const double> pred, std::span<const double> target, Mask mask) {
    require_sizes(pred.size(), target.size(), mask.size(), "r2");
    double mean = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (!mask[i]) continue;
        mean += target[i];
        ++count;
    }
    if (count < 2) return std::nullopt;
    mean /= static_cast<double>(count);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (!mask[i]) continue;
        ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
        ss_tot += (target[i] - mean) * (target[i] - mean);
    }
    if (!(ss_tot > 0.0)) return std::nullopt;
    return 1.0 - ss_res / ss_tot;
}

std::optional<double> median(std::vector<double> values) {
    if (values.empty()) return std::nullopt;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::optional<double> weekly_median_r2(std::span<const double> pred, std::span<const double> target, Mask mask,
                                       std::size_t week_length, std::size_t offset) {
    require_sizes(pred.size(), target.size(), mask.size(), "weekly_median_r2");
    if (week_length == 0) throw ContractError("weekly_median_r2: week length must be positive");
    offset %= week_length;
    std::vector<double> weekly;
    std::size_t begin = 0;
    while (begin < pred.size()) {
        const std::size_t len = std::min(pred.size() - begin, week_length - (begin == 0 ? offset : 0));
        if (auto s = r2(pred.subspan(begin, len), target.subspan(begin, len), mask.subspan(begin, len))) {
            weekly.push_back(*s);
        }
        begin += len;
    }
    return median(std::move(weekly));
}

std::optional<double> spatial_aggregate(std::span<const std::optional<double>> per_node) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& v : per_node) {
        if (!v) continue;
        total += *v;
        ++count;
    }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
}

double empirical_quantile(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw ContractError("empirical_quantile: no values");
    if (!(q >= 0.0 && q <= 1.0)) throw DomainError("empirical_quantile: q must lie in [0, 1]");
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

std::vector<Interval> empirical_intervals(const PredictiveEnsemble& ensemble, const IntervalSpec& spec) {
    spec.validate();
    ensemble.validate();
    if (ensemble.members < 2) throw ContractError("empirical intervals need at least two ensemble members");
    std::vector<Interval> out(ensemble.steps * ensemble.nodes);
    for (std::size_t t = 0; t < ensemble.steps; ++t) {
        for (std::size_t n = 0; n < ensemble.nodes; ++n) {
            std::vector<double> v = ensemble.at(t, n);
            std::sort(v.begin(), v.end());
            out[t * ensemble.nodes + n] = {empirical_quantile(v, spec.lower()), empirical_quantile(v, spec.upper())};
        }
    }
    return out;
}

std::vector<Interval> gaussian_intervals(std::span<const double> mean, std::span<const double> variance,
                                         const IntervalSpec& spec) {
    spec.validate();
    if (mean.size() != variance.size()) throw DimensionError("gaussian_intervals: mean and variance sizes differ");
    const double z = boost::math::quantile(boost::math::normal_distribution<double>(), spec.upper());
    std::vector<Interval> out(mean.size());
    for (std::size_t i = 0; i < mean.size(); ++i) {
        if (variance[i] < 0.0) throw DomainError("gaussian_intervals: negative variance");
        const double half = z * std::sqrt(variance[i]);
        out[i] = {mean[i] - half, mean[i] + half};
    }
    return out;
}

std::optional<double> picp(std::span<const Interval> intervals, std::span<const double> target, Mask mask) {
    require_sizes(intervals.size(), target.size(), mask.size(), "picp");
    std::size_t inside = 0, count = 0;
    for (std::size_t i = 0; i < intervals.size(); ++i) {
        if (!mask[i]) continue;
        ++count;
        if (intervals[i].lower <= target[i] && target[i] <= intervals[i].upper) ++inside;
    }
    if (count == 0) return std::nullopt;
    return static_cast<double>(inside) / static_cast<double>(count);
}

std::optional<double> mpiw(std::span<const Interval> intervals, Mask mask) {
    require_sizes(intervals.size(), mask.size(), mask.size(), "mpiw");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < intervals.size(); ++i) {
        if (!mask[i]) continue;
        total += intervals[i].upper - intervals[i].lower;
        ++count;
    }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
}

double picp(const PredictiveEnsemble& ensemble, std::span<const double> target, Mask mask, const IntervalSpec& spec) {
    const auto v = picp(empirical_intervals(ensemble, spec), target, mask);
    if (!v) throw ContractError("picp: no valid targets");
    return *v;
}

double mpiw(const PredictiveEnsemble& ensemble, Mask mask, const IntervalSpec& spec) {
    const auto v = mpiw(empirical_intervals(ensemble, spec), mask);
    if (!v) throw ContractError("mpiw: no valid targets");
    return *v;
}

const CoverageScores* MetricReport::at_level(double c) const {
    for (const auto& s : coverage) {
        if (std::abs(s.coverage - c) < 1e-12) return &s;
    }
    return nullptr;
}

MetricReport build_report(const EvaluationInput& in, std::span<const double> levels,
                          const std::vector<std::vector<Interval>>& intervals) {
    const std::size_t total = in.steps * in.nodes;
    require_sizes(in.point.size(), in.target.size(), in.mask.size(), "build_report");
    if (in.point.size() != total) throw DimensionError("build_report: arrays do not match steps x nodes");
    const bool with_intervals = in.members >= 2;
    if (with_intervals && intervals.size() != levels.size()) {
        throw DimensionError("build_report: one interval set per coverage level required");
    }

    MetricReport rep;
    rep.steps = in.steps;
    rep.nodes = in.nodes;
    rep.members = in.members;
    rep.valid_points = static_cast<std::size_t>(std::count_if(in.mask.begin(), in.mask.end(), [](auto v) { return v != 0; }));
    rep.rmse = rmse(in.point, in.target, in.mask);
    rep.r2 = r2(in.point, in.target, in.mask);

    const std::size_t week_offset = static_cast<std::size_t>(((in.start_hour % 168) + 168) % 168);
    std::vector<std::optional<double>> weekly(in.nodes);
    rep.node_rmse.resize(in.nodes);
    rep.node_r2.resize(in.nodes);
    rep.node_valid.resize(in.nodes);
    for (std::size_t n = 0; n < in.nodes; ++n) {
        const auto p = node_series(in.point, in.steps, in.nodes, n);
        const auto y = node_series(in.target, in.steps, in.nodes, n);
        const auto m = node_series(in.mask, in.steps, in.nodes, n);
        rep.node_rmse[n] = rmse(p, y, m);
        rep.node_r2[n] = r2(p, y, m);
        rep.node_valid[n] = static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
        weekly[n] = weekly_median_r2(p, y, m, 168, week_offset);
    }
    rep.mean_rmse = spatial_aggregate(rep.node_rmse);
    rep.mean_r2 = spatial_aggregate(rep.node_r2);
    rep.weekly_r2 = spatial_aggregate(weekly);

    for (std::size_t l = 0; l < levels.size(); ++l) {
        IntervalSpec{levels[l]}.validate();
        CoverageScores cs;
        cs.coverage = levels[l];
        cs.node_picp.resize(in.nodes);
        cs.node_mpiw.resize(in.nodes);
        if (with_intervals) {
            const auto& iv = intervals[l];
            if (iv.size() != total) throw DimensionError("build_report: interval count does not match steps x nodes");
            cs.picp = picp(iv, in.target, in.mask);
            cs.mpiw = mpiw(iv, in.mask);
            for (std::size_t n = 0; n < in.nodes; ++n) {
                const auto ivn = node_series<Interval>(iv, in.steps, in.nodes, n);
                const auto y = node_series(in.target, in.steps, in.nodes, n);
                const auto m = node_series(in.mask, in.steps, in.nodes, n);
                cs.node_picp[n] = picp(ivn, y, m);
                cs.node_mpiw[n] = mpiw(ivn, m);
            }
        }
        rep.coverage.push_back(std::move(cs));
    }
    return rep;
}

MetricReport evaluate_ensemble(const PredictiveEnsemble& ensemble, std::span<const double> target, Mask mask,
                               std::span<const double> levels, std::int64_t start_hour, IntervalMethod method,
                               std::span<const double> variance) {
    ensemble.validate();
    // Gaussian intervals are centred on the ensemble mean, which is then also
    // the point prediction; otherwise the median is.
    std::vector<double> point;
    if (method == IntervalMethod::Gaussian) {
        const std::size_t n = ensemble.steps * ensemble.nodes;
        if (variance.size() != n) {
            throw DimensionError("evaluate_ensemble: Gaussian intervals need one variance per point");
        }
        point.assign(n, 0.0);
        for (std::size_t e = 0; e < ensemble.members; ++e) {
            for (std::size_t i = 0; i < n; ++i) point[i] += ensemble.samples[e * n + i];
        }
        for (double& m : point) m /= static_cast<double>(ensemble.members);
    } else {
        point = ensemble.median();
    }
    std::vector<std::vector<Interval>> intervals;
    if (ensemble.members >= 2) {
        for (double c : levels) {
            const IntervalSpec spec{c};
            intervals.push_back(method == IntervalMethod::Gaussian ? gaussian_intervals(point, variance, spec)
                                                                   : empirical_intervals(ensemble, spec));
        }
    }
    EvaluationInput in{point, target, mask, ensemble.steps, ensemble.nodes, ensemble.members, start_hour};
    return build_report(in, levels, intervals);
}

std::string coverage_label(double c) {
    const double pct = c * 100.0;
    if (std::abs(pct - std::round(pct)) < 1e-9) return std::to_string(static_cast<long>(std::round(pct)));
    return format_double(pct);
}

nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::json cov = nlohmann::json::object();
    for (const auto& c : r.coverage) {
        cov[coverage_label(c.coverage)] = {
            {"level", c.coverage},
            {"picp", optional_json(c.picp)},
            {"mpiw", optional_json(c.mpiw)},
        };
    }
    return {
        {"model", r.model},
        {"steps", r.steps},
        {"nodes", r.nodes},
        {"ensemble_size", r.members},
        {"valid_points", r.valid_points},
        {"rmse", optional_json(r.rmse)},
        {"r2", optional_json(r.r2)},
        {"mean_node_rmse", optional_json(r.mean_rmse)},
        {"mean_node_r2", optional_json(r.mean_r2)},
        {"mean_weekly_median_r2", optional_json(r.weekly_r2)},
        {"coverage", cov},
        {"node_rmse", optional_array(r.node_rmse)},
        {"node_r2", optional_array(r.node_r2)},
    };
}

void write_report(const std::filesystem::path& path, const MetricReport& report) {
    auto out = open_output(path);
    out << report_to_json(report).dump(2) << '\n';
}

void write_node_csv(const std::filesystem::path& path, const MetricReport& r, std::span<const std::string> node_ids,
                    std::span<const Coord> coords) {
    if (node_ids.size() != r.nodes || coords.size() != r.nodes) {
        throw DimensionError("write_node_csv: node ids / coordinates do not match the report");
    }
    auto out = open_output(path);
    out << "node,x,y,valid,rmse,r2";
    for (const auto& c : r.coverage) out << ",picp_" << coverage_label(c.coverage) << ",mpiw_" << coverage_label(c.coverage);
    out << '\n';
    for (std::size_t n = 0; n < r.nodes; ++n) {
        out << node_ids[n] << ',' << format_double(coords[n].x) << ',' << format_double(coords[n].y) << ','
            << r.node_valid[n] << ',' << optional_cell(r.node_rmse[n]) << ',' << optional_cell(r.node_r2[n]);
        for (const auto& c : r.coverage) out << ',' << optional_cell(c.node_picp[n]) << ',' << optional_cell(c.node_mpiw[n]);
        out << '\n';
    }
}

NodeMetricTable read_node_csv(const std::filesystem::path& path) {
    CsvReader r(path);
    const std::size_t c_node = r.column("node"), c_x = r.column("x"), c_y = r.column("y");
    NodeMetricTable table;
    std::vector<std::size_t> metric_cols;
    for (std::size_t i = 0; i < r.header().size(); ++i) {
        if (i == c_node || i == c_x || i == c_y) continue;
        metric_cols.push_back(i);
        table.columns.push_back(r.header()[i]);
    }
    table.values.resize(metric_cols.size());
    while (r.next()) {
        table.node_ids.push_back(r.text(c_node));
        const double x = r.number(c_x), y = r.number(c_y);
        if (!std::isfinite(x) || !std::isfinite(y)) {
            throw DataError(path.string() + ":" + std::to_string(r.line()) + ": node coordinates must be finite");
        }
        table.coords.push_back({x, y});
        for (std::size_t k = 0; k < metric_cols.size(); ++k) table.values[k].push_back(r.number(metric_cols[k]));
    }
    if (table.node_ids.empty()) throw DataError(path.string() + ": no node rows");
    return table;
}

} // namespace bstnn
