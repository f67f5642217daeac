#include "bstnn/plot.hpp"

#include "bstnn/csv.hpp"
#include "bstnn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace bstnn {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 480.0;
constexpr double kMargin = 48.0;

std::string fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string header(double w, double h) {
    return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
           fixed(w, 0) + "\" height=\"" + fixed(h, 0) + "\" viewBox=\"0 0 " + fixed(w, 0) + " " + fixed(h, 0) +
           "\">\n<rect x=\"0\" y=\"0\" width=\"" + fixed(w, 0) + "\" height=\"" + fixed(h, 0) +
           "\" fill=\"white\"/>\n";
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();

    void add(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    bool empty() const { return lo > hi; }
    double span() const { return hi > lo ? hi - lo : 1.0; }
};

} // namespace

PredictionTable make_prediction_table(std::span<const double> median, std::span<const double> levels,
                                      const std::vector<std::vector<Interval>>& intervals, std::size_t steps,
                                      std::size_t nodes, std::int64_t start_hour, std::span<const double> target,
                                      Mask valid) {
    const std::size_t rows = steps * nodes;
    if (median.size() != rows || intervals.size() != levels.size()) {
        throw DimensionError("prediction table: expected " + std::to_string(rows) + " points and one interval set per level");
    }
    for (const auto& iv : intervals) {
        if (iv.size() != rows) throw DimensionError("prediction table: interval set size mismatch");
    }
    if ((!target.empty() && target.size() != rows) || (!valid.empty() && valid.size() != rows)) {
        throw DimensionError("prediction table: target size mismatch");
    }
    PredictionTable t;
    t.levels.assign(levels.begin(), levels.end());
    t.lower.assign(levels.size(), {});
    t.upper.assign(levels.size(), {});
    for (std::size_t i = 0; i < rows; ++i) {
        t.time.push_back(start_hour + static_cast<std::int64_t>(i / nodes));
        t.node.push_back(i % nodes);
        t.median.push_back(median[i]);
        for (std::size_t k = 0; k < levels.size(); ++k) {
            t.lower[k].push_back(intervals[k][i].lower);
            t.upper[k].push_back(intervals[k][i].upper);
        }
        t.target.push_back(target.empty() ? std::nan("") : target[i]);
        t.valid.push_back(valid.empty() ? 0 : valid[i]);
    }
    return t;
}

void write_predictions_csv(const std::filesystem::path& path, const PredictionTable& t) {
    auto out = open_output(path);
    out << "time,node,median";
    for (double c : t.levels) out << ",lower_" << coverage_label(c) << ",upper_" << coverage_label(c);
    out << ",target,valid\n";
    for (std::size_t i = 0; i < t.time.size(); ++i) {
        out << t.time[i] << ',' << t.node[i] << ',' << format_double(t.median[i]);
        for (std::size_t k = 0; k < t.levels.size(); ++k) {
            out << ',' << format_double(t.lower[k][i]) << ',' << format_double(t.upper[k][i]);
        }
        out << ',' << format_double(t.target[i]) << ',' << (t.valid[i] ? 1 : 0) << '\n';
    }
}

PredictionTable read_predictions_csv(const std::filesystem::path& path) {
    CsvReader r(path);
    PredictionTable t;
    const std::size_t c_time = r.column("time"), c_node = r.column("node"), c_median = r.column("median");
    const std::size_t c_target = r.column("target"), c_valid = r.column("valid");
    std::vector<std::pair<std::size_t, std::size_t>> level_cols;
    for (const auto& h : r.header()) {
        if (h.rfind("lower_", 0) != 0) continue;
        const std::string label = h.substr(6);
        t.levels.push_back(std::stod(label) / 100.0);
        level_cols.emplace_back(r.column(h), r.column("upper_" + label));
    }
    t.lower.assign(t.levels.size(), {});
    t.upper.assign(t.levels.size(), {});
    while (r.next()) {
        t.time.push_back(r.integer(c_time));
        const long long n = r.integer(c_node);
        if (n < 0) throw DataError(path.string() + ":" + std::to_string(r.line()) + ": negative node index");
        t.node.push_back(static_cast<std::size_t>(n));
        t.median.push_back(r.number(c_median));
        for (std::size_t k = 0; k < level_cols.size(); ++k) {
            t.lower[k].push_back(r.number(level_cols[k].first));
            t.upper[k].push_back(r.number(level_cols[k].second));
        }
        t.target.push_back(r.number(c_target));
        t.valid.push_back(r.boolean(c_valid) ? 1 : 0);
    }
    return t;
}

std::string ramp_color(double t) {
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
    // Dark blue -> teal -> yellow.
    const double stops[3][3] = {{68, 1, 84}, {33, 145, 140}, {253, 231, 37}};
    const double s = t * 2.0;
    const int i = std::min(1, static_cast<int>(s));
    const double f = s - i;
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x",
                  static_cast<int>(std::lround(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]))),
                  static_cast<int>(std::lround(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]))),
                  static_cast<int>(std::lround(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]))));
    return buf;
}

std::string heatmap_svg(std::span<const Coord> coords, std::span<const double> values, const std::string& title,
                        HeatmapLegend* legend) {
    if (coords.size() != values.size()) {
        throw DimensionError("heatmap: " + std::to_string(coords.size()) + " nodes, " +
                             std::to_string(values.size()) + " values");
    }
    Range xs, ys, vs;
    for (const auto& c : coords) {
        xs.add(c.x);
        ys.add(c.y);
    }
    for (double v : values) vs.add(v);
    HeatmapLegend leg;
    if (!vs.empty()) leg = {vs.lo, vs.hi, true};
    if (legend) *legend = leg;

    // Cell size from the smallest nonzero node spacing.
    double spacing = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < coords.size(); ++i) {
        for (std::size_t j = i + 1; j < coords.size(); ++j) {
            const double d = distance(coords[i], coords[j]);
            if (d > 0.0) spacing = std::min(spacing, d);
        }
    }
    const double plot_w = kWidth - 2 * kMargin - 90.0;
    const double plot_h = kHeight - 2 * kMargin;
    const double extent = std::max(xs.empty() ? 0.0 : xs.hi - xs.lo, ys.empty() ? 0.0 : ys.hi - ys.lo);
    const double scale = extent > 0.0 ? std::min(plot_w, plot_h) / extent * 0.9 : 1.0;
    const double cell = std::isfinite(spacing) && extent > 0.0 ? std::max(2.0, spacing * scale * 0.9) : 40.0;
    const double ox = kMargin + cell / 2;
    const double oy = kMargin + cell / 2;

    std::ostringstream s;
    s << header(kWidth, kHeight);
    s << "<text x=\"" << kMargin << "\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">" << escape(title)
      << "</text>\n";
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double px = ox + (coords[i].x - (xs.empty() ? 0.0 : xs.lo)) * scale - cell / 2;
        // SVG y grows downward.
        const double py = oy + ((ys.empty() ? 0.0 : ys.hi) - coords[i].y) * scale - cell / 2;
        const double v = values[i];
        const std::string fill =
            std::isfinite(v) ? ramp_color(vs.hi > vs.lo ? (v - vs.lo) / (vs.hi - vs.lo) : 0.0) : "#bbbbbb";
        s << "<rect class=\"node\" x=\"" << fixed(px) << "\" y=\"" << fixed(py) << "\" width=\"" << fixed(cell)
          << "\" height=\"" << fixed(cell) << "\" fill=\"" << fill << "\"><title>node " << i << ": "
          << (std::isfinite(v) ? format_double(v) : std::string("undefined")) << "</title></rect>\n";
    }
    // Legend: vertical ramp with min at the bottom and max at the top.
    const double lx = kWidth - kMargin - 60.0;
    const double ly = kMargin;
    const double lh = plot_h * 0.6;
    s << "<defs><linearGradient id=\"ramp\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">";
    for (int k = 0; k <= 4; ++k) {
        s << "<stop offset=\"" << fixed(k / 4.0) << "\" stop-color=\"" << ramp_color(k / 4.0) << "\"/>";
    }
    s << "</linearGradient></defs>\n";
    s << "<rect x=\"" << fixed(lx) << "\" y=\"" << fixed(ly) << "\" width=\"16\" height=\"" << fixed(lh)
      << "\" fill=\"url(#ramp)\"/>\n";
    const std::string max_text = leg.defined ? format_double(leg.max) : "n/a";
    const std::string min_text = leg.defined ? format_double(leg.min) : "n/a";
    s << "<text class=\"legend-max\" x=\"" << fixed(lx + 20) << "\" y=\"" << fixed(ly + 10)
      << "\" font-family=\"sans-serif\" font-size=\"11\" data-value=\"" << max_text << "\">max " << max_text
      << "</text>\n";
    s << "<text class=\"legend-min\" x=\"" << fixed(lx + 20) << "\" y=\"" << fixed(ly + lh)
      << "\" font-family=\"sans-serif\" font-size=\"11\" data-value=\"" << min_text << "\">min " << min_text
      << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

std::string timeseries_svg(std::span<const double> time, std::span<const double> median,
                           std::span<const double> lower, std::span<const double> upper,
                           std::span<const double> observed, const std::string& title) {
    const std::size_t n = time.size();
    if (median.size() != n || lower.size() != n || upper.size() != n || (!observed.empty() && observed.size() != n)) {
        throw DimensionError("timeseries: series lengths differ");
    }
    Range ts, vs;
    for (std::size_t i = 0; i < n; ++i) {
        ts.add(time[i]);
        vs.add(median[i]);
        vs.add(lower[i]);
        vs.add(upper[i]);
        if (!observed.empty()) vs.add(observed[i]);
    }
    const double plot_w = kWidth - 2 * kMargin;
    const double plot_h = kHeight - 2 * kMargin;
    auto px = [&](double t) { return kMargin + (ts.empty() ? 0.0 : (t - ts.lo) / ts.span()) * plot_w; };
    auto py = [&](double v) { return kMargin + plot_h - (vs.empty() ? 0.0 : (v - vs.lo) / vs.span()) * plot_h; };

    std::ostringstream s;
    s << header(kWidth, kHeight);
    s << "<text x=\"" << kMargin << "\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">" << escape(title)
      << "</text>\n";
    s << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << plot_w << "\" height=\"" << plot_h
      << "\" fill=\"none\" stroke=\"#888888\"/>\n";
    if (n > 0) {
        s << "<polygon class=\"interval\" fill=\"#21918c\" fill-opacity=\"0.3\" stroke=\"none\" points=\"";
        for (std::size_t i = 0; i < n; ++i) s << fixed(px(time[i])) << ',' << fixed(py(upper[i])) << ' ';
        for (std::size_t i = n; i-- > 0;) s << fixed(px(time[i])) << ',' << fixed(py(lower[i])) << ' ';
        s << "\"/>\n<polyline class=\"median\" fill=\"none\" stroke=\"#440154\" stroke-width=\"1.2\" points=\"";
        for (std::size_t i = 0; i < n; ++i) s << fixed(px(time[i])) << ',' << fixed(py(median[i])) << ' ';
        s << "\"/>\n";
    }
    for (std::size_t i = 0; i < observed.size(); ++i) {
        if (!std::isfinite(observed[i])) continue;
        s << "<circle class=\"observed\" cx=\"" << fixed(px(time[i])) << "\" cy=\"" << fixed(py(observed[i]))
          << "\" r=\"2\" fill=\"#d62728\"/>\n";
    }
    if (!vs.empty()) {
        s << "<text x=\"4\" y=\"" << fixed(kMargin + 4) << "\" font-family=\"sans-serif\" font-size=\"10\">"
          << fixed(vs.hi) << "</text>\n";
        s << "<text x=\"4\" y=\"" << fixed(kMargin + plot_h) << "\" font-family=\"sans-serif\" font-size=\"10\">"
          << fixed(vs.lo) << "</text>\n";
    }
    if (!ts.empty()) {
        s << "<text x=\"" << kMargin << "\" y=\"" << fixed(kHeight - 20)
          << "\" font-family=\"sans-serif\" font-size=\"10\">hour " << fixed(ts.lo, 0) << "</text>\n";
        s << "<text x=\"" << fixed(kWidth - kMargin - 60) << "\" y=\"" << fixed(kHeight - 20)
          << "\" font-family=\"sans-serif\" font-size=\"10\">hour " << fixed(ts.hi, 0) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

} // namespace bstnn
