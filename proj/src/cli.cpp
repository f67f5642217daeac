#include "bstnn/cli.hpp"

#include "bstnn/checkpoint.hpp"
#include "bstnn/csv.hpp"
#include "bstnn/dataset_io.hpp"
#include "bstnn/errors.hpp"
#include "bstnn/metrics.hpp"
#include "bstnn/plot.hpp"
#include "bstnn/synthdata.hpp"
#include "bstnn/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <thread>

namespace bstnn {

namespace fs = std::filesystem;

namespace {

struct SimulateArgs {
    SyntheticConfig cfg;
    std::string out = "data";
};

struct TrainArgs {
    std::string data;
    std::string mode = "BTNN";
    std::string from;
    std::string out = "run";
    TrainingConfig cfg;
    bool no_sharpening = false;
    bool quiet = false;
};

struct PredictArgs {
    std::string data;
    std::string from;
    std::string out = "eval";
    std::size_t ensemble = 11;
    std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<double> levels{0.75, 0.90};
    std::uint64_t seed = 1;
    long long begin = -1;
    long long end = -1;
    bool dense_truth = false;
    bool paper_verbatim_variance = false;
};

struct PlotArgs {
    std::string report = "eval";
    std::string out;
    std::vector<std::size_t> nodes{0};
    double level = 0.90;
};

void add_config(CLI::App* sub) {
    sub->set_config("--config", "", "Key = value file with option defaults");
}

void check_finite_model(const AnyModel& model) {
    auto check = [](const Tensor& t, const std::string& what) {
        for (double v : t.data()) {
            if (!std::isfinite(v)) throw NumericError("non-finite value in trained parameter " + what);
        }
    };
    if (const auto* m = std::get_if<BTNNModel>(&model)) {
        for (const auto* p : m->parameters()) check(p->mu, p->name);
    } else if (const auto* m = std::get_if<BSTNNModel>(&model)) {
        for (const auto* p : m->parameters()) check(p->mu, p->name);
    } else {
        for (const auto* t : std::get<CompBNNModel>(model).tensors()) check(*t, "of the comparison model");
    }
}

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
    const SpatioTemporalDataset ds = simulate(a.cfg);
    const nlohmann::json gen{{"kind", "synthetic"},
                             {"seed", a.cfg.seed},
                             {"mask_rate", a.cfg.mask_rate},
                             {"hours", a.cfg.hours},
                             {"cloud_blobs", a.cfg.cloud_blobs}};
    write_dataset(a.out, ds, gen);
    const double frac = static_cast<double>(ds.valid_count()) / static_cast<double>(ds.steps * ds.nodes);
    out << "simulated " << ds.nodes << " nodes x " << ds.steps << " hours x " << ds.channels
        << " channels, valid fraction " << std::fixed << std::setprecision(4) << frac << " -> " << a.out << '\n';
    return kExitOk;
}

int cmd_train(TrainArgs a, std::ostream& out) {
    a.cfg.mode = regime_from_string(a.mode);
    if (a.no_sharpening) a.cfg.sharpening = false;
    if ((a.cfg.mode == Regime::PT || a.cfg.mode == Regime::FT) && a.from.empty()) {
        const char* need = a.cfg.mode == Regime::PT ? "a BTNN checkpoint" : "a PT checkpoint";
        throw ContractError("train --mode " + a.mode + " needs " + need + " via --from (missing checkpoint)");
    }
    const SpatioTemporalDataset ds = read_dataset(a.data);
    std::optional<Checkpoint> from;
    if (!a.from.empty()) {
        if (!fs::exists(a.from)) throw DataError("checkpoint not found: " + a.from);
        from = load_checkpoint(a.from);
    }
    const DatasetSplit split = split_weekly(ds, a.cfg.test_year, a.cfg.val_fraction, a.cfg.seed, a.cfg.weeks_per_year);
    ensure_directory(a.out);
    std::ofstream log(fs::path(a.out) / "train.log");
    if (!log) throw DataError("cannot write " + (fs::path(a.out) / "train.log").string());
    const TrainingResult res = train(a.cfg, ds, split, from ? &from->trained : nullptr, &log);
    check_finite_model(res.trained.model);
    TrainingConfig saved = a.cfg;
    saved.arch.features = ds.channels;
    save_checkpoint(fs::path(a.out) / "model.ckpt", res.trained, saved);
    write_history_csv(fs::path(a.out) / "history.csv", res.history);
    out << "trained " << to_string(a.cfg.mode) << " for " << res.history.size() << " epochs (best " << res.best_epoch
        << ") -> " << (fs::path(a.out) / "model.ckpt").string() << '\n';
    return kExitOk;
}

struct Prediction {
    Checkpoint cp;
    SpatioTemporalDataset ds;
    std::size_t begin = 0;
    std::size_t end = 0;
    PredictiveEnsemble ens;
    std::vector<double> point;
    std::vector<double> variance; // compBNN only
    std::vector<std::vector<Interval>> intervals;
};

Prediction run_prediction(const PredictArgs& a) {
    if (a.ensemble == 0) throw ContractError("--ensemble must be at least 1");
    for (double c : a.levels) IntervalSpec{c}.validate();
    if (!fs::exists(a.from)) throw DataError("checkpoint not found: " + a.from);
    Prediction p;
    p.cp = load_checkpoint(a.from);
    p.ds = read_dataset(a.data);
    const TrainingConfig& cfg = p.cp.config;
    if (a.begin >= 0 || a.end >= 0) {
        p.begin = a.begin >= 0 ? static_cast<std::size_t>(a.begin) : 0;
        p.end = a.end >= 0 ? static_cast<std::size_t>(a.end) : p.ds.steps;
    } else {
        try {
            const DatasetSplit split = split_weekly(p.ds, cfg.test_year, cfg.val_fraction, cfg.seed, cfg.weeks_per_year);
            p.begin = split.test_begin();
            p.end = split.test_end();
        } catch (const ContractError&) {
            p.begin = 0;
            p.end = p.ds.steps;
        }
    }
    ForecastOptions opts;
    opts.members = a.ensemble;
    opts.seed = a.seed;
    opts.workers = a.workers;
    opts.window = cfg.window;
    opts.horizon = cfg.horizon;
    p.ens = forecast(p.cp.trained, p.ds, p.begin, p.end, opts);
    for (double v : p.ens.samples) {
        if (!std::isfinite(v)) throw NumericError("non-finite prediction in the ensemble");
    }
    const bool gaussian = kind_of(p.cp.trained.model) == ModelKind::CompBNN;
    if (gaussian) {
        const VarianceMode mode = a.paper_verbatim_variance ? VarianceMode::PaperVerbatim : VarianceMode::MeanVariance;
        p.variance = compbnn_total_variance(p.ens, mode);
        p.point.assign(p.ens.steps * p.ens.nodes, 0.0);
        for (std::size_t e = 0; e < p.ens.members; ++e) {
            for (std::size_t i = 0; i < p.point.size(); ++i) p.point[i] += p.ens.samples[e * p.point.size() + i];
        }
        for (double& v : p.point) v /= static_cast<double>(p.ens.members);
        for (double c : a.levels) p.intervals.push_back(gaussian_intervals(p.point, p.variance, IntervalSpec{c}));
    } else {
        p.point = p.ens.median();
        for (double c : a.levels) {
            if (p.ens.members >= 2) {
                p.intervals.push_back(empirical_intervals(p.ens, IntervalSpec{c}));
            } else {
                p.intervals.emplace_back(p.point.size(), Interval{std::nan(""), std::nan("")});
            }
        }
    }
    return p;
}

// Targets and mask over [begin, end).
void span_truth(const Prediction& p, bool dense, std::vector<double>& target, std::vector<std::uint8_t>& mask) {
    const std::size_t n = p.ds.nodes;
    target.assign(p.ds.targets.begin() + static_cast<std::ptrdiff_t>(p.begin * n),
                  p.ds.targets.begin() + static_cast<std::ptrdiff_t>(p.end * n));
    mask.resize(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
        mask[i] = dense ? std::isfinite(target[i]) : p.ds.valid[p.begin * n + i];
    }
}

int cmd_predict(const PredictArgs& a, std::ostream& out) {
    const Prediction p = run_prediction(a);
    std::vector<double> target;
    std::vector<std::uint8_t> mask;
    span_truth(p, a.dense_truth, target, mask);
    ensure_directory(a.out);
    const auto table = make_prediction_table(p.point, a.levels, p.intervals, p.ens.steps, p.ens.nodes,
                                             p.ds.start_hour + static_cast<std::int64_t>(p.begin), target, mask);
    write_predictions_csv(fs::path(a.out) / "predictions.csv", table);
    out << "predicted hours [" << p.begin << ", " << p.end << ") with E = " << a.ensemble << " -> "
        << (fs::path(a.out) / "predictions.csv").string() << '\n';
    return kExitOk;
}

int cmd_evaluate(const PredictArgs& a, std::ostream& out) {
    const Prediction p = run_prediction(a);
    std::vector<double> target;
    std::vector<std::uint8_t> mask;
    span_truth(p, a.dense_truth, target, mask);
    EvaluationInput in;
    in.point = p.point;
    in.target = target;
    in.mask = mask;
    in.steps = p.ens.steps;
    in.nodes = p.ens.nodes;
    in.members = p.ens.members;
    in.start_hour = p.ds.start_hour + static_cast<std::int64_t>(p.begin);
    MetricReport report = build_report(in, a.levels, p.intervals);
    report.model = to_string(p.cp.config.mode);
    ensure_directory(a.out);
    write_report(fs::path(a.out) / "report.json", report);
    write_node_csv(fs::path(a.out) / "nodes.csv", report, p.ds.node_ids, p.ds.coords);
    const auto table =
        make_prediction_table(p.point, a.levels, p.intervals, p.ens.steps, p.ens.nodes, in.start_hour, target, mask);
    write_predictions_csv(fs::path(a.out) / "predictions.csv", table);
    auto show = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("undefined"); };
    out << report.model << " on hours [" << p.begin << ", " << p.end << "), " << report.valid_points
        << " points: rmse " << show(report.rmse) << ", mean r2 " << show(report.mean_r2);
    for (const auto& c : report.coverage) {
        out << ", picp_" << coverage_label(c.coverage) << ' ' << show(c.picp) << ", mpiw_" << coverage_label(c.coverage)
            << ' ' << show(c.mpiw);
    }
    out << '\n';
    return kExitOk;
}

int cmd_plot(const PlotArgs& a, std::ostream& out) {
    const fs::path dir(a.report);
    const fs::path out_dir = a.out.empty() ? dir : fs::path(a.out);
    const NodeMetricTable table = read_node_csv(dir / "nodes.csv");
    ensure_directory(out_dir);
    std::size_t written = 0;
    const std::string label = coverage_label(a.level);
    for (const std::string& metric : std::vector<std::string>{"rmse", "r2", "picp_" + label, "mpiw_" + label}) {
        const auto it = std::find(table.columns.begin(), table.columns.end(), metric);
        if (it == table.columns.end()) continue;
        const auto& values = table.values[static_cast<std::size_t>(it - table.columns.begin())];
        auto svg = open_output(out_dir / ("heatmap_" + metric + ".svg"));
        svg << heatmap_svg(table.coords, values, metric);
        ++written;
    }
    const fs::path pred_path = dir / "predictions.csv";
    if (fs::exists(pred_path)) {
        const PredictionTable pred = read_predictions_csv(pred_path);
        const auto lvl = std::find_if(pred.levels.begin(), pred.levels.end(),
                                      [&](double c) { return coverage_label(c) == label; });
        for (std::size_t node : a.nodes) {
            if (node >= table.node_ids.size()) {
                throw DataError("plot: node " + std::to_string(node) + " not in " + (dir / "nodes.csv").string());
            }
            std::vector<double> t, med, lo, hi, obs;
            for (std::size_t i = 0; i < pred.time.size(); ++i) {
                if (pred.node[i] != node) continue;
                t.push_back(static_cast<double>(pred.time[i]));
                med.push_back(pred.median[i]);
                if (lvl != pred.levels.end()) {
                    const auto k = static_cast<std::size_t>(lvl - pred.levels.begin());
                    lo.push_back(pred.lower[k][i]);
                    hi.push_back(pred.upper[k][i]);
                } else {
                    lo.push_back(pred.median[i]);
                    hi.push_back(pred.median[i]);
                }
                obs.push_back(pred.valid[i] ? pred.target[i] : std::nan(""));
            }
            auto svg = open_output(out_dir / ("timeseries_node_" + table.node_ids[node] + ".svg"));
            svg << timeseries_svg(t, med, lo, hi, obs,
                                  "node " + table.node_ids[node] + ", " + label + "% interval");
            ++written;
        }
    }
    out << "wrote " << written << " plots to " << out_dir.string() << '\n';
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Bayesian spatio-temporal networks: simulate, train, predict, evaluate, plot"};
    app.name("bstnn");
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "Generate a synthetic dataset");
    add_config(s);
    s->add_option("--out", sim.out, "Output directory")->capture_default_str();
    s->add_option("--seed", sim.cfg.seed, "Random seed")->capture_default_str();
    s->add_option("--nodes", sim.cfg.nodes, "Number of nodes")->capture_default_str();
    s->add_option("--hours", sim.cfg.hours, "Hours simulated")->capture_default_str();
    s->add_option("--mask-rate", sim.cfg.mask_rate, "Probability a target is observed")->capture_default_str();
    s->add_flag("--cloud-blobs", sim.cfg.cloud_blobs, "Blank daily disc-shaped regions");
    s->add_option("--spacing", sim.cfg.spacing, "Lattice spacing in meters")->capture_default_str();
    s->add_option("--diffusion", sim.cfg.diffusion, "Diffusion coefficient")->capture_default_str();
    s->add_option("--relaxation", sim.cfg.relaxation, "Relaxation rate per hour")->capture_default_str();
    s->add_option("--seasonal-amplitude", sim.cfg.seasonal_amplitude)->capture_default_str();
    s->add_option("--diurnal-amplitude", sim.cfg.diurnal_amplitude)->capture_default_str();
    s->add_option("--common-anomaly-std", sim.cfg.common_anomaly_std)->capture_default_str();
    s->add_option("--local-anomaly-std", sim.cfg.local_anomaly_std)->capture_default_str();
    s->add_option("--feature-noise", sim.cfg.feature_noise)->capture_default_str();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model");
    add_config(t);
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--mode", tr.mode, "BTNN, PT, FT, JT or compBNN")->capture_default_str();
    t->add_option("--from", tr.from, "Checkpoint to start from (PT, FT)");
    t->add_option("--out", tr.out, "Output directory")->capture_default_str();
    t->add_option("--seed", tr.cfg.seed)->capture_default_str();
    t->add_option("--epochs", tr.cfg.epochs, "0 selects the regime default")->capture_default_str();
    t->add_option("--learning-rate", tr.cfg.learning_rate)->capture_default_str();
    t->add_option("--batch-size", tr.cfg.batch_size)->capture_default_str();
    t->add_option("--alpha-kl", tr.cfg.alpha_kl)->capture_default_str();
    t->add_option("--scale-kl-by-batches", tr.cfg.scale_kl_by_batches)->capture_default_str();
    t->add_option("--window", tr.cfg.window)->capture_default_str();
    t->add_option("--horizon", tr.cfg.horizon)->capture_default_str();
    t->add_option("--prior", tr.cfg.prior, "gaussian or mixture")->capture_default_str();
    t->add_option("--prior-std", tr.cfg.prior_std)->capture_default_str();
    t->add_flag("--no-sharpening", tr.no_sharpening, "Disable posterior sharpening (BTNN)");
    t->add_option("--sharpening-sigma0", tr.cfg.sharpening_sigma0)->capture_default_str();
    t->add_option("--patience", tr.cfg.patience)->capture_default_str();
    t->add_option("--max-windows", tr.cfg.max_windows_per_epoch, "Samples per epoch, 0 = all")->capture_default_str();
    t->add_option("--max-validation-windows", tr.cfg.max_validation_windows)->capture_default_str();
    t->add_option("--test-year", tr.cfg.test_year)->capture_default_str();
    t->add_option("--weeks-per-year", tr.cfg.weeks_per_year)->capture_default_str();
    t->add_option("--val-fraction", tr.cfg.val_fraction)->capture_default_str();
    t->add_option("--sigma-dk2", tr.cfg.sigma_dk2)->capture_default_str();
    t->add_option("--kernel-cutoff", tr.cfg.kernel_cutoff)->capture_default_str();
    t->add_flag("--independent-shore", tr.cfg.independent_shore, "Drop edges of sparsely connected nodes");
    t->add_option("--dropout", tr.cfg.arch.dropout_rate, "compBNN dropout rate")->capture_default_str();

    PredictArgs pr;
    auto add_predict_options = [&](CLI::App* c) {
        add_config(c);
        c->add_option("--data", pr.data, "Dataset directory")->required();
        c->add_option("--from", pr.from, "Checkpoint")->required();
        c->add_option("--out", pr.out, "Output directory")->capture_default_str();
        c->add_option("--ensemble", pr.ensemble, "Forward passes E")->capture_default_str();
        c->add_option("--workers", pr.workers, "Threads for ensemble passes")->capture_default_str();
        c->add_option("--levels", pr.levels, "Coverage levels")->capture_default_str();
        c->add_option("--seed", pr.seed)->capture_default_str();
        c->add_option("--begin", pr.begin, "First hour (default: test year)");
        c->add_option("--end", pr.end, "One past the last hour");
        c->add_flag("--dense-truth", pr.dense_truth, "Score every finite target, not only observed ones");
        c->add_flag("--paper-verbatim-variance", pr.paper_verbatim_variance,
                    "compBNN aleatoric term as the mean of exp(s)^2");
    };
    auto* p = app.add_subcommand("predict", "Write ensemble predictions and intervals");
    add_predict_options(p);
    auto* e = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
    add_predict_options(e);

    PlotArgs pl;
    auto* g = app.add_subcommand("plot", "Render SVG heatmaps and time series");
    add_config(g);
    g->add_option("--report", pl.report, "Directory with nodes.csv (and predictions.csv)")->capture_default_str();
    g->add_option("--out", pl.out, "Output directory (default: the report directory)");
    g->add_option("--node", pl.nodes, "Node indices for time series")->capture_default_str();
    g->add_option("--level", pl.level, "Coverage level of the shaded band")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (s->parsed()) return cmd_simulate(sim, out);
        if (t->parsed()) return cmd_train(tr, out);
        if (p->parsed()) return cmd_predict(pr, out);
        if (e->parsed()) return cmd_evaluate(pr, out);
        if (g->parsed()) return cmd_plot(pl, out);
    } catch (const NumericError& ex) {
        err << "numeric failure: " << ex.what() << '\n';
        return kExitNumeric;
    } catch (const ContractError& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const DomainError& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const DataError& ex) {
        err << "data error: " << ex.what() << '\n';
        return kExitData;
    } catch (const DimensionError& ex) {
        err << "data error: " << ex.what() << '\n';
        return kExitData;
    } catch (const fs::filesystem_error& ex) {
        err << "I/O error: " << ex.what() << '\n';
        return kExitData;
    }
    return kExitUsage;
}

} // namespace bstnn
