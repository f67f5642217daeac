#include "bstnn/synthdata.hpp"

#include "bstnn/errors.hpp"
#include "bstnn/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace bstnn {

namespace {

constexpr std::size_t kMinimumHours = 36;

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Stationary AR(1) with unit-free correlation phi and marginal std sd.
struct Ar1 {
    double phi;
    double sd;
    double value = 0.0;

    double step(Rng& rng) {
        value = phi * value + std::sqrt(1.0 - phi * phi) * sd * rng.normal();
        return value;
    }
};

} // namespace

std::size_t SpatioTemporalDataset::valid_count() const {
    return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }));
}

void SpatioTemporalDataset::validate() const {
    if (steps == 0 || nodes == 0 || channels == 0) throw DataError("dataset: empty dimensions");
    if (features.size() != steps * nodes * channels) {
        throw DataError("dataset: " + std::to_string(features.size()) + " feature values for " +
                        std::to_string(steps) + " x " + std::to_string(nodes) + " x " + std::to_string(channels));
    }
    if (targets.size() != steps * nodes || valid.size() != steps * nodes) {
        throw DataError("dataset: target or mask size differs from steps x nodes");
    }
    if (coords.size() != nodes || node_ids.size() != nodes) {
        throw DataError("dataset: coordinate or node id count differs from node count");
    }
    if (channel_names.size() != channels) throw DataError("dataset: channel name count differs from channel count");
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (!std::isfinite(features[i])) {
            const std::size_t t = i / (nodes * channels);
            throw DataError("dataset: non-finite feature at time " + std::to_string(t));
        }
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (valid[i] && !std::isfinite(targets[i])) {
            throw DataError("dataset: valid target without a finite value at time " + std::to_string(i / nodes));
        }
    }
}

void SyntheticConfig::validate() const {
    if (nodes == 0) throw ContractError("synthetic config: nodes must be positive");
    if (hours < kMinimumHours) {
        throw ContractError("synthetic config: hours must be at least " + std::to_string(kMinimumHours));
    }
    if (!(spacing > 0.0) || !(aspect > 0.0) || jitter < 0.0 || jitter >= 0.5) {
        throw ContractError("synthetic config: spacing and aspect must be positive, jitter in [0, 0.5)");
    }
    if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ContractError("synthetic config: mask_rate must lie in (0, 1]");
    if (relaxation < 0.0 || diffusion < 0.0 || 1.5 * relaxation + diffusion > 1.0) {
        throw ContractError("synthetic config: need relaxation, diffusion >= 0 and 1.5*relaxation + diffusion <= 1");
    }
    if (!(seasonal_period > 0.0) || !(bulk_time_constant >= 1.0)) {
        throw ContractError("synthetic config: seasonal period must be positive, bulk time constant >= 1");
    }
    for (double c : {common_anomaly_corr, local_anomaly_corr, feature_noise_corr}) {
        if (c < 0.0 || c >= 1.0) throw ContractError("synthetic config: AR(1) correlations must lie in [0, 1)");
    }
    for (double s : {common_anomaly_std, local_anomaly_std, feature_noise, wind_noise, radiation_noise}) {
        if (s < 0.0) throw ContractError("synthetic config: noise scales must be non-negative");
    }
}

std::vector<Coord> lake_lattice(const SyntheticConfig& cfg) {
    cfg.validate();
    const double width = 1.0;
    const double length = cfg.aspect;
    // Enough lattice rows and columns to hold N points inside the ellipse.
    const auto half = static_cast<long>(std::ceil(std::sqrt(static_cast<double>(cfg.nodes) * length))) + 2;
    struct Candidate {
        double metric;
        long i;
        long j;
    };
    std::vector<Candidate> cand;
    for (long j = -half; j <= half; ++j) {
        for (long i = -half; i <= half; ++i) {
            const double u = static_cast<double>(i) / length;
            const double v = static_cast<double>(j) / width;
            cand.push_back({u * u + v * v, i, j});
        }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return a.metric < b.metric; });
    Rng rng(derive_seed(cfg.seed, 1));
    std::vector<Coord> coords(cfg.nodes);
    for (std::size_t n = 0; n < cfg.nodes; ++n) {
        const double jx = (2.0 * rng.uniform() - 1.0) * cfg.jitter;
        const double jy = (2.0 * rng.uniform() - 1.0) * cfg.jitter;
        coords[n] = {(static_cast<double>(cand[n].i) + jx) * cfg.spacing,
                     (static_cast<double>(cand[n].j) + jy) * cfg.spacing};
    }
    return coords;
}

LakeDynamics::LakeDynamics(const Tensor& adjacency, double kappa) : kappa_(kappa) {
    if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
        throw DimensionError("lake dynamics: adjacency must be square, got " + shape_string(adjacency.shape()));
    }
    if (kappa < 0.0 || kappa > 1.0) throw ContractError("lake dynamics: kappa must lie in [0, 1]");
    nodes_ = adjacency.dim(0);
    double max_degree = 0.0;
    for (std::size_t i = 0; i < nodes_; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < nodes_; ++j) deg += adjacency.at(i, j);
        max_degree = std::max(max_degree, deg);
    }
    coupling_.assign(adjacency.data().begin(), adjacency.data().end());
    if (max_degree > 0.0) {
        for (double& w : coupling_) w /= max_degree;
    }
}

void LakeDynamics::step(std::span<double> temperature, std::span<const double> forcing,
                        std::span<const double> relaxation) const {
    if (temperature.size() != nodes_ || forcing.size() != nodes_ || relaxation.size() != nodes_) {
        throw DimensionError("lake dynamics: state, forcing and relaxation must have one entry per node");
    }
    std::vector<double> next(nodes_);
    for (std::size_t n = 0; n < nodes_; ++n) {
        double exchange = 0.0;
        for (std::size_t j = 0; j < nodes_; ++j) {
            exchange += coupling_[n * nodes_ + j] * (temperature[j] - temperature[n]);
        }
        next[n] = temperature[n] + relaxation[n] * (forcing[n] - temperature[n]) + kappa_ * exchange;
    }
    std::copy(next.begin(), next.end(), temperature.begin());
}

SimulationResult simulate_world(const SyntheticConfig& cfg) {
    cfg.validate();
    const std::size_t n_nodes = cfg.nodes;
    const std::size_t hours = cfg.hours;
    const std::vector<Coord> coords = lake_lattice(cfg);
    const LakeDynamics dynamics(build_adjacency_threshold(coords, cfg.coupling_radius * cfg.spacing), cfg.diffusion);

    double x_min = coords[0].x, x_max = coords[0].x;
    for (const Coord& c : coords) {
        x_min = std::min(x_min, c.x);
        x_max = std::max(x_max, c.x);
    }
    const double x_span = x_max > x_min ? x_max - x_min : 1.0;
    std::vector<double> offset(n_nodes);
    for (std::size_t n = 0; n < n_nodes; ++n) {
        offset[n] = cfg.spatial_gradient * ((coords[n].x - x_min) / x_span - 0.5);
    }

    Rng rng(derive_seed(cfg.seed, 2));
    Ar1 common{cfg.common_anomaly_corr, cfg.common_anomaly_std};
    Ar1 wind_common{0.98, 1.0};
    Ar1 cloud{0.99, 1.5};
    std::vector<Ar1> local(n_nodes, Ar1{cfg.local_anomaly_corr, cfg.local_anomaly_std});
    std::vector<Ar1> air_noise(n_nodes, Ar1{cfg.feature_noise_corr, cfg.feature_noise});
    std::vector<Ar1> bulk_noise(n_nodes, Ar1{cfg.feature_noise_corr, cfg.feature_noise});

    SimulationResult out;
    SpatioTemporalDataset& ds = out.dataset;
    ds.steps = hours;
    ds.nodes = n_nodes;
    ds.channels = kSyntheticChannels;
    ds.coords = coords;
    for (std::size_t n = 0; n < n_nodes; ++n) ds.node_ids.push_back(std::to_string(n));
    ds.channel_names = {"air_temperature", "wind", "radiation", "bulk_temperature"};
    ds.features.resize(hours * n_nodes * kSyntheticChannels);
    ds.targets.resize(hours * n_nodes);
    ds.valid.assign(hours * n_nodes, 1);
    out.forcing.resize(hours * n_nodes);

    std::vector<double> temperature(n_nodes);
    std::vector<double> forcing(n_nodes);
    std::vector<double> relax(n_nodes);
    std::vector<double> bulk(n_nodes);
    std::vector<double> wind(n_nodes);
    std::vector<double> air(n_nodes);
    std::vector<double> radiation(n_nodes);
    const double two_pi = 2.0 * std::numbers::pi;

    for (std::size_t t = 0; t < hours; ++t) {
        const double time = static_cast<double>(t);
        const double season = -cfg.seasonal_amplitude * std::cos(two_pi * time / cfg.seasonal_period);
        const double hour_of_day = std::fmod(time, 24.0);
        const double diurnal = cfg.diurnal_amplitude * std::sin(two_pi * (hour_of_day - 9.0) / 24.0);
        const double daylight = std::max(0.0, std::sin(std::numbers::pi * (hour_of_day - 6.0) / 12.0));
        const double season_light = 0.6 - 0.4 * std::cos(two_pi * time / cfg.seasonal_period);
        const double sky = logistic(cloud.step(rng));
        const double shortwave = daylight * season_light * (1.0 - 0.7 * sky);
        const double anomaly = common.step(rng);
        const double wind_level = wind_common.step(rng);

        for (std::size_t n = 0; n < n_nodes; ++n) {
            const double local_anomaly = local[n].step(rng);
            const double atmosphere = cfg.base_temperature + season + offset[n] + anomaly + local_anomaly;
            forcing[n] = atmosphere + diurnal + cfg.radiative_gain * (shortwave - 0.25);
            air[n] = atmosphere + 1.3 * diurnal + air_noise[n].step(rng);
            wind[n] = logistic(wind_level + 0.3 * rng.normal());
            relax[n] = cfg.relaxation * (0.5 + wind[n]);
            radiation[n] = shortwave;
        }
        if (t == 0) {
            temperature = forcing;
            bulk = forcing;
        } else {
            dynamics.step(temperature, forcing, relax);
        }
        for (std::size_t n = 0; n < n_nodes; ++n) {
            bulk[n] += (temperature[n] - bulk[n]) / cfg.bulk_time_constant;
            const std::size_t i = t * n_nodes + n;
            ds.targets[i] = temperature[n];
            out.forcing[i] = forcing[n];
            double* f = &ds.features[i * kSyntheticChannels];
            f[kAirTemperature] = air[n];
            f[kWind] = wind[n] + cfg.wind_noise * rng.normal();
            f[kRadiation] = radiation[n] + cfg.radiation_noise * rng.normal();
            // Filled below once the lagged low-pass value is known.
            f[kBulkTemperature] = bulk[n];
        }
    }
    // Bulk channel: low-pass truth delayed by bulk_lag hours, plus sensor noise.
    for (std::size_t t = hours; t-- > 0;) {
        const std::size_t src = t >= cfg.bulk_lag ? t - cfg.bulk_lag : 0;
        for (std::size_t n = 0; n < n_nodes; ++n) {
            ds.features[(t * n_nodes + n) * kSyntheticChannels + kBulkTemperature] =
                ds.features[(src * n_nodes + n) * kSyntheticChannels + kBulkTemperature];
        }
    }
    for (std::size_t t = 0; t < hours; ++t) {
        for (std::size_t n = 0; n < n_nodes; ++n) {
            ds.features[(t * n_nodes + n) * kSyntheticChannels + kBulkTemperature] += bulk_noise[n].step(rng);
        }
    }
    apply_mask(ds, cfg.mask_rate, derive_seed(cfg.seed, 3), cfg.cloud_blobs);
    return out;
}

SpatioTemporalDataset simulate(const SyntheticConfig& cfg) { return simulate_world(cfg).dataset; }

void apply_mask(SpatioTemporalDataset& ds, double mask_rate, std::uint64_t seed, bool cloud_blobs) {
    if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ContractError("apply_mask: mask_rate must lie in (0, 1]");
    Rng rng(seed);
    ds.valid.assign(ds.steps * ds.nodes, 0);
    for (std::size_t i = 0; i < ds.valid.size(); ++i) {
        ds.valid[i] = (mask_rate >= 1.0 || rng.bernoulli(mask_rate)) && std::isfinite(ds.targets[i]) ? 1 : 0;
    }
    if (!cloud_blobs || ds.nodes == 0) return;
    double x_min = ds.coords[0].x, x_max = x_min, y_min = ds.coords[0].y, y_max = y_min;
    for (const Coord& c : ds.coords) {
        x_min = std::min(x_min, c.x);
        x_max = std::max(x_max, c.x);
        y_min = std::min(y_min, c.y);
        y_max = std::max(y_max, c.y);
    }
    const double extent = std::max(std::hypot(x_max - x_min, y_max - y_min), 1.0);
    for (std::size_t day = 0; day * 24 < ds.steps; ++day) {
        const std::size_t blobs = rng.index(3);
        for (std::size_t b = 0; b < blobs; ++b) {
            const Coord centre = ds.coords[rng.index(ds.nodes)];
            const double radius = (0.1 + 0.25 * rng.uniform()) * extent;
            for (std::size_t t = day * 24; t < std::min(ds.steps, (day + 1) * 24); ++t) {
                for (std::size_t n = 0; n < ds.nodes; ++n) {
                    if (distance(ds.coords[n], centre) < radius) ds.valid[t * ds.nodes + n] = 0;
                }
            }
        }
    }
}

SpatialGraph dataset_graph(const SpatioTemporalDataset& ds, double sigma_dk2, const DiffusionKernelOptions& options,
                           std::span<const std::size_t> independent) {
    Tensor a = build_adjacency_diffusion(ds.coords, sigma_dk2, options);
    return SpatialGraph(ds.coords, std::move(a), ds.node_ids, {independent.begin(), independent.end()});
}

} // namespace bstnn
