#pragma once

// Spatio-temporal datasets and a synthetic lake-temperature world.
//
// The simulated surface temperature relaxes toward a node-local forcing and
// diffuses over the lattice graph. Models never see the forcing directly, only
// noisy proxies of it (air temperature, wind, radiation) and a lagged low-pass
// "bulk" temperature, so neighbouring nodes carry complementary information.

#include "bstnn/graph.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bstnn {

enum Channel : std::size_t { kAirTemperature = 0, kWind = 1, kRadiation = 2, kBulkTemperature = 3 };
inline constexpr std::size_t kSyntheticChannels = 4;

struct SpatioTemporalDataset {
    std::size_t steps = 0;
    std::size_t nodes = 0;
    std::size_t channels = 0;
    std::int64_t start_hour = 0;
    std::vector<double> features;    // [steps, nodes, channels]
    std::vector<double> targets;     // [steps, nodes], NaN where never observed
    std::vector<std::uint8_t> valid; // [steps, nodes], observation mask
    std::vector<Coord> coords;
    std::vector<std::string> node_ids;
    std::vector<std::string> channel_names;

    double feature(std::size_t t, std::size_t n, std::size_t d) const {
        return features[(t * nodes + n) * channels + d];
    }
    double target(std::size_t t, std::size_t n) const { return targets[t * nodes + n]; }
    bool is_valid(std::size_t t, std::size_t n) const { return valid[t * nodes + n] != 0; }

    std::size_t valid_count() const;
    // Throws DataError on inconsistent sizes, non-finite features or a valid
    // flag on a non-finite target.
    void validate() const;
};

struct SyntheticConfig {
    std::size_t nodes = 30;
    double spacing = 1000.0;      // meters between lattice neighbours
    double jitter = 0.2;          // fraction of spacing
    double aspect = 2.5;          // ellipse length / width
    std::size_t hours = 17520;

    double base_temperature = 12.0;
    double seasonal_amplitude = 8.0;
    double seasonal_period = 8760.0;
    double diurnal_amplitude = 1.5;
    double spatial_gradient = 1.5; // forcing offset across the lake (deg C)
    double radiative_gain = 1.0;

    double relaxation = 0.05;      // per hour, scaled by wind in [0.5, 1.5]
    double diffusion = 0.3;        // kappa, coupling weights are A / max degree
    double coupling_radius = 1.6;  // in units of spacing

    double common_anomaly_std = 1.5;  // stationary std of the lake-wide AR(1) anomaly
    double common_anomaly_corr = 0.995;
    double local_anomaly_std = 1.0;
    double local_anomaly_corr = 0.97;
    double feature_noise = 0.6;       // per-node AR(1) sensor noise on the air/bulk channels
    double feature_noise_corr = 0.9;
    double wind_noise = 0.15;
    double radiation_noise = 0.1;

    double bulk_time_constant = 72.0; // hours
    std::size_t bulk_lag = 6;

    double mask_rate = 0.05;
    bool cloud_blobs = false;
    std::uint64_t seed = 1;

    void validate() const;
};

// Node positions on a jittered square lattice clipped to an ellipse; the N
// lattice points closest to the centre (in ellipse metric) are kept.
std::vector<Coord> lake_lattice(const SyntheticConfig& cfg);

// T_n <- T_n + lambda_n (F_n - T_n) + kappa sum_j w_nj (T_j - T_n).
// With symmetric w, row sums <= 1 and lambda_n + kappa <= 1 the update is a
// convex combination, so temperatures stay inside the hull of the initial
// field and the forcing, and without forcing the spatial mean is conserved.
class LakeDynamics {
public:
    LakeDynamics(const Tensor& adjacency, double kappa);

    std::size_t nodes() const { return nodes_; }
    const std::vector<double>& coupling() const { return coupling_; }

    void step(std::span<double> temperature, std::span<const double> forcing,
              std::span<const double> relaxation) const;

private:
    std::size_t nodes_;
    double kappa_;
    std::vector<double> coupling_;
};

struct SimulationResult {
    SpatioTemporalDataset dataset;
    std::vector<double> forcing; // [steps, nodes]
};

// Dense truth plus a Bernoulli(mask_rate) observation mask.
SimulationResult simulate_world(const SyntheticConfig& cfg);
SpatioTemporalDataset simulate(const SyntheticConfig& cfg);

// Redraws the observation mask: each (t, n) valid with probability mask_rate.
// With cloud_blobs, a daily set of discs additionally blanks whole regions.
void apply_mask(SpatioTemporalDataset& ds, double mask_rate, std::uint64_t seed, bool cloud_blobs = false);

// Graph over the dataset nodes with the given kernel.
SpatialGraph dataset_graph(const SpatioTemporalDataset& ds, double sigma_dk2,
                           const DiffusionKernelOptions& options = {},
                           std::span<const std::size_t> independent = {});

} // namespace bstnn
