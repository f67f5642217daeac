#pragma once

// Objectives, Adam, weekly data splitting, standardization and the training
// regimes:
//
//   BTNN     temporal model on random (window, node) samples, MSE + KL + PS
//   PT       spatio-temporal model from a trained BTNN; temporal stack frozen
//   FT       continues a PT model with every weight trainable
//   JT       spatio-temporal model trained from scratch
//   compBNN  MC-dropout comparison model with the heteroscedastic loss
//
// Windows are time-major slices of `window` hours; only the final `horizon`
// steps of each window enter the loss.

#include "bstnn/models.hpp"
#include "bstnn/synthdata.hpp"
#include "bstnn/variational.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace bstnn {

enum class Regime { BTNN, PT, FT, JT, CompBNN };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);
ModelKind model_kind(Regime r);

struct TrainingConfig {
    Regime mode = Regime::BTNN;
    std::size_t epochs = 0; // 0 selects the regime default (see default_epochs)
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    double alpha_kl = 0.001;
    // Divide the KL term of each mini-batch by the number of batches per epoch
    // instead of adding the full KL to every batch.
    bool scale_kl_by_batches = false;
    std::size_t kl_mc_samples = 5;
    std::size_t window = 36;
    std::size_t horizon = 8;

    std::string prior = "gaussian"; // or "mixture"
    double prior_std = 1.0;
    double mixture_weight = 0.5;    // weight of the first component
    double mixture_std2 = 0.1;      // second component std (first is prior_std)

    bool sharpening = true;         // BTNN only
    double sharpening_sigma0 = 0.02;
    bool sharpen_head = true;       // include the dense head in sharpening

    std::size_t patience = 10;      // early stopping for BTNN and PT; 0 disables
    std::size_t max_windows_per_epoch = 0;   // 0 uses every eligible sample
    std::size_t max_validation_windows = 0;  // 0 uses every validation window

    std::size_t test_year = 1;
    double val_fraction = 0.2;
    std::size_t weeks_per_year = 52;

    double sigma_dk2 = 1000.0;
    bool squared_distance = false;
    double kernel_cutoff = 0.0;
    bool independent_shore = false;
    double shore_radius = 1500.0;
    std::size_t shore_min_neighbors = 5;

    Architecture arch;
    std::uint64_t seed = 1;

    // Throws ContractError / DomainError for out-of-range settings.
    void validate() const;
    std::size_t default_epochs() const;
    std::size_t effective_epochs() const { return epochs ? epochs : default_epochs(); }
    Prior make_prior() const;
};

nlohmann::json config_to_json(const TrainingConfig& cfg);
TrainingConfig config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Data splitting

enum class WeekRole : std::uint8_t { Train, Validation, Test };

struct DatasetSplit {
    std::size_t week_length = 168;
    std::size_t steps = 0;
    std::vector<WeekRole> roles; // one per (possibly partial) week
    std::vector<std::size_t> train_weeks;
    std::vector<std::size_t> validation_weeks;
    std::vector<std::size_t> test_weeks;

    std::size_t week_of(std::size_t hour) const { return hour / week_length; }
    // First and one-past-last hour of the contiguous test span.
    std::size_t test_begin() const;
    std::size_t test_end() const;
    // True iff every hour of [begin, begin + length) lies in weeks of `role`.
    bool window_inside(std::size_t begin, std::size_t length, WeekRole role) const;
    // Window starts of the given role with the given stride.
    std::vector<std::size_t> windows(WeekRole role, std::size_t length, std::size_t stride = 1) const;
};

// Test = the `test_year`-th block of `weeks_per_year` weeks; the remaining
// weeks (a trailing partial week included) are shuffled with `seed` and the
// first floor(val_fraction * count) become validation weeks.
DatasetSplit split_weekly(std::size_t steps, std::size_t test_year, double val_fraction, std::uint64_t seed,
                          std::size_t weeks_per_year = 52, std::size_t week_length = 168);
DatasetSplit split_weekly(const SpatioTemporalDataset& ds, std::size_t test_year, double val_fraction,
                          std::uint64_t seed, std::size_t weeks_per_year = 52);

// ---------------------------------------------------------------------------
// Standardization

struct Standardizer {
    std::vector<double> feature_mean;
    std::vector<double> feature_std;
    double target_mean = 0.0;
    double target_std = 1.0;

    // Statistics over the hours of the training weeks (valid targets only).
    static Standardizer fit(const SpatioTemporalDataset& ds, const DatasetSplit& split);

    std::vector<double> features(const SpatioTemporalDataset& ds) const; // [T, N, D]
    std::vector<double> targets(const SpatioTemporalDataset& ds) const;  // [T, N], NaN kept
    double to_original(double y) const { return y * target_std + target_mean; }
    double log_variance_to_original(double s) const;
};

nlohmann::json standardizer_to_json(const Standardizer& s);
Standardizer standardizer_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Objectives

struct LossTerms {
    Tensor total;
    double mse = 0.0;
    double kl = 0.0;
    double ps = 0.0;
};

// Mean of (pred - target)^2 over entries with mask set; nullopt if none are.
std::optional<Tensor> masked_mse(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask);

// l_MSE + l_KL + l_PS; `kl` and `ps` are scalar tensors built by the caller.
std::optional<LossTerms> loss_btnn(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask,
                                   const Tensor& kl, const Tensor& ps);
// l_MSE + l_KL.
std::optional<LossTerms> loss_bstnn(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask,
                                    const Tensor& kl);

inline constexpr double kLogVarianceClamp = 15.0;

// Masked mean of 0.5 exp(-s) (y - yhat)^2 + 0.5 s with s clamped to
// [-15, 15] so exp(-s) cannot overflow.
std::optional<Tensor> loss_compbnn(const Tensor& y, const Tensor& y_hat, const Tensor& s,
                                   std::span<const std::uint8_t> mask);

// Per-batch objectives; call inside an active TapeScope. `kl_scale`
// multiplies the KL term (1 / batches per epoch when scale_kl_by_batches is set, else 1).

// Two passes: the first takes g = grad of the data loss at a sampled w, the
// second evaluates the sharpened weights w - eta*g + sigma0*eps'.
std::optional<LossTerms> btnn_objective(const BTNNModel& model, const Tensor& x, const Tensor& y,
                                        std::span<const std::uint8_t> mask, const TrainingConfig& cfg,
                                        const Prior& prior, double kl_scale, NoiseSource& noise);
// With train_temporal false the temporal draws carry no gradient and are
// excluded from the KL term.
std::optional<LossTerms> spatial_objective(const BSTNNModel& model, const Tensor& x, const Tensor& y,
                                           std::span<const std::uint8_t> mask, const TrainingConfig& cfg,
                                           const Prior& prior, double kl_scale, bool train_temporal,
                                           NoiseSource& noise);
std::optional<LossTerms> compbnn_objective(const CompBNNModel& model, const Tensor& x, const Tensor& y,
                                           std::span<const std::uint8_t> mask, const TrainingConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class Adam {
public:
    Adam(std::vector<Tensor*> params, AdamConfig cfg);

    // Applies one update from the parameters' gradients. Returns false and
    // leaves everything untouched if any gradient is non-finite.
    bool step();
    void zero_grad();
    std::size_t steps() const { return t_; }
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

private:
    std::vector<Tensor*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct TrainedModel {
    AnyModel model;
    Standardizer standardizer;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_mse = 0.0;
    double train_kl = 0.0;
    double train_ps = 0.0;
    std::optional<double> validation_mse;
    std::size_t batches = 0;
    std::size_t skipped_batches = 0;
    std::size_t aborted_steps = 0;
    double seconds = 0.0;
};

struct TrainingResult {
    TrainedModel trained;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
};

// Graph used by the spatio-temporal regimes for a dataset under `cfg`.
SpatialGraph training_graph(const TrainingConfig& cfg, const SpatioTemporalDataset& ds);

// `from` is required for PT (a BTNN) and FT (a PT/FT spatio-temporal model);
// its standardizer is reused. Progress lines go to `log` when given.
TrainingResult train(const TrainingConfig& cfg, const SpatioTemporalDataset& ds, const DatasetSplit& split,
                     const TrainedModel* from = nullptr, std::ostream* log = nullptr);

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);

// FNV-1a over the mu/rho buffers of the temporal (first) or spatial parameter
// groups; used to assert freeze contracts.
enum class ParameterGroup { Temporal, Spatial, All };
std::uint64_t parameter_hash(const AnyModel& model, ParameterGroup group);

// ---------------------------------------------------------------------------
// Windowed prediction

struct ForecastOptions {
    std::size_t members = 11;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::size_t window = 36;
    std::size_t horizon = 8;
    std::size_t chunk_windows = 32;
};

// Ensemble over hours [begin, end) in original target units. Each hour is
// predicted by the window ending at most `horizon` steps after it; hours
// earlier than one full window reuse the first window's outputs.
PredictiveEnsemble forecast(const TrainedModel& trained, const SpatioTemporalDataset& ds, std::size_t begin,
                            std::size_t end, const ForecastOptions& opts);

} // namespace bstnn
