#include "bstnn/training.hpp"

#include "bstnn/csv.hpp"
#include "bstnn/errors.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace bstnn {

namespace {

constexpr std::uint64_t kStreamInit = 11;
constexpr std::uint64_t kStreamShuffle = 12;
constexpr std::uint64_t kStreamNoise = 13;
constexpr std::uint64_t kStreamValidation = 14;

Tensor mask_tensor(const Shape& shape, std::span<const std::uint8_t> mask) {
    std::vector<double> m(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] ? 1.0 : 0.0;
    return Tensor(shape, std::move(m));
}

std::size_t count_valid(std::span<const std::uint8_t> mask) {
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

struct Batch {
    Tensor x;
    Tensor y;
    std::vector<std::uint8_t> mask;
};

// Standardized dataset arrays shared by batch assembly.
struct Arrays {
    std::size_t steps;
    std::size_t nodes;
    std::size_t channels;
    std::vector<double> x; // [T, N, D]
    std::vector<double> y; // [T, N], NaN where unknown
    std::span<const std::uint8_t> valid;

    bool observed(std::size_t t, std::size_t n) const { return valid[t * nodes + n] != 0; }
};

// Samples for node-independent models: (start, node) packed as start * N + n.
Batch temporal_batch(const Arrays& a, std::span<const std::size_t> samples, std::size_t window, std::size_t horizon) {
    const std::size_t b_count = samples.size();
    const std::size_t d_count = a.channels;
    std::vector<double> x(window * b_count * d_count);
    std::vector<double> y(horizon * b_count, 0.0);
    std::vector<std::uint8_t> mask(horizon * b_count, 0);
    for (std::size_t b = 0; b < b_count; ++b) {
        const std::size_t start = samples[b] / a.nodes;
        const std::size_t node = samples[b] % a.nodes;
        for (std::size_t t = 0; t < window; ++t) {
            const double* src = &a.x[((start + t) * a.nodes + node) * d_count];
            std::copy(src, src + d_count, &x[(t * b_count + b) * d_count]);
        }
        for (std::size_t p = 0; p < horizon; ++p) {
            const std::size_t t = start + window - horizon + p;
            if (a.observed(t, node)) {
                y[p * b_count + b] = a.y[t * a.nodes + node];
                mask[p * b_count + b] = 1;
            }
        }
    }
    return {Tensor(Shape{window, b_count, d_count}, std::move(x)), Tensor(Shape{horizon, b_count}, std::move(y)),
            std::move(mask)};
}

Batch spatial_batch(const Arrays& a, std::span<const std::size_t> starts, std::size_t window, std::size_t horizon) {
    const std::size_t b_count = starts.size();
    const std::size_t n_count = a.nodes;
    const std::size_t d_count = a.channels;
    const std::size_t row = n_count * d_count;
    std::vector<double> x(window * b_count * row);
    std::vector<double> y(horizon * b_count * n_count, 0.0);
    std::vector<std::uint8_t> mask(horizon * b_count * n_count, 0);
    for (std::size_t b = 0; b < b_count; ++b) {
        for (std::size_t t = 0; t < window; ++t) {
            const double* src = &a.x[(starts[b] + t) * row];
            std::copy(src, src + row, &x[(t * b_count + b) * row]);
        }
        for (std::size_t p = 0; p < horizon; ++p) {
            const std::size_t t = starts[b] + window - horizon + p;
            for (std::size_t n = 0; n < n_count; ++n) {
                if (!a.observed(t, n)) continue;
                const std::size_t i = (p * b_count + b) * n_count + n;
                y[i] = a.y[t * n_count + n];
                mask[i] = 1;
            }
        }
    }
    return {Tensor(Shape{window, b_count, n_count, d_count}, std::move(x)),
            Tensor(Shape{horizon, b_count, n_count}, std::move(y)), std::move(mask)};
}

bool any_target(const Arrays& a, std::size_t start, std::size_t window, std::size_t horizon, std::size_t node) {
    for (std::size_t t = start + window - horizon; t < start + window; ++t) {
        if (a.observed(t, node)) return true;
    }
    return false;
}

std::vector<std::size_t> temporal_samples(const Arrays& a, std::span<const std::size_t> starts, std::size_t window,
                                          std::size_t horizon) {
    std::vector<std::size_t> out;
    for (std::size_t s : starts) {
        for (std::size_t n = 0; n < a.nodes; ++n) {
            if (any_target(a, s, window, horizon, n)) out.push_back(s * a.nodes + n);
        }
    }
    return out;
}

std::vector<std::size_t> spatial_samples(const Arrays& a, std::span<const std::size_t> starts, std::size_t window,
                                         std::size_t horizon) {
    std::vector<std::size_t> out;
    for (std::size_t s : starts) {
        for (std::size_t n = 0; n < a.nodes; ++n) {
            if (any_target(a, s, window, horizon, n)) {
                out.push_back(s);
                break;
            }
        }
    }
    return out;
}

std::vector<Tensor*> optimizer_tensors(std::span<VariationalParameter* const> params, bool with_eta) {
    std::vector<Tensor*> out;
    for (VariationalParameter* p : params) {
        out.push_back(&p->mu);
        out.push_back(&p->rho);
        if (with_eta && p->eta) out.push_back(&*p->eta);
    }
    return out;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor*>& tensors) {
    std::vector<std::vector<double>> out;
    for (const Tensor* t : tensors) out.emplace_back(t->data().begin(), t->data().end());
    return out;
}

void restore(const std::vector<Tensor*>& tensors, const std::vector<std::vector<double>>& values) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        std::copy(values[i].begin(), values[i].end(), tensors[i]->mutable_data().begin());
    }
}

template <typename T>
void hash_bytes(std::uint64_t& h, std::span<const T> values) {
    const auto* p = reinterpret_cast<const unsigned char*>(values.data());
    for (std::size_t i = 0; i < values.size_bytes(); ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(Regime r) {
    switch (r) {
    case Regime::BTNN: return "BTNN";
    case Regime::PT: return "PT";
    case Regime::FT: return "FT";
    case Regime::JT: return "JT";
    case Regime::CompBNN: return "compBNN";
    }
    return "?";
}

Regime regime_from_string(const std::string& s) {
    if (s == "BTNN") return Regime::BTNN;
    if (s == "PT") return Regime::PT;
    if (s == "FT") return Regime::FT;
    if (s == "JT") return Regime::JT;
    if (s == "compBNN" || s == "COMPBNN" || s == "compbnn") return Regime::CompBNN;
    throw ContractError("unknown training mode '" + s + "' (expected BTNN, PT, FT, JT or compBNN)");
}

ModelKind model_kind(Regime r) {
    switch (r) {
    case Regime::BTNN: return ModelKind::BTNN;
    case Regime::CompBNN: return ModelKind::CompBNN;
    default: return ModelKind::BSTNN;
    }
}

void TrainingConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be positive");
    if (batch_size == 0) throw ContractError("batch_size must be at least 1");
    if (alpha_kl < 0.0) throw DomainError("alpha_kl must be non-negative");
    if (window == 0 || horizon == 0 || horizon > window) {
        throw ContractError("need 1 <= horizon <= window, got window " + std::to_string(window) + ", horizon " +
                            std::to_string(horizon));
    }
    if (prior != "gaussian" && prior != "mixture") throw ContractError("prior must be 'gaussian' or 'mixture'");
    if (!(prior_std > 0.0) || !(mixture_std2 > 0.0)) throw DomainError("prior standard deviations must be positive");
    if (!(mixture_weight > 0.0 && mixture_weight < 1.0)) throw DomainError("mixture_weight must lie in (0, 1)");
    if (!(sharpening_sigma0 > 0.0)) throw DomainError("sharpening sigma0 must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ContractError("val_fraction must lie in [0, 1)");
    if (weeks_per_year == 0) throw ContractError("weeks_per_year must be positive");
    if (!(sigma_dk2 > 0.0)) throw DomainError("sigma_dk2 must be positive");
    if (kl_mc_samples == 0) throw ContractError("kl_mc_samples must be at least 1");
    if (!(arch.dropout_rate >= 0.0 && arch.dropout_rate < 1.0)) throw DomainError("dropout rate must lie in [0, 1)");
}

std::size_t TrainingConfig::default_epochs() const {
    switch (mode) {
    case Regime::FT: return 10;
    case Regime::JT: return 40;
    case Regime::CompBNN: return 40;
    default: return 100;
    }
}

Prior TrainingConfig::make_prior() const {
    if (prior == "mixture") {
        return Prior::mixture({mixture_weight, 1.0 - mixture_weight}, {0.0, 0.0}, {prior_std, mixture_std2});
    }
    return Prior::gaussian(0.0, prior_std);
}

nlohmann::json config_to_json(const TrainingConfig& c) {
    return {
        {"mode", to_string(c.mode)},
        {"epochs", c.effective_epochs()},
        {"learning_rate", c.learning_rate},
        {"batch_size", c.batch_size},
        {"alpha_kl", c.alpha_kl},
        {"scale_kl_by_batches", c.scale_kl_by_batches},
        {"kl_mc_samples", c.kl_mc_samples},
        {"window", c.window},
        {"horizon", c.horizon},
        {"prior", c.prior},
        {"prior_std", c.prior_std},
        {"mixture_weight", c.mixture_weight},
        {"mixture_std2", c.mixture_std2},
        {"sharpening", c.sharpening},
        {"sharpening_sigma0", c.sharpening_sigma0},
        {"sharpen_head", c.sharpen_head},
        {"patience", c.patience},
        {"max_windows_per_epoch", c.max_windows_per_epoch},
        {"max_validation_windows", c.max_validation_windows},
        {"test_year", c.test_year},
        {"val_fraction", c.val_fraction},
        {"weeks_per_year", c.weeks_per_year},
        {"sigma_dk2", c.sigma_dk2},
        {"squared_distance", c.squared_distance},
        {"kernel_cutoff", c.kernel_cutoff},
        {"independent_shore", c.independent_shore},
        {"shore_radius", c.shore_radius},
        {"shore_min_neighbors", c.shore_min_neighbors},
        {"architecture",
         {{"features", c.arch.features},
          {"lstm1_units", c.arch.lstm1_units},
          {"lstm2_units", c.arch.lstm2_units},
          {"graph_units", c.arch.graph_units},
          {"dropout_rate", c.arch.dropout_rate},
          {"rho_init", c.arch.init.rho},
          {"eta_init", c.arch.init.eta}}},
        {"seed", c.seed},
    };
}

TrainingConfig config_from_json(const nlohmann::json& j) {
    TrainingConfig c;
    try {
        c.mode = regime_from_string(j.at("mode").get<std::string>());
        c.epochs = j.at("epochs").get<std::size_t>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.batch_size = j.at("batch_size").get<std::size_t>();
        c.alpha_kl = j.at("alpha_kl").get<double>();
        c.scale_kl_by_batches = j.at("scale_kl_by_batches").get<bool>();
        c.kl_mc_samples = j.at("kl_mc_samples").get<std::size_t>();
        c.window = j.at("window").get<std::size_t>();
        c.horizon = j.at("horizon").get<std::size_t>();
        c.prior = j.at("prior").get<std::string>();
        c.prior_std = j.at("prior_std").get<double>();
        c.mixture_weight = j.at("mixture_weight").get<double>();
        c.mixture_std2 = j.at("mixture_std2").get<double>();
        c.sharpening = j.at("sharpening").get<bool>();
        c.sharpening_sigma0 = j.at("sharpening_sigma0").get<double>();
        c.sharpen_head = j.at("sharpen_head").get<bool>();
        c.patience = j.at("patience").get<std::size_t>();
        c.max_windows_per_epoch = j.at("max_windows_per_epoch").get<std::size_t>();
        c.max_validation_windows = j.at("max_validation_windows").get<std::size_t>();
        c.test_year = j.at("test_year").get<std::size_t>();
        c.val_fraction = j.at("val_fraction").get<double>();
        c.weeks_per_year = j.at("weeks_per_year").get<std::size_t>();
        c.sigma_dk2 = j.at("sigma_dk2").get<double>();
        c.squared_distance = j.at("squared_distance").get<bool>();
        c.kernel_cutoff = j.at("kernel_cutoff").get<double>();
        c.independent_shore = j.at("independent_shore").get<bool>();
        c.shore_radius = j.at("shore_radius").get<double>();
        c.shore_min_neighbors = j.at("shore_min_neighbors").get<std::size_t>();
        const auto& a = j.at("architecture");
        c.arch.features = a.at("features").get<std::size_t>();
        c.arch.lstm1_units = a.at("lstm1_units").get<std::size_t>();
        c.arch.lstm2_units = a.at("lstm2_units").get<std::size_t>();
        c.arch.graph_units = a.at("graph_units").get<std::size_t>();
        c.arch.dropout_rate = a.at("dropout_rate").get<double>();
        c.arch.init.rho = a.at("rho_init").get<double>();
        c.arch.init.eta = a.at("eta_init").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("training config: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Splitting

std::size_t DatasetSplit::test_begin() const { return test_weeks.empty() ? 0 : test_weeks.front() * week_length; }

std::size_t DatasetSplit::test_end() const {
    return test_weeks.empty() ? 0 : std::min(steps, (test_weeks.back() + 1) * week_length);
}

bool DatasetSplit::window_inside(std::size_t begin, std::size_t length, WeekRole role) const {
    if (length == 0 || begin + length > steps) return false;
    for (std::size_t w = week_of(begin); w <= week_of(begin + length - 1); ++w) {
        if (roles[w] != role) return false;
    }
    return true;
}

std::vector<std::size_t> DatasetSplit::windows(WeekRole role, std::size_t length, std::size_t stride) const {
    if (stride == 0) throw ContractError("windows: stride must be positive");
    std::vector<std::size_t> out;
    if (length == 0 || length > steps) return out;
    for (std::size_t s = 0; s + length <= steps; s += stride) {
        if (window_inside(s, length, role)) out.push_back(s);
    }
    return out;
}

DatasetSplit split_weekly(std::size_t steps, std::size_t test_year, double val_fraction, std::uint64_t seed,
                          std::size_t weeks_per_year, std::size_t week_length) {
    if (week_length == 0 || weeks_per_year == 0) throw ContractError("split_weekly: week sizes must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ContractError("split_weekly: val_fraction must lie in [0, 1)");
    const std::size_t full_weeks = steps / week_length;
    const std::size_t weeks = (steps + week_length - 1) / week_length;
    const std::size_t test_first = test_year * weeks_per_year;
    if (test_first + weeks_per_year > full_weeks || weeks <= weeks_per_year) {
        throw ContractError("split_weekly: " + std::to_string(steps) + " hours hold " + std::to_string(full_weeks) +
                            " full weeks, too short for test year " + std::to_string(test_year) +
                            " plus training weeks");
    }
    DatasetSplit split;
    split.week_length = week_length;
    split.steps = steps;
    split.roles.assign(weeks, WeekRole::Train);
    std::vector<std::size_t> pool;
    for (std::size_t w = 0; w < weeks; ++w) {
        if (w >= test_first && w < test_first + weeks_per_year) {
            split.roles[w] = WeekRole::Test;
            split.test_weeks.push_back(w);
        } else {
            pool.push_back(w);
        }
    }
    Rng rng(seed);
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(pool.size())));
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (i < n_val) {
            split.roles[pool[i]] = WeekRole::Validation;
            split.validation_weeks.push_back(pool[i]);
        } else {
            split.train_weeks.push_back(pool[i]);
        }
    }
    std::sort(split.train_weeks.begin(), split.train_weeks.end());
    std::sort(split.validation_weeks.begin(), split.validation_weeks.end());
    return split;
}

DatasetSplit split_weekly(const SpatioTemporalDataset& ds, std::size_t test_year, double val_fraction,
                          std::uint64_t seed, std::size_t weeks_per_year) {
    return split_weekly(ds.steps, test_year, val_fraction, seed, weeks_per_year);
}

// ---------------------------------------------------------------------------
// Standardization

Standardizer Standardizer::fit(const SpatioTemporalDataset& ds, const DatasetSplit& split) {
    if (split.steps != ds.steps) throw DimensionError("standardizer: split does not match the dataset length");
    const std::size_t d_count = ds.channels;
    std::vector<double> sum(d_count, 0.0), sum2(d_count, 0.0);
    double y_sum = 0.0, y_sum2 = 0.0;
    std::size_t rows = 0, y_count = 0;
    for (std::size_t t = 0; t < ds.steps; ++t) {
        if (split.roles[split.week_of(t)] != WeekRole::Train) continue;
        for (std::size_t n = 0; n < ds.nodes; ++n) {
            for (std::size_t d = 0; d < d_count; ++d) {
                const double v = ds.feature(t, n, d);
                sum[d] += v;
                sum2[d] += v * v;
            }
            ++rows;
            if (ds.is_valid(t, n)) {
                y_sum += ds.target(t, n);
                y_sum2 += ds.target(t, n) * ds.target(t, n);
                ++y_count;
            }
        }
    }
    if (rows == 0) throw DataError("standardizer: no training hours");
    if (y_count == 0) throw DataError("standardizer: no valid training targets");
    auto spread = [](double s, double s2, double n) {
        const double m = s / n;
        const double var = std::max(0.0, s2 / n - m * m);
        const double sd = std::sqrt(var);
        return sd > 1e-12 ? sd : 1.0;
    };
    Standardizer st;
    for (std::size_t d = 0; d < d_count; ++d) {
        st.feature_mean.push_back(sum[d] / static_cast<double>(rows));
        st.feature_std.push_back(spread(sum[d], sum2[d], static_cast<double>(rows)));
    }
    st.target_mean = y_sum / static_cast<double>(y_count);
    st.target_std = spread(y_sum, y_sum2, static_cast<double>(y_count));
    return st;
}

std::vector<double> Standardizer::features(const SpatioTemporalDataset& ds) const {
    if (ds.channels != feature_mean.size()) {
        throw DimensionError("standardizer: fitted on " + std::to_string(feature_mean.size()) +
                             " channels, dataset has " + std::to_string(ds.channels));
    }
    std::vector<double> out(ds.features.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t d = i % ds.channels;
        out[i] = (ds.features[i] - feature_mean[d]) / feature_std[d];
    }
    return out;
}

std::vector<double> Standardizer::targets(const SpatioTemporalDataset& ds) const {
    std::vector<double> out(ds.targets.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (ds.targets[i] - target_mean) / target_std;
    return out;
}

double Standardizer::log_variance_to_original(double s) const { return s + 2.0 * std::log(target_std); }

nlohmann::json standardizer_to_json(const Standardizer& s) {
    return {{"feature_mean", s.feature_mean},
            {"feature_std", s.feature_std},
            {"target_mean", s.target_mean},
            {"target_std", s.target_std}};
}

Standardizer standardizer_from_json(const nlohmann::json& j) {
    Standardizer s;
    try {
        s.feature_mean = j.at("feature_mean").get<std::vector<double>>();
        s.feature_std = j.at("feature_std").get<std::vector<double>>();
        s.target_mean = j.at("target_mean").get<double>();
        s.target_std = j.at("target_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("standardizer: ") + e.what());
    }
    if (s.feature_mean.size() != s.feature_std.size()) throw DataError("standardizer: mean/std length mismatch");
    return s;
}

// ---------------------------------------------------------------------------
// Objectives

std::optional<Tensor> masked_mse(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask) {
    if (pred.shape() != target.shape() || pred.size() != mask.size()) {
        throw DimensionError("masked_mse: prediction " + shape_string(pred.shape()) + ", target " +
                             shape_string(target.shape()) + ", mask of " + std::to_string(mask.size()));
    }
    const std::size_t valid = count_valid(mask);
    if (valid == 0) return std::nullopt;
    const Tensor m = mask_tensor(pred.shape(), mask);
    // Invalid targets may hold NaN; zero them so 0 * NaN never appears.
    std::vector<double> y(target.data().begin(), target.data().end());
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!mask[i]) y[i] = 0.0;
    }
    const Tensor r = sub(pred, Tensor(target.shape(), std::move(y)));
    return scale(sum(mul(square(r), m)), 1.0 / static_cast<double>(valid));
}

std::optional<LossTerms> loss_btnn(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask,
                                   const Tensor& kl, const Tensor& ps) {
    auto mse = masked_mse(pred, target, mask);
    if (!mse) return std::nullopt;
    LossTerms out{add(add(*mse, kl), ps), mse->item(), kl.item(), ps.item()};
    return out;
}

std::optional<LossTerms> loss_bstnn(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask,
                                    const Tensor& kl) {
    auto mse = masked_mse(pred, target, mask);
    if (!mse) return std::nullopt;
    LossTerms out{add(*mse, kl), mse->item(), kl.item(), 0.0};
    return out;
}

std::optional<Tensor> loss_compbnn(const Tensor& y, const Tensor& y_hat, const Tensor& s,
                                   std::span<const std::uint8_t> mask) {
    if (y.shape() != y_hat.shape() || y.shape() != s.shape() || y.size() != mask.size()) {
        throw DimensionError("loss_compbnn: y " + shape_string(y.shape()) + ", y_hat " + shape_string(y_hat.shape()) +
                             ", s " + shape_string(s.shape()) + ", mask of " + std::to_string(mask.size()));
    }
    const std::size_t valid = count_valid(mask);
    if (valid == 0) return std::nullopt;
    std::vector<double> yv(y.data().begin(), y.data().end());
    for (std::size_t i = 0; i < yv.size(); ++i) {
        if (!mask[i]) yv[i] = 0.0;
    }
    const Tensor s_c = clamp(s, -kLogVarianceClamp, kLogVarianceClamp);
    const Tensor r2 = square(sub(Tensor(y.shape(), std::move(yv)), y_hat));
    const Tensor per_point = scale(add(mul(exp(neg(s_c)), r2), s_c), 0.5);
    return scale(sum(mul(per_point, mask_tensor(y.shape(), mask))), 1.0 / static_cast<double>(valid));
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Tensor*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.learning_rate > 0.0)) throw ContractError("Adam: learning rate must be positive");
    for (const Tensor* p : params_) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
    }
}

bool Adam::step() {
    for (const Tensor* p : params_) {
        for (double g : p->grad()) {
            if (!std::isfinite(g)) return false;
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = *params_[k];
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            w[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
        }
    }
    return true;
}

void Adam::zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Per-batch objectives

std::optional<LossTerms> btnn_objective(const BTNNModel& model, const Tensor& x, const Tensor& y,
                                        std::span<const std::uint8_t> mask, const TrainingConfig& cfg,
                                        const Prior& prior, double kl_scale, NoiseSource& noise) {
    const auto params = model.parameters();
    const std::size_t count = params.size();
    std::vector<Tensor> eps;
    eps.reserve(count);
    for (const auto* p : params) eps.push_back(noise.standard_normal(p->shape()));

    WeightSample w;
    for (std::size_t i = 0; i < count; ++i) w.weights.push_back(sample_weight(*params[i], eps[i]));
    Tensor ps = Tensor::scalar(0.0);

    if (cfg.sharpening) {
        const SharpeningConfig sharp{cfg.sharpening_sigma0, true};
        const std::size_t sharpened = cfg.sharpen_head ? count : model.temporal_parameter_count();
        // First pass: data-loss gradient at the sampled weights, held constant.
        std::vector<Tensor> grads;
        {
            Tape first;
            TapeScope scope(first);
            WeightSample leaves;
            for (const Tensor& wi : w.weights) {
                leaves.weights.push_back(Tensor::parameter(wi.shape(), {wi.data().begin(), wi.data().end()}));
            }
            const auto mse = masked_mse(model.forward(x, leaves, cfg.horizon), y, mask);
            if (!mse) return std::nullopt;
            first.backward(*mse);
            for (const Tensor& leaf : leaves.weights) {
                grads.emplace_back(leaf.shape(), std::vector<double>(leaf.grad().begin(), leaf.grad().end()));
            }
        }
        for (std::size_t i = 0; i < sharpened; ++i) {
            if (!params[i]->eta) continue;
            const Tensor eps2 = noise.standard_normal(params[i]->shape());
            w.weights[i] = sharpen(w.weights[i], grads[i], *params[i], sharp, eps2);
            ps = add(ps, sharpening_loss(*params[i]->eta, grads[i], sharp));
        }
    }
    const Tensor pred = model.forward(x, w, cfg.horizon);
    const Tensor kl = scale(kl_loss(params, prior, cfg.alpha_kl, noise, cfg.kl_mc_samples), kl_scale);
    return loss_btnn(pred, y, mask, kl, ps);
}

std::optional<LossTerms> spatial_objective(const BSTNNModel& model, const Tensor& x, const Tensor& y,
                                           std::span<const std::uint8_t> mask, const TrainingConfig& cfg,
                                           const Prior& prior, double kl_scale, bool train_temporal,
                                           NoiseSource& noise) {
    const auto params = model.parameters();
    const std::size_t temporal = model.temporal_parameter_count();
    WeightSample w;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor eps = noise.standard_normal(params[i]->shape());
        if (!train_temporal && i < temporal) {
            NoGradScope frozen;
            w.weights.push_back(sample_weight(*params[i], eps));
        } else {
            w.weights.push_back(sample_weight(*params[i], eps));
        }
    }
    const Tensor pred = model.forward(x, w, cfg.horizon);
    const std::span<const VariationalParameter* const> trainable =
        train_temporal ? std::span<const VariationalParameter* const>(params)
                       : std::span<const VariationalParameter* const>(params).subspan(temporal);
    const Tensor kl = scale(kl_loss(trainable, prior, cfg.alpha_kl, noise, cfg.kl_mc_samples), kl_scale);
    return loss_bstnn(pred, y, mask, kl);
}

std::optional<LossTerms> compbnn_objective(const CompBNNModel& model, const Tensor& x, const Tensor& y,
                                           std::span<const std::uint8_t> mask, const TrainingConfig& cfg, Rng& rng) {
    const auto out = model.forward(x, rng, DropoutMode::Stochastic, cfg.horizon);
    auto loss = loss_compbnn(y, out.mean, out.log_var, mask);
    if (!loss) return std::nullopt;
    const auto mse = masked_mse(out.mean, y, mask);
    LossTerms terms{*loss, mse->item(), 0.0, 0.0};
    return terms;
}

// ---------------------------------------------------------------------------
// Training

SpatialGraph training_graph(const TrainingConfig& cfg, const SpatioTemporalDataset& ds) {
    DiffusionKernelOptions opts;
    opts.cutoff = cfg.kernel_cutoff;
    opts.squared_distance = cfg.squared_distance;
    std::vector<std::size_t> independent;
    if (cfg.independent_shore) independent = detect_shore_nodes(ds.coords, cfg.shore_radius, cfg.shore_min_neighbors);
    return dataset_graph(ds, cfg.sigma_dk2, opts, independent);
}

TrainingResult train(const TrainingConfig& cfg_in, const SpatioTemporalDataset& ds, const DatasetSplit& split,
                     const TrainedModel* from, std::ostream* log) {
    TrainingConfig cfg = cfg_in;
    cfg.arch.features = ds.channels;
    cfg.validate();
    ds.validate();
    if (split.steps != ds.steps) throw DimensionError("train: split does not match the dataset length");
    const Regime regime = cfg.mode;
    if (regime == Regime::PT && (!from || kind_of(from->model) != ModelKind::BTNN)) {
        throw ContractError("PT training needs a trained BTNN checkpoint (--from)");
    }
    if (regime == Regime::FT && (!from || kind_of(from->model) != ModelKind::BSTNN)) {
        throw ContractError("FT training needs a PT checkpoint (--from)");
    }

    TrainingResult result;
    Standardizer& st = result.trained.standardizer;
    st = from ? from->standardizer : Standardizer::fit(ds, split);
    Rng init_rng(derive_seed(cfg.seed, kStreamInit));
    Rng shuffle_rng(derive_seed(cfg.seed, kStreamShuffle));
    Rng noise(derive_seed(cfg.seed, kStreamNoise));
    const Prior prior = cfg.make_prior();

    AnyModel& any = result.trained.model;
    switch (regime) {
    case Regime::BTNN: any = BTNNModel(cfg.arch, init_rng); break;
    case Regime::CompBNN: any = CompBNNModel(cfg.arch, init_rng); break;
    case Regime::JT: any = BSTNNModel(cfg.arch, training_graph(cfg, ds), init_rng); break;
    case Regime::PT:
        any = BSTNNModel::from_btnn(std::get<BTNNModel>(from->model), training_graph(cfg, ds), init_rng);
        break;
    case Regime::FT: {
        const auto& src = std::get<BSTNNModel>(from->model);
        if (src.graph().size() != ds.nodes) {
            throw DimensionError("FT: checkpoint graph has " + std::to_string(src.graph().size()) +
                                 " nodes, dataset has " + std::to_string(ds.nodes));
        }
        BSTNNModel copy = src;
        for (VariationalParameter* p : copy.parameters()) *p = p->clone();
        any = std::move(copy);
        break;
    }
    }
    if (const auto* m = std::get_if<BSTNNModel>(&any); m && m->graph().size() != ds.nodes) {
        throw DimensionError("graph node count differs from dataset node count");
    }
    if (from && st.feature_mean.size() != ds.channels) {
        throw DimensionError("checkpoint standardizer channel count differs from dataset");
    }

    Arrays arrays{ds.steps, ds.nodes, ds.channels, st.features(ds), st.targets(ds), ds.valid};
    const bool node_independent = regime == Regime::BTNN || regime == Regime::CompBNN;
    const auto train_starts = split.windows(WeekRole::Train, cfg.window, 1);
    auto val_starts = split.windows(WeekRole::Validation, cfg.window, cfg.horizon);
    std::vector<std::size_t> samples = node_independent ? temporal_samples(arrays, train_starts, cfg.window, cfg.horizon)
                                                        : spatial_samples(arrays, train_starts, cfg.window, cfg.horizon);
    std::vector<std::size_t> val_samples = node_independent ? temporal_samples(arrays, val_starts, cfg.window, cfg.horizon)
                                                            : spatial_samples(arrays, val_starts, cfg.window, cfg.horizon);
    if (samples.empty()) throw DataError("train: no training window has a valid target in its final steps");
    if (cfg.max_validation_windows && val_samples.size() > cfg.max_validation_windows) {
        Rng pick(derive_seed(cfg.seed, kStreamValidation));
        std::shuffle(val_samples.begin(), val_samples.end(), pick.engine());
        val_samples.resize(cfg.max_validation_windows);
        std::sort(val_samples.begin(), val_samples.end());
    }

    // Optimizer parameters for the active regime.
    std::vector<Tensor*> trainable;
    if (auto* m = std::get_if<BTNNModel>(&any)) {
        trainable = optimizer_tensors(m->parameters(), cfg.sharpening);
    } else if (auto* m = std::get_if<BSTNNModel>(&any)) {
        auto params = m->parameters();
        std::span<VariationalParameter* const> group(params);
        if (regime == Regime::PT) group = group.subspan(m->temporal_parameter_count());
        trainable = optimizer_tensors(group, false);
    } else {
        trainable = std::get<CompBNNModel>(any).tensors();
    }
    Adam adam(trainable, AdamConfig{cfg.learning_rate});

    const std::size_t per_epoch = cfg.max_windows_per_epoch ? std::min(cfg.max_windows_per_epoch, samples.size())
                                                            : samples.size();
    const std::size_t batches = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
    const double kl_scale = cfg.scale_kl_by_batches ? 1.0 / static_cast<double>(batches) : 1.0;
    const bool early_stopping = (regime == Regime::BTNN || regime == Regime::PT) && cfg.patience > 0 &&
                                !val_samples.empty();

    auto run_batch = [&](std::span<const std::size_t> chunk) -> std::optional<LossTerms> {
        if (node_independent) {
            const Batch b = temporal_batch(arrays, chunk, cfg.window, cfg.horizon);
            if (const auto* m = std::get_if<BTNNModel>(&any)) {
                return btnn_objective(*m, b.x, b.y, b.mask, cfg, prior, kl_scale, noise);
            }
            return compbnn_objective(std::get<CompBNNModel>(any), b.x, b.y, b.mask, cfg, noise);
        }
        const Batch b = spatial_batch(arrays, chunk, cfg.window, cfg.horizon);
        return spatial_objective(std::get<BSTNNModel>(any), b.x, b.y, b.mask, cfg, prior, kl_scale,
                                 regime != Regime::PT, noise);
    };

    auto validation_mse = [&]() -> std::optional<double> {
        if (val_samples.empty()) return std::nullopt;
        NoGradScope no_grad;
        double sse = 0.0;
        std::size_t count = 0;
        Rng unused(0);
        for (std::size_t begin = 0; begin < val_samples.size(); begin += cfg.batch_size) {
            const std::span<const std::size_t> chunk(val_samples.data() + begin,
                                                     std::min(cfg.batch_size, val_samples.size() - begin));
            Tensor pred;
            Batch b;
            if (node_independent) {
                b = temporal_batch(arrays, chunk, cfg.window, cfg.horizon);
                if (const auto* m = std::get_if<BTNNModel>(&any)) {
                    pred = m->forward(b.x, mean_weights(m->parameters()), cfg.horizon);
                } else {
                    pred = std::get<CompBNNModel>(any).forward(b.x, unused, DropoutMode::Deterministic, cfg.horizon).mean;
                }
            } else {
                b = spatial_batch(arrays, chunk, cfg.window, cfg.horizon);
                const auto& m = std::get<BSTNNModel>(any);
                pred = m.forward(b.x, mean_weights(m.parameters()), cfg.horizon);
            }
            const std::size_t valid = count_valid(b.mask);
            if (const auto mse = masked_mse(pred, b.y, b.mask)) {
                sse += mse->item() * static_cast<double>(valid);
                count += valid;
            }
        }
        if (count == 0) return std::nullopt;
        return sse / static_cast<double>(count);
    };

    if (log) {
        *log << "regime " << to_string(regime) << ": " << samples.size() << " training samples, "
             << val_samples.size() << " validation samples, " << per_epoch << " per epoch in " << batches
             << " batches\n";
    }

    std::optional<double> best_val;
    std::vector<std::vector<double>> best_state;
    std::size_t since_best = 0;
    const std::size_t epochs = cfg.effective_epochs();
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(samples.begin(), samples.end(), shuffle_rng.engine());
        EpochRecord rec;
        rec.epoch = epoch;
        std::size_t used = 0;
        for (std::size_t begin = 0; begin < per_epoch; begin += cfg.batch_size) {
            const std::span<const std::size_t> chunk(samples.data() + begin, std::min(cfg.batch_size, per_epoch - begin));
            ++rec.batches;
            Tape tape;
            std::optional<LossTerms> terms;
            {
                TapeScope scope(tape);
                terms = run_batch(chunk);
            }
            if (!terms) {
                ++rec.skipped_batches;
                continue;
            }
            const double total = terms->total.item();
            adam.zero_grad();
            tape.backward(terms->total);
            if (!std::isfinite(total) || !adam.step()) {
                ++rec.aborted_steps;
                continue;
            }
            rec.train_loss += total;
            rec.train_mse += terms->mse;
            rec.train_kl += terms->kl;
            rec.train_ps += terms->ps;
            ++used;
        }
        if (used == 0 && rec.aborted_steps > 0) {
            throw NumericError("epoch " + std::to_string(epoch) + ": every optimization step produced a non-finite loss or gradient");
        }
        if (used > 0) {
            const double u = static_cast<double>(used);
            rec.train_loss /= u;
            rec.train_mse /= u;
            rec.train_kl /= u;
            rec.train_ps /= u;
        }
        rec.validation_mse = validation_mse();
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);
        if (log) {
            std::ostringstream line;
            line << "epoch " << epoch << '/' << epochs << " loss=" << rec.train_loss << " mse=" << rec.train_mse
                 << " kl=" << rec.train_kl << " ps=" << rec.train_ps << " val_mse="
                 << (rec.validation_mse ? format_double(*rec.validation_mse) : std::string("n/a"))
                 << " skipped=" << rec.skipped_batches << " aborted=" << rec.aborted_steps << " time="
                 << std::fixed << std::setprecision(2) << rec.seconds << "s\n";
            *log << line.str() << std::flush;
        }
        if (rec.validation_mse && (!best_val || *rec.validation_mse < *best_val)) {
            best_val = rec.validation_mse;
            result.best_epoch = epoch;
            since_best = 0;
            if (early_stopping) best_state = snapshot(trainable);
        } else if (early_stopping && ++since_best >= cfg.patience) {
            if (log) *log << "early stop after epoch " << epoch << ", best epoch " << result.best_epoch << '\n';
            break;
        }
    }
    if (early_stopping && !best_state.empty()) {
        restore(trainable, best_state);
    } else if (!best_val) {
        result.best_epoch = result.history.size();
    }
    return result;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
    auto out = open_output(path);
    out << "epoch,train_loss,train_mse,train_kl,train_ps,validation_mse,batches,skipped_batches,aborted_steps\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.train_mse) << ','
            << format_double(r.train_kl) << ',' << format_double(r.train_ps) << ','
            << (r.validation_mse ? format_double(*r.validation_mse) : std::string()) << ',' << r.batches << ','
            << r.skipped_batches << ',' << r.aborted_steps << '\n';
    }
}

std::uint64_t parameter_hash(const AnyModel& model, ParameterGroup group) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto hash_params = [&](const std::vector<const VariationalParameter*>& params, std::size_t temporal) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const bool is_temporal = i < temporal;
            if (group == ParameterGroup::Temporal && !is_temporal) continue;
            if (group == ParameterGroup::Spatial && is_temporal) continue;
            for (const Tensor* t : params[i]->tensors()) hash_bytes(h, t->data());
        }
    };
    if (const auto* m = std::get_if<BTNNModel>(&model)) {
        hash_params(m->parameters(), m->temporal_parameter_count());
    } else if (const auto* m = std::get_if<BSTNNModel>(&model)) {
        hash_params(m->parameters(), m->temporal_parameter_count());
    } else {
        const auto tensors = std::get<CompBNNModel>(model).tensors();
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const bool is_temporal = i < 6;
            if (group == ParameterGroup::Temporal && !is_temporal) continue;
            if (group == ParameterGroup::Spatial && is_temporal) continue;
            hash_bytes(h, tensors[i]->data());
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Windowed prediction

PredictiveEnsemble forecast(const TrainedModel& trained, const SpatioTemporalDataset& ds, std::size_t begin,
                            std::size_t end, const ForecastOptions& opts) {
    ds.validate();
    if (opts.members == 0) throw ContractError("forecast: ensemble size must be at least 1");
    if (opts.horizon == 0 || opts.horizon > opts.window) throw ContractError("forecast: need 1 <= horizon <= window");
    if (begin >= end || end > ds.steps) {
        throw ContractError("forecast: empty or out-of-range span [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") for " + std::to_string(ds.steps) + " steps");
    }
    if (ds.steps < opts.window) {
        throw DataError("forecast: dataset has " + std::to_string(ds.steps) + " steps, window needs " +
                        std::to_string(opts.window));
    }
    if (const auto* m = std::get_if<BSTNNModel>(&trained.model); m && m->graph().size() != ds.nodes) {
        throw DimensionError("forecast: model graph has " + std::to_string(m->graph().size()) +
                             " nodes, dataset has " + std::to_string(ds.nodes));
    }
    const std::size_t window = opts.window;
    const std::size_t horizon = opts.horizon;
    const std::size_t nodes = ds.nodes;
    const std::size_t d_count = ds.channels;
    const std::vector<double> xs = trained.standardizer.features(ds);

    // Each job predicts hours [first, last) from the window starting at `start`
    // using its final `outputs` steps.
    struct Job {
        std::size_t start;
        std::size_t first;
        std::size_t last;
        std::size_t outputs;
    };
    std::vector<Job> regular, irregular;
    for (std::size_t first = begin; first < end; first += horizon) {
        const std::size_t last = std::min(first + horizon, end);
        const std::size_t start = last >= window ? last - window : 0;
        const std::size_t outputs = start + window - first;
        (outputs == horizon && last - first == horizon ? regular : irregular).push_back({start, first, last, outputs});
    }
    struct Chunk {
        std::vector<Job> jobs;
        Tensor x;
        std::size_t outputs;
    };
    std::vector<Chunk> chunks;
    auto add_chunk = [&](std::vector<Job> jobs) {
        const std::size_t b_count = jobs.size();
        const std::size_t row = nodes * d_count;
        std::vector<double> x(window * b_count * row);
        for (std::size_t b = 0; b < b_count; ++b) {
            for (std::size_t t = 0; t < window; ++t) {
                const double* src = &xs[(jobs[b].start + t) * row];
                std::copy(src, src + row, &x[(t * b_count + b) * row]);
            }
        }
        const std::size_t outputs = jobs.front().outputs;
        chunks.push_back({std::move(jobs), Tensor(Shape{window, b_count, nodes, d_count}, std::move(x)), outputs});
    };
    const std::size_t per_chunk = std::max<std::size_t>(1, opts.chunk_windows);
    for (std::size_t i = 0; i < regular.size(); i += per_chunk) {
        add_chunk({regular.begin() + static_cast<std::ptrdiff_t>(i),
                   regular.begin() + static_cast<std::ptrdiff_t>(std::min(regular.size(), i + per_chunk))});
    }
    for (const Job& j : irregular) add_chunk({j});

    PredictiveEnsemble ens;
    ens.members = opts.members;
    ens.steps = end - begin;
    ens.nodes = nodes;
    ens.samples.assign(ens.members * ens.steps * nodes, 0.0);
    const bool has_var = kind_of(trained.model) == ModelKind::CompBNN;
    if (has_var) ens.log_variances.emplace(ens.samples.size(), 0.0);
    const Standardizer& st = trained.standardizer;

    auto run_member = [&](std::size_t e) {
        const std::uint64_t member_seed = derive_seed(opts.seed, e);
        for (std::size_t c = 0; c < chunks.size(); ++c) {
            const Chunk& chunk = chunks[c];
            const PassOutput out = stochastic_pass(trained.model, chunk.x, derive_seed(member_seed, c), chunk.outputs);
            const std::size_t b_count = chunk.jobs.size();
            const auto mean = out.mean.data();
            for (std::size_t b = 0; b < b_count; ++b) {
                const Job& job = chunk.jobs[b];
                for (std::size_t h = job.first; h < job.last; ++h) {
                    const std::size_t p = h - job.first;
                    for (std::size_t n = 0; n < nodes; ++n) {
                        const std::size_t src = (p * b_count + b) * nodes + n;
                        const std::size_t dst = ens.index(e, h - begin, n);
                        ens.samples[dst] = st.to_original(mean[src]);
                        if (has_var) (*ens.log_variances)[dst] = st.log_variance_to_original(out.log_var->data()[src]);
                    }
                }
            }
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(opts.workers, 1, opts.members);
    if (workers == 1) {
        for (std::size_t e = 0; e < opts.members; ++e) run_member(e);
        return ens;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t e = next++; e < opts.members; e = next++) {
                try {
                    run_member(e);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return ens;
}

} // namespace bstnn
