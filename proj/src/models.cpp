#include "bstnn/models.hpp"

#include "bstnn/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace bstnn {

namespace {

template <typename Layer>
void append(std::vector<VariationalParameter*>& out, Layer& layer) {
    for (auto* p : layer.parameters()) out.push_back(p);
}

template <typename Layer>
void append(std::vector<const VariationalParameter*>& out, const Layer& layer) {
    for (const auto* p : layer.parameters()) out.push_back(p);
}

std::span<const Tensor> slice(const WeightSample& w, std::size_t begin, std::size_t count) {
    if (begin + count > w.weights.size()) {
        throw ContractError("weight sample has " + std::to_string(w.weights.size()) +
                            " tensors, model needs at least " + std::to_string(begin + count));
    }
    return std::span<const Tensor>(w.weights).subspan(begin, count);
}

std::size_t resolve_output_steps(std::size_t steps, std::size_t output_steps) {
    if (output_steps == 0) return steps;
    if (output_steps > steps) {
        throw ContractError("output steps " + std::to_string(output_steps) + " exceed window length " +
                            std::to_string(steps));
    }
    return output_steps;
}

// [T, B, N, D] -> [T, B*N, D].
Tensor merge_batch_nodes(const Tensor& x) {
    if (x.rank() != 4) throw DimensionError("expected windows [T, B, N, D], got " + shape_string(x.shape()));
    return reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2), x.dim(3)});
}

double median_of(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

WeightSample sample_weights(std::span<const VariationalParameter* const> params, NoiseSource& noise) {
    WeightSample out;
    out.weights.reserve(params.size());
    for (const VariationalParameter* p : params) {
        out.weights.push_back(sample_weight(*p, noise.standard_normal(p->shape())));
    }
    return out;
}

WeightSample mean_weights(std::span<const VariationalParameter* const> params) {
    WeightSample out;
    out.weights.reserve(params.size());
    for (const VariationalParameter* p : params) out.weights.push_back(p->mu);
    return out;
}

// ---------------------------------------------------------------------------
// BTNN

BTNNModel::BTNNModel(const Architecture& arch, Rng& rng)
    : arch_(arch),
      lstm1_("temporal.lstm1", arch.features, arch.lstm1_units, rng, arch.init),
      lstm2_("temporal.lstm2", arch.lstm1_units, arch.lstm2_units, rng, arch.init),
      head_("btnn.head", arch.lstm2_units, 1, rng, arch.init) {}

std::vector<VariationalParameter*> BTNNModel::parameters() {
    std::vector<VariationalParameter*> out;
    append(out, lstm1_);
    append(out, lstm2_);
    append(out, head_);
    return out;
}

std::vector<const VariationalParameter*> BTNNModel::parameters() const {
    std::vector<const VariationalParameter*> out;
    append(out, lstm1_);
    append(out, lstm2_);
    append(out, head_);
    return out;
}

WeightSample BTNNModel::sample(NoiseSource& noise) const { return sample_weights(parameters(), noise); }

Tensor BTNNModel::forward(const Tensor& x, const WeightSample& w, std::size_t output_steps) const {
    if (x.rank() != 3 || x.dim(2) != arch_.features) {
        throw DimensionError("btnn: expected input [T, B, " + std::to_string(arch_.features) + "], got " +
                             shape_string(x.shape()));
    }
    const std::size_t steps = x.dim(0);
    const std::size_t batch = x.dim(1);
    const std::size_t out_steps = resolve_output_steps(steps, output_steps);
    constexpr std::size_t k = BayesianLSTM::kParamCount;
    const Tensor rows = reshape(x, Shape{steps * batch, arch_.features});
    const Tensor h1 = lstm1_.forward(rows, steps, slice(w, 0, k));
    const Tensor h2 = lstm2_.forward(h1, steps, slice(w, k, k), out_steps);
    const Tensor y = head_.forward(h2, slice(w, 2 * k, 2));
    return reshape(y, Shape{out_steps, batch});
}

Tensor BTNNModel::btnn_forward(const Tensor& x, NoiseSource& noise) const {
    if (x.rank() != 2) throw DimensionError("btnn_forward: expected [T, D], got " + shape_string(x.shape()));
    const Tensor batch = reshape(x, Shape{x.dim(0), 1, x.dim(1)});
    return reshape(forward(batch, sample(noise)), Shape{x.dim(0)});
}

// ---------------------------------------------------------------------------
// BSTNN

BSTNNModel::BSTNNModel(const Architecture& arch, SpatialGraph graph, Rng& rng)
    : arch_(arch),
      lstm1_("temporal.lstm1", arch.features, arch.lstm1_units, rng, arch.init),
      lstm2_("temporal.lstm2", arch.lstm1_units, arch.lstm2_units, rng, arch.init),
      graph1_("spatial.graph1", arch.lstm2_units, arch.graph_units, rng, arch.init),
      graph2_("spatial.graph2", arch.graph_units, arch.graph_units, rng, arch.init),
      head_("spatial.head", arch.graph_units, 1, rng, arch.init),
      graph_(std::move(graph)) {}

BSTNNModel BSTNNModel::from_btnn(const BTNNModel& btnn, SpatialGraph graph, Rng& rng) {
    BSTNNModel model(btnn.architecture(), std::move(graph), rng);
    model.lstm1_ = btnn.lstm1_.clone();
    model.lstm2_ = btnn.lstm2_.clone();
    return model;
}

std::vector<VariationalParameter*> BSTNNModel::parameters() {
    std::vector<VariationalParameter*> out;
    append(out, lstm1_);
    append(out, lstm2_);
    append(out, graph1_);
    append(out, graph2_);
    append(out, head_);
    return out;
}

std::vector<const VariationalParameter*> BSTNNModel::parameters() const {
    std::vector<const VariationalParameter*> out;
    append(out, lstm1_);
    append(out, lstm2_);
    append(out, graph1_);
    append(out, graph2_);
    append(out, head_);
    return out;
}

WeightSample BSTNNModel::sample(NoiseSource& noise) const { return sample_weights(parameters(), noise); }

Tensor BSTNNModel::temporal_features(const Tensor& rows, std::size_t steps, const WeightSample& w,
                                     std::size_t keep_last) const {
    constexpr std::size_t k = BayesianLSTM::kParamCount;
    return lstm2_.forward(lstm1_.forward(rows, steps, slice(w, 0, k)), steps, slice(w, k, k), keep_last);
}

Tensor BSTNNModel::forward(const Tensor& x, const WeightSample& w, std::size_t output_steps) const {
    if (x.rank() != 4 || x.dim(3) != arch_.features) {
        throw DimensionError("bstnn: expected input [T, B, N, " + std::to_string(arch_.features) +
                             "], got " + shape_string(x.shape()));
    }
    const std::size_t steps = x.dim(0);
    const std::size_t batch = x.dim(1);
    const std::size_t nodes = x.dim(2);
    if (nodes != graph_.size()) {
        throw DimensionError("bstnn: input has " + std::to_string(nodes) + " nodes, graph has " +
                             std::to_string(graph_.size()));
    }
    const std::size_t out_steps = resolve_output_steps(steps, output_steps);
    const std::size_t rows_per_step = batch * nodes;
    constexpr std::size_t k = BayesianLSTM::kParamCount;

    const Tensor rows = reshape(x, Shape{steps * rows_per_step, arch_.features});
    // The spatial model acts on each time step separately, so only the
    // requested steps are propagated.
    const Tensor h = temporal_features(rows, steps, w, out_steps);
    const Tensor& s = graph_.s_matrix();
    const Tensor g1 = relu(graph1_.forward(h, s, slice(w, 2 * k, 1)));
    const Tensor g2 = relu(graph2_.forward(g1, s, slice(w, 2 * k + 1, 1)));
    const Tensor y = head_.forward(g2, slice(w, 2 * k + 2, 2));
    return reshape(y, Shape{out_steps, batch, nodes});
}

Tensor BSTNNModel::bstnn_forward(const Tensor& x, NoiseSource& noise) const {
    if (x.rank() != 3) throw DimensionError("bstnn_forward: expected [T, N, D], got " + shape_string(x.shape()));
    const Tensor batch = reshape(x, Shape{x.dim(0), 1, x.dim(1), x.dim(2)});
    return reshape(forward(batch, sample(noise)), Shape{x.dim(0), x.dim(1)});
}

// ---------------------------------------------------------------------------
// Comparison model

CompBNNModel::CompBNNModel(const Architecture& arch, Rng& rng)
    : arch_(arch),
      lstm1_(PointLSTM::create(arch.features, arch.lstm1_units, rng)),
      lstm2_(PointLSTM::create(arch.lstm1_units, arch.lstm2_units, rng)),
      head_(DropoutDense::create(arch.lstm2_units, 2, arch.dropout_rate, rng)) {}

std::vector<Tensor*> CompBNNModel::tensors() {
    return {&lstm1_.input, &lstm1_.recurrent, &lstm1_.bias, &lstm2_.input,
            &lstm2_.recurrent, &lstm2_.bias, &head_.weight, &head_.bias};
}

std::vector<const Tensor*> CompBNNModel::tensors() const {
    return {&lstm1_.input, &lstm1_.recurrent, &lstm1_.bias, &lstm2_.input,
            &lstm2_.recurrent, &lstm2_.bias, &head_.weight, &head_.bias};
}

CompBNNModel::Output CompBNNModel::forward(const Tensor& x, Rng& rng, DropoutMode mode,
                                           std::size_t output_steps) const {
    if (x.rank() != 3 || x.dim(2) != arch_.features) {
        throw DimensionError("compbnn: expected input [T, B, " + std::to_string(arch_.features) +
                             "], got " + shape_string(x.shape()));
    }
    const std::size_t steps = x.dim(0);
    const std::size_t batch = x.dim(1);
    const std::size_t out_steps = resolve_output_steps(steps, output_steps);
    const Tensor rows = reshape(x, Shape{steps * batch, arch_.features});
    const Tensor h1 = dropout(lstm_sequence(rows, steps, lstm1_.weights()), arch_.dropout_rate, rng, mode);
    const Tensor h2 = lstm_sequence(h1, steps, lstm2_.weights(), out_steps);
    const Tensor out = mc_dropout_forward(head_, h2, rng, mode);
    return {reshape(slice_cols(out, 0, 1), Shape{out_steps, batch}),
            reshape(slice_cols(out, 1, 1), Shape{out_steps, batch})};
}

// ---------------------------------------------------------------------------
// Dispatch and ensembles

std::string to_string(ModelKind kind) {
    switch (kind) {
    case ModelKind::BTNN: return "BTNN";
    case ModelKind::BSTNN: return "BSTNN";
    case ModelKind::CompBNN: return "compBNN";
    }
    return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "BTNN") return ModelKind::BTNN;
    if (s == "BSTNN") return ModelKind::BSTNN;
    if (s == "compBNN") return ModelKind::CompBNN;
    throw DataError("unknown model kind '" + s + "'");
}

ModelKind kind_of(const AnyModel& model) { return static_cast<ModelKind>(model.index()); }

PassOutput stochastic_pass(const AnyModel& model, const Tensor& x, std::uint64_t seed,
                           std::size_t output_steps) {
    NoGradScope no_grad;
    Rng rng(seed);
    if (x.rank() != 4) throw DimensionError("expected windows [T, B, N, D], got " + shape_string(x.shape()));
    const std::size_t batch = x.dim(1);
    const std::size_t nodes = x.dim(2);
    const std::size_t out_steps = resolve_output_steps(x.dim(0), output_steps);
    const Shape out_shape{out_steps, batch, nodes};
    if (const auto* m = std::get_if<BSTNNModel>(&model)) {
        return {m->forward(x, m->sample(rng), output_steps), std::nullopt};
    }
    if (const auto* m = std::get_if<BTNNModel>(&model)) {
        return {reshape(m->forward(merge_batch_nodes(x), m->sample(rng), output_steps), out_shape), std::nullopt};
    }
    const auto& m = std::get<CompBNNModel>(model);
    auto out = m.forward(merge_batch_nodes(x), rng, DropoutMode::Stochastic, output_steps);
    return {reshape(out.mean, out_shape), reshape(out.log_var, out_shape)};
}

std::vector<double> PredictiveEnsemble::at(std::size_t t, std::size_t n) const {
    std::vector<double> out(members);
    for (std::size_t e = 0; e < members; ++e) out[e] = samples[index(e, t, n)];
    return out;
}

std::vector<double> PredictiveEnsemble::median() const {
    validate();
    std::vector<double> out(steps * nodes);
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t n = 0; n < nodes; ++n) {
            auto v = at(t, n);
            out[t * nodes + n] = median_of(v);
        }
    }
    return out;
}

void PredictiveEnsemble::validate() const {
    if (members == 0) throw ContractError("ensemble: needs at least one member");
    if (samples.size() != members * steps * nodes) {
        throw DimensionError("ensemble: " + std::to_string(samples.size()) + " samples for E=" +
                             std::to_string(members) + ", T=" + std::to_string(steps) +
                             ", N=" + std::to_string(nodes));
    }
    if (log_variances && log_variances->size() != samples.size()) {
        throw DimensionError("ensemble: log-variance count differs from sample count");
    }
}

PredictiveEnsemble predict_ensemble(const AnyModel& model, const Tensor& x, std::size_t members,
                                    std::uint64_t seed, std::size_t workers) {
    if (members == 0) throw ContractError("predict_ensemble: ensemble size must be at least 1");
    if (x.rank() != 3) throw DimensionError("predict_ensemble: expected [T, N, D], got " + shape_string(x.shape()));
    const std::size_t steps = x.dim(0);
    const std::size_t nodes = x.dim(1);
    const Tensor windows = reshape(x, Shape{steps, 1, nodes, x.dim(2)});

    PredictiveEnsemble ens;
    ens.members = members;
    ens.steps = steps;
    ens.nodes = nodes;
    ens.samples.resize(members * steps * nodes);
    const bool has_var = kind_of(model) == ModelKind::CompBNN;
    if (has_var) ens.log_variances.emplace(ens.samples.size());

    auto run_member = [&](std::size_t e) {
        const PassOutput out = stochastic_pass(model, windows, derive_seed(seed, e));
        std::copy(out.mean.data().begin(), out.mean.data().end(), ens.samples.begin() + e * steps * nodes);
        if (has_var) {
            std::copy(out.log_var->data().begin(), out.log_var->data().end(),
                      ens.log_variances->begin() + e * steps * nodes);
        }
    };
    workers = std::clamp<std::size_t>(workers, 1, members);
    if (workers == 1) {
        for (std::size_t e = 0; e < members; ++e) run_member(e);
        return ens;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t e = next++; e < members; e = next++) {
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

std::vector<double> compbnn_total_variance(const PredictiveEnsemble& ensemble, VarianceMode mode) {
    ensemble.validate();
    if (!ensemble.log_variances) throw ContractError("compbnn_total_variance: ensemble has no log-variances");
    if (ensemble.members < 2) throw ContractError("compbnn_total_variance: needs at least two members");
    const double e_count = static_cast<double>(ensemble.members);
    const auto& s = *ensemble.log_variances;
    std::vector<double> out(ensemble.steps * ensemble.nodes);
    for (std::size_t t = 0; t < ensemble.steps; ++t) {
        for (std::size_t n = 0; n < ensemble.nodes; ++n) {
            double sum_y = 0.0, sum_y2 = 0.0, aleatoric = 0.0;
            for (std::size_t e = 0; e < ensemble.members; ++e) {
                const std::size_t i = ensemble.index(e, t, n);
                const double y = ensemble.samples[i];
                sum_y += y;
                sum_y2 += y * y;
                const double var = std::exp(s[i]);
                aleatoric += mode == VarianceMode::MeanVariance ? var : var * var;
            }
            const double m = sum_y / e_count;
            out[t * ensemble.nodes + n] = sum_y2 / e_count - m * m + aleatoric / e_count;
        }
    }
    return out;
}

} // namespace bstnn
