#pragma once

// Model assemblies: the Bayesian temporal network (two Bayesian LSTMs and a
// Bayesian dense head), its spatio-temporal extension with two Bayesian graph
// convolutions, and the MC-dropout comparison network with a log-variance
// output.
//
// Input batches are time-major: x[t, b, n, d] for window b, node n, channel d.
// Internally rows are ordered (t, b, n), which makes the node axis a block of
// N consecutive rows for the graph convolutions and the (b, n) pairs the batch
// of the shared LSTM stack.

#include "bstnn/graph.hpp"
#include "bstnn/layers.hpp"
#include "bstnn/random.hpp"
#include "bstnn/tensor.hpp"
#include "bstnn/variational.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace bstnn {

struct Architecture {
    std::size_t features = 4;
    std::size_t lstm1_units = 16;
    std::size_t lstm2_units = 32;
    std::size_t graph_units = 64;
    double dropout_rate = 0.1;
    VariationalInit init;
};

// One realization of every variational parameter of a model, in parameters()
// order.
struct WeightSample {
    std::vector<Tensor> weights;
};

// Draws eps once per variational parameter and returns mu + softplus(rho)*eps.
WeightSample sample_weights(std::span<const VariationalParameter* const> params, NoiseSource& noise);
// eps = 0: the posterior means.
WeightSample mean_weights(std::span<const VariationalParameter* const> params);

class BTNNModel {
public:
    BTNNModel() = default;
    BTNNModel(const Architecture& arch, Rng& rng);

    const Architecture& architecture() const { return arch_; }

    std::vector<VariationalParameter*> parameters();
    std::vector<const VariationalParameter*> parameters() const;
    std::size_t temporal_parameter_count() const { return 2 * BayesianLSTM::kParamCount; }

    const BayesianLSTM& lstm1() const { return lstm1_; }
    const BayesianLSTM& lstm2() const { return lstm2_; }

    WeightSample sample(NoiseSource& noise) const;

    // x [T, B, D] -> predictions [P, B] for the last P = output_steps steps
    // (0 means all T).
    Tensor forward(const Tensor& x, const WeightSample& w, std::size_t output_steps = 0) const;

    // Single series x [T, D] -> one stochastic sample [T].
    Tensor btnn_forward(const Tensor& x, NoiseSource& noise) const;

private:
    friend class BSTNNModel;
    friend struct ModelCodec;

    Architecture arch_;
    BayesianLSTM lstm1_;
    BayesianLSTM lstm2_;
    BayesianDense head_;
};

class BSTNNModel {
public:
    BSTNNModel() = default;
    BSTNNModel(const Architecture& arch, SpatialGraph graph, Rng& rng);

    // Spatio-temporal model reusing (copies of) a trained temporal stack;
    // graph layers and head are freshly initialized.
    static BSTNNModel from_btnn(const BTNNModel& btnn, SpatialGraph graph, Rng& rng);

    const Architecture& architecture() const { return arch_; }
    const SpatialGraph& graph() const { return graph_; }

    // Temporal parameters first (both LSTMs), then the spatial group
    // (graph convolutions and head).
    std::vector<VariationalParameter*> parameters();
    std::vector<const VariationalParameter*> parameters() const;
    std::size_t temporal_parameter_count() const { return 2 * BayesianLSTM::kParamCount; }

    WeightSample sample(NoiseSource& noise) const;

    // x [T, B, N, D] -> predictions [P, B, N] for the last P = output_steps
    // steps (0 means all T).
    Tensor forward(const Tensor& x, const WeightSample& w, std::size_t output_steps = 0) const;

    // Single window x [T, N, D] -> one stochastic sample [T, N]. One weight
    // draw is shared by every node and time step.
    Tensor bstnn_forward(const Tensor& x, NoiseSource& noise) const;

    // Temporal features H for rows (t, b, n): [T*B*N, K], or only the final
    // keep_last steps.
    Tensor temporal_features(const Tensor& rows, std::size_t steps, const WeightSample& w,
                             std::size_t keep_last = 0) const;

private:
    friend struct ModelCodec;

    Architecture arch_;
    BayesianLSTM lstm1_;
    BayesianLSTM lstm2_;
    BayesianGraphConv graph1_;
    BayesianGraphConv graph2_;
    BayesianDense head_;
    SpatialGraph graph_;
};

class CompBNNModel {
public:
    struct Output {
        Tensor mean;    // [P, B]
        Tensor log_var; // [P, B], s = log sigma^2
    };

    CompBNNModel() = default;
    CompBNNModel(const Architecture& arch, Rng& rng);

    const Architecture& architecture() const { return arch_; }
    double dropout_rate() const { return arch_.dropout_rate; }

    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;

    // x [T, B, D]; dropout after the first LSTM and on the head input.
    Output forward(const Tensor& x, Rng& rng, DropoutMode mode = DropoutMode::Stochastic,
                   std::size_t output_steps = 0) const;

private:
    friend struct ModelCodec;

    Architecture arch_;
    PointLSTM lstm1_;
    PointLSTM lstm2_;
    DropoutDense head_;
};

enum class ModelKind { BTNN, BSTNN, CompBNN };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

using AnyModel = std::variant<BTNNModel, BSTNNModel, CompBNNModel>;

ModelKind kind_of(const AnyModel& model);

// One stochastic pass over windows x [T, B, N, D]. Node-independent models
// treat every (b, n) pair as its own series. Returns [P, B, N] means and, for
// the comparison model, log-variances.
struct PassOutput {
    Tensor mean;
    std::optional<Tensor> log_var;
};
PassOutput stochastic_pass(const AnyModel& model, const Tensor& x, std::uint64_t seed,
                           std::size_t output_steps = 0);

// E stochastic forward passes: samples[e, t, n].
struct PredictiveEnsemble {
    std::size_t members = 0;
    std::size_t steps = 0;
    std::size_t nodes = 0;
    std::vector<double> samples;
    std::optional<std::vector<double>> log_variances;

    std::size_t index(std::size_t e, std::size_t t, std::size_t n) const {
        return (e * steps + t) * nodes + n;
    }
    // The E samples at (t, n).
    std::vector<double> at(std::size_t t, std::size_t n) const;
    // Per-point ensemble median, [T, N].
    std::vector<double> median() const;
    void validate() const;
};

// Member e runs stochastic_pass with derive_seed(seed, e). Members are spread
// over `workers` threads; results do not depend on the worker count.
PredictiveEnsemble predict_ensemble(const AnyModel& model, const Tensor& x, std::size_t members,
                                    std::uint64_t seed, std::size_t workers = 1);

enum class VarianceMode {
    MeanVariance,   // aleatoric = mean of exp(s_e)
    PaperVerbatim,  // aleatoric = mean of exp(s_e)^2
};

// Epistemic spread plus aleatoric term, per point [T, N].
std::vector<double> compbnn_total_variance(const PredictiveEnsemble& ensemble,
                                           VarianceMode mode = VarianceMode::MeanVariance);

} // namespace bstnn
