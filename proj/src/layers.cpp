#include "bstnn/layers.hpp"

#include "bstnn/errors.hpp"

#include <array>
#include <cmath>

namespace bstnn {

namespace {

constexpr std::array<const char*, BayesianLSTM::kGates> kGateNames{"input", "forget", "cell", "output"};

void require_weights(std::span<const Tensor> weights, std::size_t expected, const char* layer) {
    if (weights.size() != expected) {
        throw ContractError(std::string(layer) + ": expected " + std::to_string(expected) +
                            " sampled tensors, got " + std::to_string(weights.size()));
    }
}

Tensor row_vector(const Tensor& v) { return reshape(v, Shape{1, v.size()}); }

} // namespace

LstmState lstm_zero_state(std::size_t batch, std::size_t hidden) {
    return {Tensor(Shape{batch, hidden}), Tensor(Shape{batch, hidden})};
}

LstmState lstm_step(const Tensor& x_t, const LstmState& state, const LstmWeights& w) {
    const std::size_t hidden = w.recurrent.dim(0);
    if (x_t.rank() != 2 || x_t.dim(1) != w.input.dim(0)) {
        throw DimensionError("lstm_step: input " + shape_string(x_t.shape()) +
                             " does not match input weights " + shape_string(w.input.shape()));
    }
    if (state.h.shape() != Shape{x_t.dim(0), hidden} || state.c.shape() != state.h.shape()) {
        throw DimensionError("lstm_step: state " + shape_string(state.h.shape()) + " / " +
                             shape_string(state.c.shape()) + " does not match batch " +
                             std::to_string(x_t.dim(0)) + " and hidden size " + std::to_string(hidden));
    }
    const Tensor gates = add(add(matmul(x_t, w.input), matmul(state.h, w.recurrent)), w.bias);
    const Tensor hc = lstm_cell(gates, state.c);
    return {slice_cols(hc, 0, hidden), slice_cols(hc, hidden, hidden)};
}

Tensor lstm_sequence(const Tensor& x, std::size_t steps, const LstmWeights& w, std::size_t keep_last) {
    if (x.rank() != 2 || steps == 0 || x.dim(0) % steps != 0) {
        throw DimensionError("lstm_sequence: input " + shape_string(x.shape()) +
                             " is not a time-major sequence of " + std::to_string(steps) + " steps");
    }
    if (x.dim(1) != w.input.dim(0)) {
        throw DimensionError("lstm_sequence: input " + shape_string(x.shape()) +
                             " does not match input weights " + shape_string(w.input.shape()));
    }
    if (keep_last > steps) {
        throw DimensionError("lstm_sequence: cannot keep " + std::to_string(keep_last) + " of " +
                             std::to_string(steps) + " steps");
    }
    const std::size_t keep = keep_last ? keep_last : steps;
    const std::size_t batch = x.dim(0) / steps;
    const std::size_t hidden = w.recurrent.dim(0);
    LstmState state = lstm_zero_state(batch, hidden);
    std::vector<Tensor> outputs;
    outputs.reserve(keep);
    for (std::size_t t = 0; t < steps; ++t) {
        Tensor gates = add(matmul(slice_rows(x, t * batch, batch), w.input), w.bias);
        if (t > 0) gates = add(gates, matmul(state.h, w.recurrent));
        const Tensor hc = lstm_cell(gates, state.c);
        state = {slice_cols(hc, 0, hidden), slice_cols(hc, hidden, hidden)};
        if (t + keep >= steps) outputs.push_back(state.h);
    }
    return outputs.size() == 1 ? outputs.front() : concat_rows(outputs);
}

// ---------------------------------------------------------------------------
// BayesianDense

BayesianDense::BayesianDense(std::string name, std::size_t in, std::size_t out, Rng& rng,
                             const VariationalInit& init)
    : in_(in), out_(out) {
    weight_ = VariationalParameter::create(name + ".weight", Shape{in, out}, in, rng, init);
    bias_ = VariationalParameter::create(name + ".bias", Shape{out}, in, rng, init);
}

std::vector<VariationalParameter*> BayesianDense::parameters() { return {&weight_, &bias_}; }
std::vector<const VariationalParameter*> BayesianDense::parameters() const { return {&weight_, &bias_}; }

Tensor BayesianDense::forward(const Tensor& x, std::span<const Tensor> weights) const {
    require_weights(weights, 2, "BayesianDense");
    return add(matmul(x, weights[0]), weights[1]);
}

// ---------------------------------------------------------------------------
// BayesianLSTM

BayesianLSTM::BayesianLSTM(std::string name, std::size_t in, std::size_t hidden, Rng& rng,
                           const VariationalInit& init)
    : in_(in), hidden_(hidden) {
    params_.reserve(kParamCount);
    for (std::size_t g = 0; g < kGates; ++g) {
        const std::string prefix = name + "." + kGateNames[g];
        params_.push_back(VariationalParameter::create(prefix + ".W", Shape{in, hidden}, in, rng, init));
        params_.push_back(VariationalParameter::create(prefix + ".U", Shape{hidden, hidden}, hidden, rng, init));
        VariationalInit bias_init = init;
        // Forget-gate bias starts at 1, the others at 0.
        bias_init.mu_constant = (g == 1) ? 1.0 : 0.0;
        params_.push_back(VariationalParameter::create(prefix + ".b", Shape{hidden}, hidden, rng, bias_init));
    }
}

std::vector<VariationalParameter*> BayesianLSTM::parameters() {
    std::vector<VariationalParameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const VariationalParameter*> BayesianLSTM::parameters() const {
    std::vector<const VariationalParameter*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
}

BayesianLSTM BayesianLSTM::clone() const {
    BayesianLSTM copy;
    copy.in_ = in_;
    copy.hidden_ = hidden_;
    for (const auto& p : params_) copy.params_.push_back(p.clone());
    return copy;
}

LstmWeights BayesianLSTM::assemble(std::span<const Tensor> weights) const {
    require_weights(weights, kParamCount, "BayesianLSTM");
    std::array<Tensor, kGates> ws, us, bs;
    for (std::size_t g = 0; g < kGates; ++g) {
        ws[g] = weights[3 * g];
        us[g] = weights[3 * g + 1];
        bs[g] = row_vector(weights[3 * g + 2]);
    }
    return {concat_cols(ws), concat_cols(us), reshape(concat_cols(bs), Shape{kGates * hidden_})};
}

Tensor BayesianLSTM::forward(const Tensor& x, std::size_t steps, std::span<const Tensor> weights,
                             std::size_t keep_last) const {
    return lstm_sequence(x, steps, assemble(weights), keep_last);
}

// ---------------------------------------------------------------------------
// Graph convolution

BayesianGraphConv::BayesianGraphConv(std::string name, std::size_t in_channels,
                                     std::size_t out_channels, Rng& rng, const VariationalInit& init)
    : in_(in_channels), out_(out_channels) {
    theta_ = VariationalParameter::create(name + ".theta", Shape{in_channels, out_channels}, in_channels,
                                          rng, init);
}

std::vector<VariationalParameter*> BayesianGraphConv::parameters() { return {&theta_}; }
std::vector<const VariationalParameter*> BayesianGraphConv::parameters() const { return {&theta_}; }

Tensor BayesianGraphConv::forward(const Tensor& h, const Tensor& s_matrix,
                                  std::span<const Tensor> weights) const {
    require_weights(weights, 1, "BayesianGraphConv");
    return graph_conv_rows(h, s_matrix, weights[0]);
}

Tensor graph_conv_rows(const Tensor& h, const Tensor& s_matrix, const Tensor& theta) {
    if (h.rank() != 2 || theta.rank() != 2 || h.dim(1) != theta.dim(0)) {
        throw DimensionError("graph_conv: features " + shape_string(h.shape()) +
                             " do not match theta " + shape_string(theta.shape()));
    }
    // (S H) Theta is cheaper than S (H Theta) when C_out > C_in; both are equal.
    if (theta.dim(1) >= theta.dim(0)) return matmul(block_left_matmul(s_matrix, h), theta);
    return block_left_matmul(s_matrix, matmul(h, theta));
}

Tensor graph_conv_forward(const Tensor& h, const Tensor& s_matrix, const Tensor& theta) {
    if (h.rank() != 3) {
        throw DimensionError("graph_conv_forward: expected [T, N, K], got " + shape_string(h.shape()));
    }
    const std::size_t steps = h.dim(0);
    const std::size_t nodes = h.dim(1);
    if (s_matrix.rank() != 2 || s_matrix.dim(0) != nodes || s_matrix.dim(1) != nodes) {
        throw DimensionError("graph_conv_forward: S " + shape_string(s_matrix.shape()) + " does not match " +
                             std::to_string(nodes) + " nodes");
    }
    const Tensor rows = reshape(h, Shape{steps * nodes, h.dim(2)});
    const Tensor z = graph_conv_rows(rows, s_matrix, theta);
    return reshape(z, Shape{steps, nodes, theta.dim(1)});
}

// ---------------------------------------------------------------------------
// Point-estimate layers and dropout

PointLSTM PointLSTM::create(std::size_t in, std::size_t hidden, Rng& rng) {
    PointLSTM layer;
    layer.in = in;
    layer.hidden = hidden;
    auto uniform = [&rng](std::size_t n, std::size_t fan_in) {
        const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<double> v(n);
        for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * k;
        return v;
    };
    layer.input = Tensor::parameter(Shape{in, 4 * hidden}, uniform(in * 4 * hidden, in));
    layer.recurrent = Tensor::parameter(Shape{hidden, 4 * hidden}, uniform(hidden * 4 * hidden, hidden));
    std::vector<double> bias(4 * hidden, 0.0);
    std::fill(bias.begin() + hidden, bias.begin() + 2 * hidden, 1.0);
    layer.bias = Tensor::parameter(Shape{4 * hidden}, std::move(bias));
    return layer;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, DropoutMode mode) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout: rate must lie in [0, 1)");
    if (mode == DropoutMode::Deterministic || rate == 0.0) return x;
    std::vector<double> mask(x.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
    return mul(x, Tensor(x.shape(), std::move(mask)));
}

DropoutDense DropoutDense::create(std::size_t in, std::size_t out, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("DropoutDense: rate must lie in [0, 1)");
    DropoutDense layer;
    const double k = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (double& v : w) v = (2.0 * rng.uniform() - 1.0) * k;
    layer.weight = Tensor::parameter(Shape{in, out}, std::move(w));
    layer.bias = Tensor::parameter(Shape{out}, std::vector<double>(out, 0.0));
    layer.rate = rate;
    return layer;
}

Tensor mc_dropout_forward(const DropoutDense& layer, const Tensor& x, Rng& rng, DropoutMode mode) {
    return add(matmul(dropout(x, layer.rate, rng, mode), layer.weight), layer.bias);
}

} // namespace bstnn
