#pragma once

// Bayesian dense / LSTM / graph-convolution layers and the MC-dropout dense
// layer of the comparison model.
//
// Bayesian layers own their variational parameters. A forward pass receives a
// span of already-sampled weight tensors in the order given by parameters(),
// so a single draw can be shared across every node and time step.

#include "bstnn/random.hpp"
#include "bstnn/tensor.hpp"
#include "bstnn/variational.hpp"

#include <span>
#include <string>
#include <vector>

namespace bstnn {

// Gate blocks are laid out as input, forget, candidate, output.
struct LstmWeights {
    Tensor input;     // [in, 4H]
    Tensor recurrent; // [H, 4H]
    Tensor bias;      // [4H]
};

struct LstmState {
    Tensor h; // [B, H]
    Tensor c; // [B, H]
};

LstmState lstm_zero_state(std::size_t batch, std::size_t hidden);

// One recurrence step: i, f, o = sigmoid, g = tanh,
// c' = f*c + i*g, h' = o*tanh(c').
LstmState lstm_step(const Tensor& x_t, const LstmState& state, const LstmWeights& w);

// Runs the recurrence over a time-major sequence x of shape [steps*B, in]
// (row t*B + b is sample b at step t) from a zero state. Returns the hidden
// outputs in the same layout, [steps*B, H]. With keep_last > 0 only the final
// keep_last steps are returned, [keep_last*B, H].
Tensor lstm_sequence(const Tensor& x, std::size_t steps, const LstmWeights& w, std::size_t keep_last = 0);

class BayesianDense {
public:
    BayesianDense() = default;
    BayesianDense(std::string name, std::size_t in, std::size_t out, Rng& rng,
                  const VariationalInit& init = {});

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

    std::vector<VariationalParameter*> parameters();
    std::vector<const VariationalParameter*> parameters() const;

    // x [R, in] -> [R, out] with weights = {W [in, out], b [out]}.
    Tensor forward(const Tensor& x, std::span<const Tensor> weights) const;

private:
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    VariationalParameter weight_;
    VariationalParameter bias_;
};

class BayesianLSTM {
public:
    static constexpr std::size_t kGates = 4;
    static constexpr std::size_t kParamCount = 3 * kGates;

    BayesianLSTM() = default;
    BayesianLSTM(std::string name, std::size_t in, std::size_t hidden, Rng& rng,
                 const VariationalInit& init = {});

    std::size_t in_features() const { return in_; }
    std::size_t hidden_size() const { return hidden_; }

    // W_g [in, H], U_g [H, H], b_g [H] for g in (input, forget, candidate, output).
    std::vector<VariationalParameter*> parameters();
    std::vector<const VariationalParameter*> parameters() const;

    // Deep copy with fresh parameter tensors.
    BayesianLSTM clone() const;

    // Stacks sampled per-gate tensors into the fused layout.
    LstmWeights assemble(std::span<const Tensor> weights) const;

    Tensor forward(const Tensor& x, std::size_t steps, std::span<const Tensor> weights,
                   std::size_t keep_last = 0) const;

private:
    std::size_t in_ = 0;
    std::size_t hidden_ = 0;
    std::vector<VariationalParameter> params_;
};

// Graph convolution with a Gaussian posterior over Theta [C_in, C_out].
class BayesianGraphConv {
public:
    BayesianGraphConv() = default;
    BayesianGraphConv(std::string name, std::size_t in_channels, std::size_t out_channels, Rng& rng,
                      const VariationalInit& init = {});

    std::size_t in_channels() const { return in_; }
    std::size_t out_channels() const { return out_; }

    std::vector<VariationalParameter*> parameters();
    std::vector<const VariationalParameter*> parameters() const;

    // h [R*N, C_in] in blocks of N node rows -> (S h) Theta, [R*N, C_out].
    Tensor forward(const Tensor& h, const Tensor& s_matrix, std::span<const Tensor> weights) const;

private:
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    VariationalParameter theta_;
};

// z[t, n, f] = sum_k (sum_j s[n, j] h[t, j, k]) theta[k, f] for h [T, N, K].
Tensor graph_conv_forward(const Tensor& h, const Tensor& s_matrix, const Tensor& theta);

// Same contraction on rows laid out as consecutive blocks of N nodes.
Tensor graph_conv_rows(const Tensor& h, const Tensor& s_matrix, const Tensor& theta);

// Deterministic-weight LSTM (comparison model).
struct PointLSTM {
    std::size_t in = 0;
    std::size_t hidden = 0;
    Tensor input;
    Tensor recurrent;
    Tensor bias;

    static PointLSTM create(std::size_t in, std::size_t hidden, Rng& rng);
    LstmWeights weights() const { return {input, recurrent, bias}; }
    std::vector<Tensor*> tensors() { return {&input, &recurrent, &bias}; }
};

enum class DropoutMode {
    Stochastic,    // masks drawn (training and MC inference alike)
    Deterministic, // expected value, no masking
};

// Inverted dropout: each unit zeroed with probability `rate`, survivors
// scaled by 1 / (1 - rate).
Tensor dropout(const Tensor& x, double rate, Rng& rng, DropoutMode mode = DropoutMode::Stochastic);

struct DropoutDense {
    Tensor weight; // [in, out]
    Tensor bias;   // [out]
    double rate = 0.0;

    static DropoutDense create(std::size_t in, std::size_t out, double rate, Rng& rng);
    std::vector<Tensor*> tensors() { return {&weight, &bias}; }
};

// Dropout on the layer input followed by the affine map.
Tensor mc_dropout_forward(const DropoutDense& layer, const Tensor& x, Rng& rng,
                          DropoutMode mode = DropoutMode::Stochastic);

} // namespace bstnn
