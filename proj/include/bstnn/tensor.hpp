#pragma once

// Dense row-major tensors of doubles with tape-based reverse-mode autodiff.
//
// Operations record themselves on the thread's active Tape (see TapeScope)
// whenever at least one operand requires a gradient. Without an active tape
// the same functions evaluate eagerly and record nothing, which is the
// inference path.
//
// Broadcasting: a binary operation accepts operands of equal shape, or operands
// where the shape of one is a trailing suffix of the other's shape. The shorter
// operand is repeated along the leading axes, e.g. [M, F] + [F] adds a bias row
// to every row, and [] (a scalar) combines with anything.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bstnn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Above this argument softplus(x) is evaluated as x + log1p(exp(-x)).
inline constexpr double kSoftplusLinearThreshold = 30.0;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor parameter(Shape shape, std::vector<double> data);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    // Writable view for leaves (parameters, inputs). Mutating a tensor that
    // already fed a recorded operation invalidates that record.
    std::span<double> mutable_data() { return impl_->data; }

    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t row, std::size_t col) const;
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();

    // Copy of the values, cut from the tape.
    Tensor detach() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor make_result(Shape shape, std::vector<double> data, bool requires_grad);

    std::shared_ptr<TensorImpl> impl_;
};

// Ordered log of primitive operations. Entries are appended as operations
// execute, so the log is always in topological order.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                std::shared_ptr<TensorImpl> output,
                BackwardFn backward);

    // Reverse sweep from a scalar root. Every tensor that fed a recorded
    // operation gets a grad buffer (zero if not reachable from the root).
    // Leaf gradients accumulate across calls; intermediate ones are reset.
    void backward(const Tensor& root);

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    // Tape active on the calling thread, or nullptr.
    static Tape* active();

private:
    struct Entry {
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        BackwardFn backward;
    };
    std::vector<Entry> entries_;

    friend class TapeScope;
};

// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Suspends recording on the current thread (e.g. for validation passes).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

// Elementwise arithmetic with leading-axis broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

// Elementwise nonlinearities.
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softplus(const Tensor& a);
// Gradient 1 inside [lo, hi], 0 outside.
Tensor clamp(const Tensor& a, double lo, double hi);

double softplus(double x);
double sigmoid(double x);

// [m, k] x [k, n] -> [m, n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Same data, new shape with equal element count.
Tensor reshape(const Tensor& a, Shape shape);

// Column/row slicing and concatenation of rank-2 tensors.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);

// For h of shape [R, K] with R a multiple of op.dim(0) = N, applies the
// constant [N, N] operator to every consecutive block of N rows:
// out[b*N + n, k] = sum_j op[n, j] * h[b*N + j, k].
Tensor block_left_matmul(const Tensor& op, const Tensor& h);

// Fused LSTM cell. gates is [B, 4H] holding pre-activations in the order
// input, forget, candidate, output; cell is [B, H]. Returns [B, 2H] holding
// (h', c') side by side.
Tensor lstm_cell(const Tensor& gates, const Tensor& cell);

// Elementwise log of a Gaussian mixture density sum_m w_m N(x | mean_m, std_m).
Tensor log_mixture_density(const Tensor& x,
                           std::span<const double> weights,
                           std::span<const double> means,
                           std::span<const double> stds);

} // namespace bstnn
