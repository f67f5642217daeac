#include "bstnn/tensor.hpp"

#include "bstnn/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace bstnn {

Tensor make_result(Shape shape, std::vector<double> data, bool requires_grad);

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapConst = Eigen::Map<const RowMatrix>;
using MapMut = Eigen::Map<RowMatrix>;

thread_local Tape* g_active_tape = nullptr;

void ensure_grad(TensorImpl& t) {
    if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(what) + ": expected a rank-2 tensor, got " +
                             shape_string(t.shape()));
    }
}

// Records `fn` if any input requires a gradient and a tape is active.
template <typename Fn>
void maybe_record(std::initializer_list<const Tensor*> inputs, const Tensor& out, Fn&& fn) {
    if (!out.requires_grad()) return;
    std::vector<std::shared_ptr<TensorImpl>> in;
    in.reserve(inputs.size());
    for (const Tensor* t : inputs) in.push_back(t->impl());
    Tape::active()->record(std::move(in), out.impl(), std::forward<Fn>(fn));
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->requires_grad(); });
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA dfa, DB dfb) {
    const bool a_big = is_suffix(b.shape(), a.shape());
    if (!a_big && !is_suffix(a.shape(), b.shape())) {
        throw DimensionError(std::string(name) + ": shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()) + " are not broadcastable");
    }
    const Shape& out_shape = a_big ? a.shape() : b.shape();
    const std::size_t n = numel(out_shape);
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    if (na == n && nb == n) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i % na], pb[i % nb]);
    }
    Tensor result = make_result(out_shape, std::move(out), wants_grad({&a, &b}));
    maybe_record({&a, &b}, result,
                 [ai = a.impl(), bi = b.impl(), oi = result.impl().get(), dfa, dfb]() {
                     const std::size_t n = oi->data.size();
                     const std::size_t na = ai->data.size();
                     const std::size_t nb = bi->data.size();
                     const double* g = oi->grad.data();
                     const double* pa = ai->data.data();
                     const double* pb = bi->data.data();
                     if (ai->requires_grad) {
                         double* ga = ai->grad.data();
                         for (std::size_t i = 0; i < n; ++i) {
                             ga[i % na] += g[i] * dfa(pa[i % na], pb[i % nb]);
                         }
                     }
                     if (bi->requires_grad) {
                         double* gb = bi->grad.data();
                         for (std::size_t i = 0; i < n; ++i) {
                             gb[i % nb] += g[i] * dfb(pa[i % na], pb[i % nb]);
                         }
                     }
                 });
    return result;
}

// dfdx receives (x, y) where y = fwd(x).
template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& a, Fwd fwd, Deriv dfdx) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    Tensor result = make_result(a.shape(), std::move(out), wants_grad({&a}));
    maybe_record({&a}, result, [ai = a.impl(), oi = result.impl().get(), dfdx]() {
        if (!ai->requires_grad) return;
        const std::size_t n = oi->data.size();
        for (std::size_t i = 0; i < n; ++i) {
            ai->grad[i] += oi->grad[i] * dfdx(ai->data[i], oi->data[i]);
        }
    });
    return result;
}

} // namespace

Tensor make_result(Shape shape, std::vector<double> data, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) { impl_->shape = {0}; }

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
    if (numel(shape) != data.size()) {
        throw DimensionError("tensor: shape " + shape_string(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("tensor: ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_string(shape()));
    }
    return impl_->shape[axis];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw DimensionError("tensor: at(row, col) needs rank 2");
    return impl_->data[row * impl_->shape[1] + col];
}

double Tensor::item() const {
    if (size() != 1) {
        throw DimensionError("tensor: item() on non-scalar shape " + shape_string(shape()));
    }
    return impl_->data[0];
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output,
                  BackwardFn backward) {
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& root) {
    if (root.size() != 1) {
        throw ContractError("backward: root must be a scalar, got shape " +
                            shape_string(root.shape()));
    }
    if (!root.requires_grad()) return;
    for (auto& e : entries_) e.output->grad.assign(e.output->data.size(), 0.0);
    for (auto& e : entries_) {
        for (auto& in : e.inputs) {
            if (in->requires_grad) ensure_grad(*in);
        }
    }
    ensure_grad(*root.impl());
    root.impl()->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
    return unary_op(
        a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary_op(
        a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

double softplus(double x) {
    if (x > kSoftplusLinearThreshold) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw DomainError("clamp: lower bound exceeds upper bound");
    return unary_op(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return x >= lo && x <= hi ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a, [](double x) { return softplus(x); }, [](double x, double) { return sigmoid(x); });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()));
    }
    std::vector<double> out(m * n);
    MapMut(out.data(), m, n).noalias() =
        MapConst(a.data().data(), m, k) * MapConst(b.data().data(), k, n);
    Tensor result = make_result(Shape{m, n}, std::move(out), wants_grad({&a, &b}));
    maybe_record({&a, &b}, result, [ai = a.impl(), bi = b.impl(), oi = result.impl().get(), m, k, n]() {
        MapConst g(oi->grad.data(), m, n);
        if (ai->requires_grad) {
            MapMut(ai->grad.data(), m, k).noalias() += g * MapConst(bi->data.data(), k, n).transpose();
        }
        if (bi->requires_grad) {
            MapMut(bi->grad.data(), k, n).noalias() += MapConst(ai->data.data(), m, k).transpose() * g;
        }
    });
    return result;
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor result = make_result(Shape{}, {s}, wants_grad({&a}));
    maybe_record({&a}, result, [ai = a.impl(), oi = result.impl().get()]() {
        if (!ai->requires_grad) return;
        const double g = oi->grad[0];
        for (double& v : ai->grad) v += g;
    });
    return result;
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                             shape_string(shape));
    }
    std::vector<double> data(a.data().begin(), a.data().end());
    Tensor result = make_result(std::move(shape), std::move(data), wants_grad({&a}));
    maybe_record({&a}, result, [ai = a.impl(), oi = result.impl().get()]() {
        if (!ai->requires_grad) return;
        for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
    return result;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    require_rank2(a, "slice_cols");
    const std::size_t rows = a.dim(0);
    const std::size_t cols = a.dim(1);
    if (begin + count > cols) {
        throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") out of range for " +
                             shape_string(a.shape()));
    }
    std::vector<double> out(rows * count);
    const double* src = a.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(src + r * cols + begin, count, out.data() + r * count);
    }
    Tensor result = make_result(Shape{rows, count}, std::move(out), wants_grad({&a}));
    maybe_record({&a}, result, [ai = a.impl(), oi = result.impl().get(), rows, cols, begin, count]() {
        if (!ai->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            double* dst = ai->grad.data() + r * cols + begin;
            const double* g = oi->grad.data() + r * count;
            for (std::size_t c = 0; c < count; ++c) dst[c] += g[c];
        }
    });
    return result;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require_rank2(a, "slice_rows");
    const std::size_t rows = a.dim(0);
    const std::size_t cols = a.dim(1);
    if (begin + count > rows) {
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") out of range for " +
                             shape_string(a.shape()));
    }
    const double* src = a.data().data() + begin * cols;
    std::vector<double> out(src, src + count * cols);
    Tensor result = make_result(Shape{count, cols}, std::move(out), wants_grad({&a}));
    maybe_record({&a}, result, [ai = a.impl(), oi = result.impl().get(), begin, cols]() {
        if (!ai->requires_grad) return;
        double* dst = ai->grad.data() + begin * cols;
        for (std::size_t i = 0; i < oi->grad.size(); ++i) dst[i] += oi->grad[i];
    });
    return result;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no tensors");
    const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
    std::size_t total = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.dim(0) != rows) {
            throw DimensionError("concat_cols: row counts differ, " + shape_string(parts[0].shape()) +
                                 " vs " + shape_string(p.shape()));
        }
        total += p.dim(1);
        grad = grad || p.requires_grad();
    }
    grad = grad && Tape::active() != nullptr;
    std::vector<double> out(rows * total);
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t c = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p.data().data() + r * c, c, out.data() + r * total + offset);
        }
        offset += c;
    }
    Tensor result = make_result(Shape{rows, total}, std::move(out), grad);
    if (grad) {
        std::vector<std::shared_ptr<TensorImpl>> in;
        for (const Tensor& p : parts) in.push_back(p.impl());
        Tape::active()->record(in, result.impl(), [in, oi = result.impl().get(), rows, total]() {
            std::size_t offset = 0;
            for (const auto& p : in) {
                const std::size_t c = p->shape[1];
                if (p->requires_grad) {
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* g = oi->grad.data() + r * total + offset;
                        double* dst = p->grad.data() + r * c;
                        for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
                    }
                }
                offset += c;
            }
        });
    }
    return result;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_rows: no tensors");
    const std::size_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
    std::size_t rows = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.dim(1) != cols) {
            throw DimensionError("concat_rows: column counts differ, " +
                                 shape_string(parts[0].shape()) + " vs " + shape_string(p.shape()));
        }
        rows += p.dim(0);
        grad = grad || p.requires_grad();
    }
    grad = grad && Tape::active() != nullptr;
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Tensor result = make_result(Shape{rows, cols}, std::move(out), grad);
    if (grad) {
        std::vector<std::shared_ptr<TensorImpl>> in;
        for (const Tensor& p : parts) in.push_back(p.impl());
        Tape::active()->record(in, result.impl(), [in, oi = result.impl().get()]() {
            std::size_t offset = 0;
            for (const auto& p : in) {
                const std::size_t n = p->data.size();
                if (p->requires_grad) {
                    for (std::size_t i = 0; i < n; ++i) p->grad[i] += oi->grad[offset + i];
                }
                offset += n;
            }
        });
    }
    return result;
}

Tensor block_left_matmul(const Tensor& op, const Tensor& h) {
    require_rank2(op, "block_left_matmul");
    require_rank2(h, "block_left_matmul");
    const std::size_t n = op.dim(0);
    if (op.dim(1) != n) {
        throw DimensionError("block_left_matmul: operator must be square, got " +
                             shape_string(op.shape()));
    }
    if (op.requires_grad()) {
        throw ContractError("block_left_matmul: the block operator is treated as a constant");
    }
    const std::size_t rows = h.dim(0);
    const std::size_t k = h.dim(1);
    if (n == 0 || rows % n != 0) {
        throw DimensionError("block_left_matmul: " + shape_string(h.shape()) +
                             " rows are not a multiple of operator size " + std::to_string(n));
    }
    const std::size_t blocks = rows / n;
    std::vector<double> out(rows * k);
    MapConst s(op.data().data(), n, n);
    for (std::size_t b = 0; b < blocks; ++b) {
        MapMut(out.data() + b * n * k, n, k).noalias() = s * MapConst(h.data().data() + b * n * k, n, k);
    }
    Tensor result = make_result(Shape{rows, k}, std::move(out), wants_grad({&h}));
    maybe_record({&h}, result, [si = op.impl(), hi = h.impl(), oi = result.impl().get(), n, k, blocks]() {
        if (!hi->requires_grad) return;
        MapConst s(si->data.data(), n, n);
        for (std::size_t b = 0; b < blocks; ++b) {
            MapMut(hi->grad.data() + b * n * k, n, k).noalias() +=
                s.transpose() * MapConst(oi->grad.data() + b * n * k, n, k);
        }
    });
    return result;
}

Tensor lstm_cell(const Tensor& gates, const Tensor& cell) {
    require_rank2(gates, "lstm_cell");
    require_rank2(cell, "lstm_cell");
    const std::size_t batch = cell.dim(0);
    const std::size_t hidden = cell.dim(1);
    if (gates.dim(0) != batch || gates.dim(1) != 4 * hidden) {
        throw DimensionError("lstm_cell: gates " + shape_string(gates.shape()) +
                             " do not match cell state " + shape_string(cell.shape()));
    }
    using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ArrayMap = Eigen::Map<const Array>;
    const auto rows = static_cast<Eigen::Index>(batch);
    const auto h = static_cast<Eigen::Index>(hidden);
    const ArrayMap z(gates.data().data(), rows, 4 * h);
    const ArrayMap c(cell.data().data(), rows, h);
    // acts = [i, f, g, o, tanh(c')]; tanh(x) = 2 sigmoid(2x) - 1 keeps every
    // transcendental on the vectorized exp.
    auto acts = std::make_shared<Array>(rows, 5 * h);
    Array& a = *acts;
    a.leftCols(2 * h) = (1.0 + (-z.leftCols(2 * h)).exp()).inverse();
    a.middleCols(2 * h, h) = 2.0 * (1.0 + (-2.0 * z.middleCols(2 * h, h)).exp()).inverse() - 1.0;
    a.middleCols(3 * h, h) = (1.0 + (-z.rightCols(h)).exp()).inverse();
    std::vector<double> out(batch * 2 * hidden);
    Eigen::Map<Array> hc(out.data(), rows, 2 * h);
    hc.rightCols(h) = a.middleCols(h, h) * c + a.leftCols(h) * a.middleCols(2 * h, h);
    a.rightCols(h) = 2.0 * (1.0 + (-2.0 * hc.rightCols(h)).exp()).inverse() - 1.0;
    hc.leftCols(h) = a.middleCols(3 * h, h) * a.rightCols(h);

    Tensor result = make_result(Shape{batch, 2 * hidden}, std::move(out), wants_grad({&gates, &cell}));
    maybe_record({&gates, &cell}, result,
                 [zi = gates.impl(), ci = cell.impl(), oi = result.impl().get(), acts, rows, h]() {
                     const Array& a = *acts;
                     const ArrayMap g(oi->grad.data(), rows, 2 * h);
                     const auto i = a.leftCols(h);
                     const auto f = a.middleCols(h, h);
                     const auto cand = a.middleCols(2 * h, h);
                     const auto o = a.middleCols(3 * h, h);
                     const auto tc = a.rightCols(h);
                     const Array dh = g.leftCols(h);
                     const Array dc = g.rightCols(h) + dh * o * (1.0 - tc * tc);
                     if (zi->requires_grad) {
                         Eigen::Map<Array> dz(zi->grad.data(), rows, 4 * h);
                         const ArrayMap c_prev(ci->data.data(), rows, h);
                         dz.leftCols(h) += dc * cand * i * (1.0 - i);
                         dz.middleCols(h, h) += dc * c_prev * f * (1.0 - f);
                         dz.middleCols(2 * h, h) += dc * i * (1.0 - cand * cand);
                         dz.rightCols(h) += dh * tc * o * (1.0 - o);
                     }
                     if (ci->requires_grad) {
                         Eigen::Map<Array> dcp(ci->grad.data(), rows, h);
                         dcp += dc * f;
                     }
                 });
    return result;
}

Tensor log_mixture_density(const Tensor& x,
                           std::span<const double> weights,
                           std::span<const double> means,
                           std::span<const double> stds) {
    const std::size_t m = weights.size();
    if (means.size() != m || stds.size() != m || m == 0) {
        throw DimensionError("log_mixture_density: component parameter lists differ in length");
    }
    std::vector<double> log_w(m);
    for (std::size_t j = 0; j < m; ++j) {
        log_w[j] = std::log(weights[j]) - std::log(stds[j]) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    std::vector<double> mu(means.begin(), means.end());
    std::vector<double> sd(stds.begin(), stds.end());
    auto component_terms = [log_w, mu, sd](double v, std::vector<double>& terms) {
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < terms.size(); ++j) {
            const double z = (v - mu[j]) / sd[j];
            terms[j] = log_w[j] - 0.5 * z * z;
            peak = std::max(peak, terms[j]);
        }
        return peak;
    };
    const std::size_t n = x.size();
    std::vector<double> out(n);
    std::vector<double> terms(m);
    for (std::size_t i = 0; i < n; ++i) {
        const double peak = component_terms(x[i], terms);
        double acc = 0.0;
        for (double t : terms) acc += std::exp(t - peak);
        out[i] = peak + std::log(acc);
    }
    Tensor result = make_result(x.shape(), std::move(out), wants_grad({&x}));
    maybe_record({&x}, result, [xi = x.impl(), oi = result.impl().get(), component_terms, mu, sd]() {
        if (!xi->requires_grad) return;
        std::vector<double> terms(mu.size());
        for (std::size_t i = 0; i < xi->data.size(); ++i) {
            const double v = xi->data[i];
            component_terms(v, terms);
            double d = 0.0;
            for (std::size_t j = 0; j < terms.size(); ++j) {
                const double resp = std::exp(terms[j] - oi->data[i]);
                d -= resp * (v - mu[j]) / (sd[j] * sd[j]);
            }
            xi->grad[i] += oi->grad[i] * d;
        }
    });
    return result;
}

} // namespace bstnn
