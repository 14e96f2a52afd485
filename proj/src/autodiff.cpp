#include "gridflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

namespace gridflow::ad {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMajor> view(std::span<double> data, std::size_t rows, std::size_t cols) {
    return {data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::Map<RowMajor> view(std::vector<double>& data, std::size_t rows, std::size_t cols) {
    return {data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::Map<const RowMajor> cview(std::span<const double> data, std::size_t rows, std::size_t cols) {
    return {data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

}  // namespace

std::string Shape::str() const { return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")"; }

Shape Tensor::shape() const { return tape_->shape(id_); }
std::span<const double> Tensor::values() const { return tape_->value(id_); }
double Tensor::at(std::size_t row, std::size_t col) const { return values()[row * cols() + col]; }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

double Tensor::item() const {
    if (shape().size() != 1) throw std::invalid_argument("item: tensor " + shape().str() + " is not a scalar");
    return values()[0];
}

Tensor Tape::constant(Shape shape, std::vector<double> values) { return leaf(shape, std::move(values), false); }

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != shape.size()) {
        throw std::invalid_argument("leaf: " + std::to_string(values.size()) + " values for shape " + shape.str());
    }
    nodes_.push_back({shape, std::move(values), {}, requires_grad && record_gradients_, {}});
    return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                    BackwardFn backward) {
    return record(shape, std::move(values), std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(backward));
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::span<const Tensor> inputs, BackwardFn backward) {
    bool needs = false;
    if (record_gradients_) {
        for (const auto& in : inputs) {
            if (&in.tape() != this) throw std::invalid_argument("tensor from a different tape");
            needs = needs || nodes_[in.id()].requires_grad;
        }
    }
    nodes_.push_back({shape, std::move(values), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Tensor(this, nodes_.size() - 1);
}

std::span<double> Tape::accumulator(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
}

void Tape::backward(const Tensor& loss) {
    if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (loss.shape().size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape().str());
    if (!nodes_[loss.id()].requires_grad) return;
    accumulator(loss.id())[0] += 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        auto& node = nodes_[id];
        if (node.backward && !node.grad.empty()) node.backward(*this, id);
    }
}

bool Tape::has_grad(const Tensor& t) const { return !nodes_[t.id()].grad.empty(); }

std::span<const double> Tape::grad(const Tensor& t) const {
    if (!has_grad(t)) throw std::logic_error("tensor " + t.shape().str() + " has no gradient");
    return nodes_[t.id()].grad;
}

namespace {

[[noreturn]] void shape_error(const char* op, Shape a, Shape b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

// Applies a unary elementwise map; derivative expressed through input x and output y.
template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, Forward f, Derivative df) {
    auto& tape = a.tape();
    const auto in = a.values();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    const std::size_t ia = a.id();
    return tape.record(a.shape(), std::move(out), {a}, [ia, df](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        const auto x = t.value(ia);
        const auto y = t.value(self);
        auto ga = t.accumulator(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
}

enum class Broadcast { None, Row };

Broadcast binary_broadcast(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Broadcast::None;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
    shape_error(op, a.shape(), b.shape());
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<double> out(n * m);
    view(out, n, m).noalias() = cview(a.values(), n, k) * cview(b.values(), k, m);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record({n, m}, std::move(out), {a, b}, [ia, ib, n, k, m](Tape& t, std::size_t self) {
        const auto g = cview(t.upstream(self), n, m);
        if (t.requires_grad(ia)) view(t.accumulator(ia), n, k).noalias() += g * cview(t.value(ib), k, m).transpose();
        if (t.requires_grad(ib)) view(t.accumulator(ib), k, m).noalias() += cview(t.value(ia), n, k).transpose() * g;
    });
}

Tensor transpose(const Tensor& a) {
    const std::size_t n = a.rows(), m = a.cols();
    const auto av = a.values();
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
    const std::size_t ia = a.id();
    return a.tape().record({m, n}, std::move(out), {a}, [ia, n, m](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        auto ga = t.accumulator(ia);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j * n + i];
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
    if (x.cols() != w.cols()) shape_error("linear", x.shape(), w.shape());
    const std::size_t n = x.rows(), in = x.cols(), out_dim = w.rows();
    if (bias && !(bias->rows() == 1 && bias->cols() == out_dim)) shape_error("linear(bias)", w.shape(), bias->shape());
    std::vector<double> out(n * out_dim);
    auto o = view(out, n, out_dim);
    o.noalias() = cview(x.values(), n, in) * cview(w.values(), out_dim, in).transpose();
    if (bias) o.rowwise() += cview(bias->values(), 1, out_dim).row(0);
    const std::size_t ix = x.id(), iw = w.id();
    const std::size_t ibias = bias ? bias->id() : 0;
    const bool has_bias = bias != nullptr;
    auto backward = [ix, iw, ibias, has_bias, n, in, out_dim](Tape& t, std::size_t self) {
        const auto g = cview(t.upstream(self), n, out_dim);
        if (t.requires_grad(ix)) view(t.accumulator(ix), n, in).noalias() += g * cview(t.value(iw), out_dim, in);
        if (t.requires_grad(iw)) view(t.accumulator(iw), out_dim, in).noalias() += g.transpose() * cview(t.value(ix), n, in);
        if (has_bias && t.requires_grad(ibias)) view(t.accumulator(ibias), 1, out_dim).row(0) += g.colwise().sum();
    };
    if (bias) return x.tape().record({n, out_dim}, std::move(out), {x, w, *bias}, backward);
    return x.tape().record({n, out_dim}, std::move(out), {x, w}, backward);
}

namespace {

template <typename Combine, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Combine f, DA da, DB db) {
    const auto mode = binary_broadcast(op, a, b);
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t cols = a.cols();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double bi = mode == Broadcast::None ? bv[i] : bv[i % cols];
        out[i] = f(av[i], bi);
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib, mode, cols, da, db](Tape& t, std::size_t self) {
        const auto g = t.upstream(self);
        const auto av = t.value(ia);
        const auto bv = t.value(ib);
        auto b_at = [&](std::size_t i) { return mode == Broadcast::None ? i : i % cols; };
        if (t.requires_grad(ia)) {
            auto ga = t.accumulator(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(av[i], bv[b_at(i)]);
        }
        if (t.requires_grad(ib)) {
            auto gb = t.accumulator(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[b_at(i)] += g[i] * db(av[i], bv[b_at(i)]);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

namespace {

// Same values as std::tanh to a few ulp, but through exp, which is much
// cheaper; small arguments keep std::tanh to avoid cancellation.
double fast_tanh(double x) {
    const double ax = std::fabs(x);
    if (ax < 0.25) return std::tanh(x);
    const double e = std::exp(-2.0 * ax);
    const double t = (1.0 - e) / (1.0 + e);
    return x < 0.0 ? -t : t;
}

}  // namespace

Tensor tanh(const Tensor& a) {
    return unary(a, fast_tanh, [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
    return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    const Shape first = parts[0].shape();
    Shape out_shape = first;
    if (axis == 0) out_shape.rows = 0;
    else out_shape.cols = 0;
    for (const auto& p : parts) {
        if (axis == 0) {
            if (p.cols() != first.cols) shape_error("concat", first, p.shape());
            out_shape.rows += p.rows();
        } else {
            if (p.rows() != first.rows) shape_error("concat", first, p.shape());
            out_shape.cols += p.cols();
        }
    }
    std::vector<double> out(out_shape.size());
    std::vector<std::size_t> ids;
    std::vector<Shape> shapes;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto v = p.values();
        if (axis == 0) {
            std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(offset * out_shape.cols));
            offset += p.rows();
        } else {
            for (std::size_t r = 0; r < p.rows(); ++r)
                for (std::size_t c = 0; c < p.cols(); ++c) out[r * out_shape.cols + offset + c] = v[r * p.cols() + c];
            offset += p.cols();
        }
        ids.push_back(p.id());
        shapes.push_back(p.shape());
    }
    const std::size_t total_cols = out_shape.cols;
    return parts[0].tape().record(out_shape, std::move(out), parts, [ids, shapes, axis, total_cols](Tape& t, std::size_t self) {
        const auto g = t.upstream(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const auto s = shapes[k];
            if (t.requires_grad(ids[k])) {
                auto gp = t.accumulator(ids[k]);
                if (axis == 0) {
                    for (std::size_t i = 0; i < s.size(); ++i) gp[i] += g[offset * total_cols + i];
                } else {
                    for (std::size_t r = 0; r < s.rows; ++r)
                        for (std::size_t c = 0; c < s.cols; ++c) gp[r * s.cols + c] += g[r * total_cols + offset + c];
                }
            }
            offset += axis == 0 ? s.rows : s.cols;
        }
    });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
    const Shape s = a.shape();
    const std::size_t extent = axis == 0 ? s.rows : s.cols;
    if (begin > end || end > extent) {
        throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") out of bounds for " + s.str());
    }
    const Shape out_shape = axis == 0 ? Shape{end - begin, s.cols} : Shape{s.rows, end - begin};
    const auto v = a.values();
    std::vector<double> out(out_shape.size());
    for (std::size_t r = 0; r < out_shape.rows; ++r)
        for (std::size_t c = 0; c < out_shape.cols; ++c) {
            const std::size_t src = axis == 0 ? (r + begin) * s.cols + c : r * s.cols + c + begin;
            out[r * out_shape.cols + c] = v[src];
        }
    const std::size_t ia = a.id();
    return a.tape().record(out_shape, std::move(out), {a}, [ia, s, out_shape, axis, begin](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        auto ga = t.accumulator(ia);
        for (std::size_t r = 0; r < out_shape.rows; ++r)
            for (std::size_t c = 0; c < out_shape.cols; ++c) {
                const std::size_t dst = axis == 0 ? (r + begin) * s.cols + c : r * s.cols + c + begin;
                ga[dst] += g[r * out_shape.cols + c];
            }
    });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    const std::size_t ia = a.id();
    return a.tape().record({1, 1}, {total}, {a}, [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const double g = t.upstream(self)[0];
        for (auto& x : t.accumulator(ia)) x += g;
    });
}

Tensor mean(const Tensor& a) {
    const auto n = a.shape().size();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor sum(const Tensor& a, int axis) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("sum: axis must be 0 or 1");
    const Shape s = a.shape();
    const Shape out_shape = axis == 0 ? Shape{1, s.cols} : Shape{s.rows, 1};
    const auto v = a.values();
    std::vector<double> out(out_shape.size(), 0.0);
    for (std::size_t r = 0; r < s.rows; ++r)
        for (std::size_t c = 0; c < s.cols; ++c) out[axis == 0 ? c : r] += v[r * s.cols + c];
    const std::size_t ia = a.id();
    return a.tape().record(out_shape, std::move(out), {a}, [ia, s, axis](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        auto ga = t.accumulator(ia);
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = 0; c < s.cols; ++c) ga[r * s.cols + c] += g[axis == 0 ? c : r];
    });
}

Tensor softmax(const Tensor& a, int axis, std::span<const double> additive_mask) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
    const Shape s = a.shape();
    if (!additive_mask.empty() && additive_mask.size() != s.size()) {
        throw std::invalid_argument("softmax: mask size " + std::to_string(additive_mask.size()) + " does not match " +
                                    s.str());
    }
    const auto v = a.values();
    std::vector<double> out(s.size());
    const std::size_t groups = axis == 1 ? s.rows : s.cols;
    const std::size_t len = axis == 1 ? s.cols : s.rows;
    auto at = [&](std::size_t group, std::size_t k) { return axis == 1 ? group * s.cols + k : k * s.cols + group; };
    for (std::size_t grp = 0; grp < groups; ++grp) {
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < len; ++k) {
            const auto i = at(grp, k);
            const double logit = v[i] + (additive_mask.empty() ? 0.0 : additive_mask[i]);
            peak = std::max(peak, logit);
        }
        if (!std::isfinite(peak)) throw std::invalid_argument("softmax: every entry of a group is masked");
        double total = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
            const auto i = at(grp, k);
            const double logit = v[i] + (additive_mask.empty() ? 0.0 : additive_mask[i]);
            out[i] = std::exp(logit - peak);
            total += out[i];
        }
        for (std::size_t k = 0; k < len; ++k) out[at(grp, k)] /= total;
    }
    const std::size_t ia = a.id();
    return a.tape().record(s, std::move(out), {a}, [ia, s, axis, groups, len](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        const auto y = t.value(self);
        auto ga = t.accumulator(ia);
        auto at = [&](std::size_t group, std::size_t k) { return axis == 1 ? group * s.cols + k : k * s.cols + group; };
        for (std::size_t grp = 0; grp < groups; ++grp) {
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k) dot += g[at(grp, k)] * y[at(grp, k)];
            for (std::size_t k = 0; k < len; ++k) {
                const auto i = at(grp, k);
                ga[i] += y[i] * (g[i] - dot);
            }
        }
    });
}

Tensor gather_rows(const Tensor& a, const Index& index) {
    const std::size_t cols = a.cols();
    const auto v = a.values();
    std::vector<double> out(index->size() * cols);
    for (std::size_t e = 0; e < index->size(); ++e) {
        const std::size_t r = (*index)[e];
        if (r >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, out.begin() + static_cast<std::ptrdiff_t>(e * cols));
    }
    const std::size_t ia = a.id();
    return a.tape().record({index->size(), cols}, std::move(out), {a}, [ia, index, cols](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        auto ga = t.accumulator(ia);
        for (std::size_t e = 0; e < index->size(); ++e) {
            const std::size_t r = (*index)[e];
            for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[e * cols + c];
        }
    });
}

Tensor scatter_add_rows(const Tensor& a, const Index& index, std::size_t n_rows) {
    if (index->size() != a.rows()) {
        throw std::invalid_argument("scatter_add_rows: index length " + std::to_string(index->size()) +
                                    " does not match " + a.shape().str());
    }
    const std::size_t cols = a.cols();
    const auto v = a.values();
    std::vector<double> out(n_rows * cols, 0.0);
    for (std::size_t e = 0; e < index->size(); ++e) {
        const std::size_t r = (*index)[e];
        if (r >= n_rows) throw std::out_of_range("scatter_add_rows: index out of range");
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += v[e * cols + c];
    }
    const std::size_t ia = a.id();
    return a.tape().record({n_rows, cols}, std::move(out), {a}, [ia, index, cols](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        auto ga = t.accumulator(ia);
        for (std::size_t e = 0; e < index->size(); ++e) {
            const std::size_t r = (*index)[e];
            for (std::size_t c = 0; c < cols; ++c) ga[e * cols + c] += g[r * cols + c];
        }
    });
}

Tensor scale_rows(const Tensor& a, const Tensor& w) {
    if (w.rows() != a.rows() || w.cols() != 1) shape_error("scale_rows", a.shape(), w.shape());
    const std::size_t cols = a.cols();
    const auto av = a.values();
    const auto wv = w.values();
    std::vector<double> out(av.size());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r * cols + c] * wv[r];
    const std::size_t ia = a.id(), iw = w.id();
    const std::size_t rows = a.rows();
    return a.tape().record(a.shape(), std::move(out), {a, w}, [ia, iw, rows, cols](Tape& t, std::size_t self) {
        const auto g = t.upstream(self);
        const auto av = t.value(ia);
        const auto wv = t.value(iw);
        if (t.requires_grad(ia)) {
            auto ga = t.accumulator(ia);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r * cols + c] * wv[r];
        }
        if (t.requires_grad(iw)) {
            auto gw = t.accumulator(iw);
            for (std::size_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * av[r * cols + c];
                gw[r] += acc;
            }
        }
    });
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("row_dot", a.shape(), b.shape());
    const std::size_t rows = a.rows(), cols = a.cols();
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r] += av[r * cols + c] * bv[r * cols + c];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record({rows, 1}, std::move(out), {a, b}, [ia, ib, rows, cols](Tape& t, std::size_t self) {
        const auto g = t.upstream(self);
        const auto av = t.value(ia);
        const auto bv = t.value(ib);
        if (t.requires_grad(ia)) {
            auto ga = t.accumulator(ia);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r] * bv[r * cols + c];
        }
        if (t.requires_grad(ib)) {
            auto gb = t.accumulator(ib);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[r * cols + c] += g[r] * av[r * cols + c];
        }
    });
}

Tensor segment_softmax(const Tensor& scores, const Index& segment, std::size_t n_segments) {
    if (scores.cols() != 1 || segment->size() != scores.rows()) {
        throw std::invalid_argument("segment_softmax: expected a column of " + std::to_string(segment->size()) +
                                    " scores, got " + scores.shape().str());
    }
    const auto v = scores.values();
    const std::size_t n = v.size();
    std::vector<double> peak(n_segments, -std::numeric_limits<double>::infinity());
    for (std::size_t e = 0; e < n; ++e) {
        const auto s = (*segment)[e];
        if (s >= n_segments) throw std::out_of_range("segment_softmax: segment id out of range");
        peak[s] = std::max(peak[s], v[e]);
    }
    std::vector<double> out(n);
    std::vector<double> total(n_segments, 0.0);
    for (std::size_t e = 0; e < n; ++e) {
        out[e] = std::exp(v[e] - peak[(*segment)[e]]);
        total[(*segment)[e]] += out[e];
    }
    for (std::size_t e = 0; e < n; ++e) out[e] /= total[(*segment)[e]];
    const std::size_t ia = scores.id();
    return scores.tape().record({n, 1}, std::move(out), {scores}, [ia, segment, n_segments](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.upstream(self);
        const auto y = t.value(self);
        std::vector<double> dot(n_segments, 0.0);
        for (std::size_t e = 0; e < y.size(); ++e) dot[(*segment)[e]] += g[e] * y[e];
        auto ga = t.accumulator(ia);
        for (std::size_t e = 0; e < y.size(); ++e) ga[e] += y[e] * (g[e] - dot[(*segment)[e]]);
    });
}

namespace {

struct AttentionDims {
    std::size_t n, edges, heads, d, dh;
};

AttentionDims attention_dims(const Tensor& qkv, const Tensor& bias, const Index& src, const Index& dst, std::size_t heads) {
    if (heads == 0 || qkv.cols() % (3 * heads) != 0) {
        throw std::invalid_argument("edge_attention: qkv width " + std::to_string(qkv.cols()) + " is not 3 * heads * d_h");
    }
    const std::size_t edges = src->size();
    if (dst->size() != edges || bias.shape() != Shape{edges, heads}) {
        throw std::invalid_argument("edge_attention: expected bias (" + std::to_string(edges) + "x" + std::to_string(heads) +
                                    "), got " + bias.shape().str());
    }
    const std::size_t n = qkv.rows();
    for (std::size_t e = 0; e < edges; ++e) {
        if ((*src)[e] >= n || (*dst)[e] >= n) throw std::out_of_range("edge_attention: edge endpoint out of range");
    }
    const std::size_t d = qkv.cols() / 3;
    return {n, edges, heads, d, d / heads};
}

// Attention coefficients, edges x heads.
std::vector<double> attention_alpha(std::span<const double> qkv, std::span<const double> bias, const Index& src,
                                    const Index& dst, const AttentionDims& dim) {
    const std::size_t width = 3 * dim.d;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dim.dh));
    std::vector<double> alpha(dim.edges * dim.heads);
    std::vector<double> peak(dim.n * dim.heads, -std::numeric_limits<double>::infinity());
    std::vector<double> total(dim.n * dim.heads, 0.0);
    for (std::size_t e = 0; e < dim.edges; ++e) {
        const double* q = qkv.data() + (*dst)[e] * width;
        const double* k = qkv.data() + (*src)[e] * width + dim.d;
        for (std::size_t m = 0; m < dim.heads; ++m) {
            double s = 0.0;
            for (std::size_t c = m * dim.dh; c < (m + 1) * dim.dh; ++c) s += q[c] * k[c];
            s = s * inv_sqrt + bias[e * dim.heads + m];
            alpha[e * dim.heads + m] = s;
            auto& p = peak[(*dst)[e] * dim.heads + m];
            p = std::max(p, s);
        }
    }
    for (std::size_t e = 0; e < dim.edges; ++e) {
        for (std::size_t m = 0; m < dim.heads; ++m) {
            auto& a = alpha[e * dim.heads + m];
            a = std::exp(a - peak[(*dst)[e] * dim.heads + m]);
            total[(*dst)[e] * dim.heads + m] += a;
        }
    }
    for (std::size_t e = 0; e < dim.edges; ++e) {
        for (std::size_t m = 0; m < dim.heads; ++m) alpha[e * dim.heads + m] /= total[(*dst)[e] * dim.heads + m];
    }
    return alpha;
}

}  // namespace

std::vector<double> attention_weights(const Tensor& qkv, const Tensor& bias, const Index& src, const Index& dst,
                                      std::size_t heads) {
    return attention_alpha(qkv.values(), bias.values(), src, dst, attention_dims(qkv, bias, src, dst, heads));
}

Tensor edge_attention(const Tensor& qkv, const Tensor& bias, const Index& src, const Index& dst, std::size_t heads) {
    const auto dim = attention_dims(qkv, bias, src, dst, heads);
    const auto qv = qkv.values();
    auto alpha = attention_alpha(qv, bias.values(), src, dst, dim);
    const std::size_t width = 3 * dim.d;
    std::vector<double> out(dim.n * dim.d, 0.0);
    for (std::size_t e = 0; e < dim.edges; ++e) {
        const double* v = qv.data() + (*src)[e] * width + 2 * dim.d;
        double* o = out.data() + (*dst)[e] * dim.d;
        for (std::size_t m = 0; m < dim.heads; ++m) {
            const double a = alpha[e * dim.heads + m];
            for (std::size_t c = m * dim.dh; c < (m + 1) * dim.dh; ++c) o[c] += a * v[c];
        }
    }
    const std::size_t iq = qkv.id(), ib = bias.id();
    return qkv.tape().record(
        {dim.n, dim.d}, std::move(out), {qkv, bias},
        [iq, ib, src, dst, dim, alpha = std::move(alpha)](Tape& t, std::size_t self) {
            const auto g = t.upstream(self);
            const auto qv = t.value(iq);
            const std::size_t width = 3 * dim.d;
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dim.dh));
            // d alpha, then the softmax Jacobian within each destination segment.
            std::vector<double> ga(dim.edges * dim.heads);
            std::vector<double> dot(dim.n * dim.heads, 0.0);
            for (std::size_t e = 0; e < dim.edges; ++e) {
                const double* v = qv.data() + (*src)[e] * width + 2 * dim.d;
                const double* go = g.data() + (*dst)[e] * dim.d;
                for (std::size_t m = 0; m < dim.heads; ++m) {
                    double acc = 0.0;
                    for (std::size_t c = m * dim.dh; c < (m + 1) * dim.dh; ++c) acc += go[c] * v[c];
                    ga[e * dim.heads + m] = acc;
                    dot[(*dst)[e] * dim.heads + m] += acc * alpha[e * dim.heads + m];
                }
            }
            std::vector<double> gs(dim.edges * dim.heads);
            for (std::size_t e = 0; e < dim.edges; ++e) {
                for (std::size_t m = 0; m < dim.heads; ++m) {
                    const auto k = e * dim.heads + m;
                    gs[k] = alpha[k] * (ga[k] - dot[(*dst)[e] * dim.heads + m]);
                }
            }
            if (t.requires_grad(ib)) {
                auto gb = t.accumulator(ib);
                for (std::size_t k = 0; k < gs.size(); ++k) gb[k] += gs[k];
            }
            if (t.requires_grad(iq)) {
                auto gq = t.accumulator(iq);
                for (std::size_t e = 0; e < dim.edges; ++e) {
                    const std::size_t i = (*dst)[e], j = (*src)[e];
                    const double* go = g.data() + i * dim.d;
                    for (std::size_t m = 0; m < dim.heads; ++m) {
                        const double a = alpha[e * dim.heads + m];
                        const double s = gs[e * dim.heads + m] * inv_sqrt;
                        for (std::size_t c = m * dim.dh; c < (m + 1) * dim.dh; ++c) {
                            gq[i * width + c] += s * qv[j * width + dim.d + c];
                            gq[j * width + dim.d + c] += s * qv[i * width + c];
                            gq[j * width + 2 * dim.d + c] += a * go[c];
                        }
                    }
                }
            }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t rows = x.rows(), cols = x.cols();
    if (gain.rows() != 1 || gain.cols() != cols) shape_error("layer_norm(gain)", x.shape(), gain.shape());
    if (bias.rows() != 1 || bias.cols() != cols) shape_error("layer_norm(bias)", x.shape(), bias.shape());
    const auto xv = x.values();
    const auto gv = gain.values();
    const auto bv = bias.values();
    std::vector<double> normed(xv.size());
    std::vector<double> inv_std(rows);
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xv[r * cols + c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xv[r * cols + c] - mu) * (xv[r * cols + c] - mu);
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            const auto i = r * cols + c;
            normed[i] = (xv[i] - mu) * inv_std[r];
            out[i] = normed[i] * gv[c] + bv[c];
        }
    }
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    return x.tape().record(
        x.shape(), std::move(out), {x, gain, bias},
        [ix, ig, ib, rows, cols, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
            const auto g = t.upstream(self);
            const auto gv = t.value(ig);
            if (t.requires_grad(ig)) {
                auto gg = t.accumulator(ig);
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % cols] += g[i] * normed[i];
            }
            if (t.requires_grad(ib)) {
                auto gb = t.accumulator(ib);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
            }
            if (t.requires_grad(ix)) {
                auto gx = t.accumulator(ix);
                const double inv_n = 1.0 / static_cast<double>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_g = 0.0, mean_gn = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const auto i = r * cols + c;
                        const double gn = g[i] * gv[c];
                        mean_g += gn;
                        mean_gn += gn * normed[i];
                    }
                    mean_g *= inv_n;
                    mean_gn *= inv_n;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const auto i = r * cols + c;
                        gx[i] += inv_std[r] * (g[i] * gv[c] - mean_g - normed[i] * mean_gn);
                    }
                }
            }
        });
}

Tensor power_injection(const Tensor& v_mag, const Tensor& theta, std::shared_ptr<const ComplexSparse> ybus) {
    const std::size_t n = ybus->n;
    if (v_mag.shape() != Shape{n, 1} || theta.shape() != Shape{n, 1}) {
        throw std::invalid_argument("power_injection: expected (" + std::to_string(n) + "x1) voltages, got " +
                                    v_mag.shape().str() + " and " + theta.shape().str());
    }
    const auto vm = v_mag.values();
    const auto th = theta.values();
    std::vector<double> e(n), f(n), cur_re(n, 0.0), cur_im(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        e[i] = vm[i] * std::cos(th[i]);
        f[i] = vm[i] * std::sin(th[i]);
    }
    for (std::size_t k = 0; k < ybus->row.size(); ++k) {
        const auto i = ybus->row[k];
        const auto j = ybus->col[k];
        cur_re[i] += ybus->g[k] * e[j] - ybus->b[k] * f[j];
        cur_im[i] += ybus->g[k] * f[j] + ybus->b[k] * e[j];
    }
    std::vector<double> out(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        // S = V conj(I) = (e + jf)(Ire - jIim)
        out[2 * i] = e[i] * cur_re[i] + f[i] * cur_im[i];
        out[2 * i + 1] = f[i] * cur_re[i] - e[i] * cur_im[i];
    }
    const std::size_t iv = v_mag.id(), it = theta.id();
    return v_mag.tape().record(
        {n, 2}, std::move(out), {v_mag, theta},
        [iv, it, n, ybus, e = std::move(e), f = std::move(f), cur_re = std::move(cur_re),
         cur_im = std::move(cur_im)](Tape& t, std::size_t self) {
            const auto g = t.upstream(self);
            std::vector<double> ge(n), gf(n), g_re(n), g_im(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double gp = g[2 * i], gq = g[2 * i + 1];
                ge[i] = gp * cur_re[i] - gq * cur_im[i];
                gf[i] = gp * cur_im[i] + gq * cur_re[i];
                g_re[i] = gp * e[i] + gq * f[i];
                g_im[i] = gp * f[i] - gq * e[i];
            }
            for (std::size_t k = 0; k < ybus->row.size(); ++k) {
                const auto i = ybus->row[k];
                const auto j = ybus->col[k];
                ge[j] += ybus->g[k] * g_re[i] + ybus->b[k] * g_im[i];
                gf[j] += -ybus->b[k] * g_re[i] + ybus->g[k] * g_im[i];
            }
            const auto vm = t.value(iv);
            const auto th = t.value(it);
            if (t.requires_grad(iv)) {
                auto gv = t.accumulator(iv);
                for (std::size_t i = 0; i < n; ++i) gv[i] += ge[i] * std::cos(th[i]) + gf[i] * std::sin(th[i]);
            }
            if (t.requires_grad(it)) {
                auto gt = t.accumulator(it);
                for (std::size_t i = 0; i < n; ++i) gt[i] += vm[i] * (-ge[i] * std::sin(th[i]) + gf[i] * std::cos(th[i]));
            }
        });
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Shape shape, std::span<const double> x,
                  double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
    if (x.size() != shape.size()) throw std::invalid_argument("grad_check: point does not match shape");
    std::vector<double> analytic(x.size(), 0.0);
    {
        Tape tape;
        auto leaf = tape.leaf(shape, std::vector<double>(x.begin(), x.end()));
        auto out = f(tape, leaf);
        tape.backward(out);
        if (tape.has_grad(leaf)) {
            const auto g = tape.grad(leaf);
            std::copy(g.begin(), g.end(), analytic.begin());
        }
    }
    auto evaluate = [&](const std::vector<double>& point) {
        Tape tape(false);
        auto leaf = tape.constant(shape, point);
        return f(tape, leaf).item();
    };
    double worst = 0.0;
    std::vector<double> point(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        point[i] = x[i] + eps;
        const double up = evaluate(point);
        point[i] = x[i] - eps;
        const double down = evaluate(point);
        point[i] = x[i];
        const double numeric = (up - down) / (2.0 * eps);
        const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace gridflow::ad
