#pragma once

// Dense row-major 2-D tensors recorded on a reverse-mode gradient tape.
//
// Every value is a (rows x cols) matrix of doubles; scalars are 1x1. A Tape
// owns all node storage and Tensor is a cheap handle into it, so a Tensor is
// only valid while its Tape lives. Leaves created with requires_grad = false
// (frozen parameters, constants) never receive gradient storage.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gridflow::ad {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

class Tape;

class Tensor {
public:
    Tensor() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    Shape shape() const;
    std::size_t rows() const { return shape().rows; }
    std::size_t cols() const { return shape().cols; }
    std::span<const double> values() const;
    double at(std::size_t row, std::size_t col) const;
    double item() const;
    bool requires_grad() const;

private:
    friend class Tape;
    Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    // With record_gradients = false nothing is retained for backward (evaluation mode).
    explicit Tape(bool record_gradients = true) : record_gradients_(record_gradients) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor constant(Shape shape, std::vector<double> values);
    Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true);

    /// Reverse-topological accumulation from a 1x1 loss. Throws on non-scalar loss.
    void backward(const Tensor& loss);

    bool has_grad(const Tensor& t) const;
    // Throws if the tensor received no gradient (frozen, constant, or unused).
    std::span<const double> grad(const Tensor& t) const;
    std::size_t size() const { return nodes_.size(); }
    bool recording() const { return record_gradients_; }

    // Operation-author interface.
    Tensor record(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs, BackwardFn backward);
    Tensor record(Shape shape, std::vector<double> values, std::span<const Tensor> inputs, BackwardFn backward);
    Shape shape(std::size_t id) const { return nodes_[id].shape; }
    std::span<const double> value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    // Incoming gradient of a node during backward.
    std::span<const double> upstream(std::size_t id) const { return nodes_[id].grad; }
    // Gradient accumulator of an input, zero-initialised on first use.
    std::span<double> accumulator(std::size_t id);

private:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    bool record_gradients_;
    std::vector<Node> nodes_;
};

using Index = std::shared_ptr<const std::vector<std::size_t>>;

inline Index make_index(std::vector<std::size_t> values) {
    return std::make_shared<const std::vector<std::size_t>>(std::move(values));
}

// Complex sparse matrix split into real parts, diagonal included as ordinary entries.
struct ComplexSparse {
    std::size_t n = 0;
    std::vector<std::size_t> row;
    std::vector<std::size_t> col;
    std::vector<double> g;
    std::vector<double> b;
};

// ---- elementwise and linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x * w^T (+ bias), bias shaped 1 x out.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr);
// Same shape, or b a single row broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

// ---- shape ----
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// axis 0 collapses rows (-> 1 x cols), axis 1 collapses columns (-> rows x 1).
Tensor sum(const Tensor& a, int axis);

/// Softmax along an axis. `additive_mask`, when non-empty, has a's size and is
/// added to the logits; -inf entries yield probability exactly 0.
Tensor softmax(const Tensor& a, int axis, std::span<const double> additive_mask = {});

// ---- graph message passing ----
Tensor gather_rows(const Tensor& a, const Index& index);
Tensor scatter_add_rows(const Tensor& a, const Index& index, std::size_t n_rows);
// Multiplies row i of a by w(i, 0).
Tensor scale_rows(const Tensor& a, const Tensor& w);
// Row-wise inner products -> rows x 1.
Tensor row_dot(const Tensor& a, const Tensor& b);
// Softmax of a column vector within groups sharing the same segment id.
Tensor segment_softmax(const Tensor& scores, const Index& segment, std::size_t n_segments);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Fused multi-head edge attention. qkv is n x 3d with column blocks
/// [Q | K | V], head m in columns m*d_h .. (m+1)*d_h of each block; bias is
/// n_edges x heads. For edge e from src j to dst i and head m:
///   s = q_i . k_j / sqrt(d_h) + bias(e, m),  alpha = softmax of s over edges into i,
///   out_i = sum_e alpha * v_j.
/// Returns n x d with the heads side by side.
Tensor edge_attention(const Tensor& qkv, const Tensor& bias, const Index& src, const Index& dst, std::size_t heads);
// The coefficients alpha of edge_attention, n_edges x heads row-major; not recorded.
std::vector<double> attention_weights(const Tensor& qkv, const Tensor& bias, const Index& src, const Index& dst,
                                      std::size_t heads);

/// Complex power injections S = V .* conj(Y V) for V = v_mag * exp(j theta);
/// returns n x 2 with columns (P, Q).
Tensor power_injection(const Tensor& v_mag, const Tensor& theta, std::shared_ptr<const ComplexSparse> ybus);

/// Central-difference gradient check of a scalar function. Returns
/// max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|). Throws when eps <= 0.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Shape shape, std::span<const double> x,
                  double eps = 1e-6);

}  // namespace gridflow::ad
