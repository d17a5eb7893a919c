#pragma once

// Dense double-precision tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap shared handle. Leaves (constants and parameters) live
// independently of any tape; every primitive applied through a Tape records an
// adjoint rule and yields a non-leaf tensor owned by that tape's graph. A tape
// can be swept backward once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cteach {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor parameter(Shape shape, std::vector<double> values);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    // Rank-2 accessors.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    /// Writable storage of a leaf; non-leaf values are immutable.
    std::span<double> mutable_values();
    double operator()(std::size_t row, std::size_t col) const;
    double item() const;

    bool requires_grad() const;
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();
    /// Releases the gradient buffer so has_grad() is false again.
    void drop_grad();

    /// Leaf constant with a copy of the values.
    Tensor detach() const;
    /// Leaf with a copy of values and grad flag, sharing nothing.
    Tensor clone() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend class Tape;
};

/// Ordered record of primitive applications for one forward pass.
class Tape {
public:
    using Adjoint = std::function<void(std::span<const double> upstream)>;

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    /// Creates the output of primitive `name`. The adjoint is kept only when
    /// some input requires a gradient; otherwise the result is a constant.
    Tensor record(std::string_view name, Shape shape, std::vector<double> values,
                  std::initializer_list<Tensor> inputs, Adjoint adjoint);
    Tensor record(std::string_view name, Shape shape, std::vector<double> values,
                  const std::vector<Tensor>& inputs, Adjoint adjoint);

    /// Seeds d(loss)/d(loss) = 1 and visits every record once in reverse.
    /// Leaf gradients accumulate additively.
    void backward(const Tensor& loss);

    std::size_t size() const { return records_.size(); }
    bool consumed() const { return consumed_; }
    /// Primitive names in execution order.
    std::vector<std::string> trace() const;

private:
    struct Record {
        std::string name;
        std::shared_ptr<detail::Node> output;
        Adjoint adjoint;
    };
    std::vector<Record> records_;
    std::uint64_t id_;
    bool consumed_ = false;
};

/// Gradient buffer of `t` for use inside adjoint rules; empty when `t` does
/// not require a gradient.
std::span<double> grad_buffer(const Tensor& t);

// ---------------------------------------------------------------------------
// Primitives. Unless noted otherwise operands are rank 2 and scalars are 1x1.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor add_scalar(Tape& tape, const Tensor& a, double offset);
/// a (m x n) plus a 1 x n row broadcast over every row.
Tensor add_row(Tape& tape, const Tensor& a, const Tensor& row);

Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts);
Tensor gather_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> rows);
Tensor gather_cols(Tape& tape, const Tensor& a, std::span<const std::size_t> cols);
/// Column `cols[i]` of row i, as an m x 1 tensor.
Tensor pick(Tape& tape, const Tensor& a, std::span<const std::size_t> cols);
/// Mean of the selected rows, 1 x n. The index set must be nonempty.
Tensor masked_mean_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> rows);

Tensor column_sum(Tape& tape, const Tensor& a);
Tensor column_mean(Tape& tape, const Tensor& a);
/// Per-column maximum over rows; ties resolve to the first row.
Tensor column_max(Tape& tape, const Tensor& a);
Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);

Tensor exp(Tape& tape, const Tensor& a);
Tensor log(Tape& tape, const Tensor& a);
Tensor square(Tape& tape, const Tensor& a);
Tensor relu(Tape& tape, const Tensor& a);

/// Euclidean norm of every row, m x 1.
Tensor row_l2norm(Tape& tape, const Tensor& a);
Tensor normalize_rows(Tape& tape, const Tensor& a);

/// softmax(x / temperature) along each row, stabilised by the row maximum.
Tensor row_softmax(Tape& tape, const Tensor& x, double temperature);
Tensor log_softmax_rows(Tape& tape, const Tensor& x);

/// Mean cross-entropy over rows whose target differs from `ignore_id`.
/// Returns an exact 0 constant when every row is ignored.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets, int ignore_id);
Tensor mse(Tape& tape, const Tensor& a, const Tensor& b);

/// 3x3 neighbourhood unfolding of a (batch*height*width) x c pixel matrix
/// with replicate padding; output is (batch*height*width) x 9c.
Tensor im2col3x3(Tape& tape, const Tensor& pixels, std::size_t batch, std::size_t height,
                 std::size_t width);

// ---------------------------------------------------------------------------

struct PrimitiveInfo {
    std::string name;
    std::string adjoint;
    /// Builds a scalar from a 2x3 input that exercises the primitive.
    std::function<Tensor(Tape&, const Tensor&)> probe;
};

/// The differentiable primitives offered to the rest of the library.
const std::vector<PrimitiveInfo>& primitive_set();

/// Max over components of |analytic - numeric| / max(1, |numeric|) using
/// central differences with step `h`.
double finite_difference_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                               const Tensor& x, double h = 1e-4);

/// Same check for a closure over several parameter leaves, which are
/// perturbed in place and restored.
double finite_difference_check(const std::function<Tensor(Tape&)>& f,
                               std::span<const Tensor> leaves, double h = 1e-4);

}  // namespace cteach
