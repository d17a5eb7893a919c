#include "cteach/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>

#include "cteach/errors.hpp"

namespace cteach {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    // Zero for leaves, otherwise the id of the producing tape.
    std::uint64_t tape_id = 0;
};

}  // namespace detail

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                             std::to_string(shape_size(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return node;
}

#ifdef CTEACH_FAULT_INJECTION
// Test builds only: scales the upstream gradient of one named primitive.
double adjoint_gain(std::string_view name) {
    const char* target = std::getenv("CTEACH_CORRUPT_ADJOINT");
    return (target != nullptr && name == target) ? 1.5 : 1.0;
}
#endif

}  // namespace

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_size(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::scalar(double value) { return constant({1, 1}, {value}); }

const Shape& Tensor::shape() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->shape;
}

std::size_t Tensor::size() const { return shape_size(shape()); }

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("expected a rank-2 tensor, got " + shape_string(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("expected a rank-2 tensor, got " + shape_string(shape()));
    return node_->shape[1];
}

std::span<const double> Tensor::values() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->values;
}

std::span<double> Tensor::mutable_values() {
    if (!is_leaf()) throw UsageError("values of a recorded tensor are immutable");
    return node_->values;
}

double Tensor::operator()(std::size_t row, std::size_t col) const {
    return node_->values[row * cols() + col];
}

double Tensor::item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->tape_id == 0;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::drop_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return constant(shape(), node_->values); }

Tensor Tensor::clone() const {
    return Tensor(make_node(shape(), node_->values, node_->requires_grad));
}

std::span<double> grad_buffer(const Tensor& t) {
    auto& node = t.node();
    if (!node || !node->requires_grad) return {};
    if (node->grad.empty()) node->grad.assign(node->values.size(), 0.0);
    return node->grad;
}

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

Tape::~Tape() = default;

Tensor Tape::record(std::string_view name, Shape shape, std::vector<double> values,
                    std::initializer_list<Tensor> inputs, Adjoint adjoint) {
    return record(name, std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(adjoint));
}

Tensor Tape::record(std::string_view name, Shape shape, std::vector<double> values,
                    const std::vector<Tensor>& inputs, Adjoint adjoint) {
    if (consumed_) throw UsageError("tape already swept backward; record a new forward pass");
    bool needs_grad = false;
    for (const auto& in : inputs) {
        if (!in.defined()) throw UsageError(std::string(name) + ": undefined operand");
        if (in.node()->tape_id != 0 && in.node()->tape_id != id_) {
            throw UsageError(std::string(name) + ": operand belongs to a different tape");
        }
        needs_grad = needs_grad || in.requires_grad();
    }
    auto node = make_node(std::move(shape), std::move(values), needs_grad);
    if (!needs_grad) return Tensor(std::move(node));
    node->tape_id = id_;
    records_.push_back(Record{std::string(name), node, std::move(adjoint)});
    return Tensor(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw UsageError("backward called twice on the same tape");
    if (!loss.defined() || loss.size() != 1) {
        throw UsageError("backward requires a scalar loss, got shape " +
                         (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
    }
    if (loss.node()->tape_id != id_) {
        if (loss.is_leaf()) throw UsageError("backward on a leaf tensor: nothing was recorded");
        throw UsageError("loss was recorded on a different tape");
    }
    consumed_ = true;
    loss.node()->grad.assign(1, 1.0);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        auto& out = *it->output;
        if (out.grad.empty()) continue;
#ifdef CTEACH_FAULT_INJECTION
        if (double gain = adjoint_gain(it->name); gain != 1.0) {
            for (auto& g : out.grad) g *= gain;
        }
#endif
        it->adjoint(out.grad);
    }
    // Release closures and intermediate buffers; leaves keep their grads.
    records_.clear();
    records_.shrink_to_fit();
}

std::vector<std::string> Tape::trace() const {
    std::vector<std::string> names;
    names.reserve(records_.size());
    for (const auto& r : records_) names.push_back(r.name);
    return names;
}

}  // namespace cteach
