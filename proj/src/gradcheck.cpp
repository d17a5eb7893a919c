#include <algorithm>
#include <cmath>

#include "cteach/errors.hpp"
#include "cteach/tensor.hpp"

namespace cteach {

namespace {

// Fixed non-uniform weights so each output component reaches the scalar
// with a distinct coefficient.
Tensor weighted_sum(Tape& tape, const Tensor& y) {
    std::vector<double> w(y.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.4 + 0.6 * std::sin(1.3 * static_cast<double>(i) + 0.7);
    return sum(tape, mul(tape, y, Tensor::constant(y.shape(), std::move(w))));
}

Tensor constant_like(const Tensor& x, double base) {
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = base + 0.25 * static_cast<double>(i % 5);
    return Tensor::constant(x.shape(), std::move(v));
}

std::vector<PrimitiveInfo> build_catalogue() {
    using P = PrimitiveInfo;
    std::vector<P> c;
    c.push_back(P{"matmul", "dA = G B^T, dB = A^T G", [](Tape& t, const Tensor& x) {
                      return weighted_sum(t, matmul(t, x, transpose(t, square(t, x))));
                  }});
    c.push_back(P{"transpose", "dA = G^T", [](Tape& t, const Tensor& x) { return weighted_sum(t, transpose(t, x)); }});
    c.push_back(P{"add", "dA = G, dB = G",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, add(t, x, square(t, x))); }});
    c.push_back(P{"subtract", "dA = G, dB = -G",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, sub(t, x, square(t, x))); }});
    c.push_back(P{"multiply", "dA = G*B, dB = G*A",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, mul(t, x, add_scalar(t, x, 0.3))); }});
    c.push_back(P{"divide", "dA = G/B, dB = -G*A/B^2", [](Tape& t, const Tensor& x) {
                      return weighted_sum(t, div(t, x, add_scalar(t, square(t, x), 1.0)));
                  }});
    c.push_back(P{"scale", "dA = s*G", [](Tape& t, const Tensor& x) { return weighted_sum(t, scale(t, x, -1.7)); }});
    c.push_back(P{"add_scalar", "dA = G",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, square(t, add_scalar(t, x, 0.5))); }});
    c.push_back(P{"add_row", "dA = G, drow = column sums of G", [](Tape& t, const Tensor& x) {
                      const std::size_t first[] = {0};
                      return weighted_sum(t, add_row(t, x, gather_rows(t, square(t, x), first)));
                  }});
    c.push_back(P{"concat_rows", "split G by row blocks", [](Tape& t, const Tensor& x) {
                      return weighted_sum(t, concat_rows(t, {x, square(t, x)}));
                  }});
    c.push_back(P{"gather_rows", "scatter-add G into selected rows", [](Tape& t, const Tensor& x) {
                      const std::size_t rows[] = {1, 0, 1};
                      return weighted_sum(t, gather_rows(t, x, rows));
                  }});
    c.push_back(P{"gather_cols", "scatter-add G into selected columns", [](Tape& t, const Tensor& x) {
                      const std::size_t cols[] = {2, 0, 2};
                      return weighted_sum(t, gather_cols(t, x, cols));
                  }});
    c.push_back(P{"pick", "scatter G into the picked entries", [](Tape& t, const Tensor& x) {
                      const std::size_t cols[] = {2, 0};
                      return weighted_sum(t, pick(t, x, cols));
                  }});
    c.push_back(P{"masked_mean", "G / |set| to every selected row", [](Tape& t, const Tensor& x) {
                      const std::size_t rows[] = {0, 1};
                      return weighted_sum(t, masked_mean_rows(t, square(t, x), rows));
                  }});
    c.push_back(P{"column_sum", "broadcast G over rows",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, column_sum(t, square(t, x))); }});
    c.push_back(P{"column_mean", "broadcast G / rows over rows",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, column_mean(t, square(t, x))); }});
    c.push_back(P{"column_max", "route G to the arg-max row",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, column_max(t, x)); }});
    c.push_back(P{"sum", "broadcast G", [](Tape& t, const Tensor& x) { return sum(t, square(t, x)); }});
    c.push_back(P{"mean", "broadcast G / size", [](Tape& t, const Tensor& x) { return mean(t, square(t, x)); }});
    c.push_back(P{"exp", "dA = G*exp(A)", [](Tape& t, const Tensor& x) { return weighted_sum(t, exp(t, x)); }});
    c.push_back(P{"log", "dA = G/A", [](Tape& t, const Tensor& x) {
                      return weighted_sum(t, log(t, add_scalar(t, square(t, x), 0.5)));
                  }});
    c.push_back(P{"square", "dA = 2*G*A", [](Tape& t, const Tensor& x) { return weighted_sum(t, square(t, x)); }});
    c.push_back(P{"relu", "dA = G*[A > 0]", [](Tape& t, const Tensor& x) { return weighted_sum(t, relu(t, x)); }});
    c.push_back(P{"l2_norm", "dA = G*A/|A|", [](Tape& t, const Tensor& x) { return weighted_sum(t, row_l2norm(t, x)); }});
    c.push_back(P{"normalize_rows", "dA = (G - y(y.G))/|A|",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, normalize_rows(t, x)); }});
    c.push_back(P{"row_softmax", "dA = y*(G - sum(G*y))/T",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, row_softmax(t, x, 0.7)); }});
    c.push_back(P{"log_softmax", "dA = G - softmax*sum(G)",
                  [](Tape& t, const Tensor& x) { return weighted_sum(t, log_softmax_rows(t, x)); }});
    c.push_back(P{"cross_entropy", "dA = (softmax - onehot)/active rows", [](Tape& t, const Tensor& x) {
                      const int targets[] = {2, 0};
                      return cross_entropy(t, scale(t, x, 2.0), targets, -1);
                  }});
    c.push_back(P{"mse", "dA = 2(A-B)/size, dB = -dA",
                  [](Tape& t, const Tensor& x) { return mse(t, x, constant_like(x, -0.2)); }});
    c.push_back(P{"im2col3x3", "scatter-add taps back to source pixels", [](Tape& t, const Tensor& x) {
                      // 2x3 input read as one 1x2 image with 3 channels.
                      return weighted_sum(t, im2col3x3(t, x, 1, 1, 2));
                  }});
    return c;
}

double evaluate(const std::function<Tensor(Tape&)>& f) {
    Tape tape;
    const double v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: function is non-finite at a probe point");
    return v;
}

}  // namespace

const std::vector<PrimitiveInfo>& primitive_set() {
    static const std::vector<PrimitiveInfo> catalogue = build_catalogue();
    return catalogue;
}

double finite_difference_check(const std::function<Tensor(Tape&)>& f, std::span<const Tensor> leaves, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_difference_check: step must be positive");
    for (const auto& leaf : leaves) {
        if (!leaf.is_leaf() || !leaf.requires_grad()) {
            throw UsageError("finite_difference_check: every checked tensor must be a parameter leaf");
        }
    }
    std::vector<Tensor> params(leaves.begin(), leaves.end());
    std::vector<std::vector<double>> saved_grads;
    for (auto& p : params) {
        saved_grads.emplace_back(p.grad().begin(), p.grad().end());
        p.zero_grad();
    }
    {
        Tape tape;
        auto loss = f(tape);
        if (!std::isfinite(loss.item())) throw NumericError("finite_difference_check: non-finite value at x");
        tape.backward(loss);
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        std::vector<double> analytic(p.size(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        auto values = p.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            values[i] = original + h;
            const double plus = evaluate(f);
            values[i] = original - h;
            const double minus = evaluate(f);
            values[i] = original;
            const double numeric = (plus - minus) / (2.0 * h);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
        }
    }
    // Leave gradients as the analytic sweep produced them, on top of what was there.
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (saved_grads[k].empty()) continue;
        auto g = grad_buffer(params[k]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += saved_grads[k][i];
    }
    return worst;
}

double finite_difference_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x, double h) {
    auto leaf = Tensor::parameter(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
    const Tensor leaves[] = {leaf};
    return finite_difference_check([&](Tape& tape) { return f(tape, leaf); }, leaves, h);
}

}  // namespace cteach
