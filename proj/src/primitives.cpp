#include <algorithm>
#include <cmath>
#include <limits>

#include "cteach/errors.hpp"
#include "cteach/tensor.hpp"

namespace cteach {

namespace {

void require_rank2(const char* op, const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a rank-2 operand, got " + shape_string(a.shape()));
    }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

void require_finite(const char* op, std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

template <class F>
Tensor unary(Tape& tape, const char* name, const Tensor& a, F&& value_fn,
             std::function<double(double x, double y)> derivative) {
    auto in = a.values();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = value_fn(in[i]);
    auto y_copy = out;
    return tape.record(name, a.shape(), std::move(out), {a},
                       [a, y = std::move(y_copy), derivative](std::span<const double> g) {
                           auto ga = grad_buffer(a);
                           auto x = a.values();
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * derivative(x[i], y[i]);
                       });
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    const auto m = a.rows(), k = a.cols(), p = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    auto av = a.values();
    auto bv = b.values();
    std::vector<double> out(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const double aik = av[i * k + t];
            for (std::size_t j = 0; j < p; ++j) out[i * p + j] += aik * bv[t * p + j];
        }
    }
    return tape.record("matmul", {m, p}, std::move(out), {a, b}, [a, b, m, k, p](std::span<const double> g) {
        // dA = G B^T, dB = A^T G
        if (auto ga = grad_buffer(a); !ga.empty()) {
            auto bv = b.values();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * bv[t * p + j];
                    ga[i * k + t] += acc;
                }
        }
        if (auto gb = grad_buffer(b); !gb.empty()) {
            auto av = a.values();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < k; ++t) {
                    const double aik = av[i * k + t];
                    for (std::size_t j = 0; j < p; ++j) gb[t * p + j] += aik * g[i * p + j];
                }
        }
    });
}

Tensor transpose(Tape& tape, const Tensor& a) {
    require_rank2("transpose", a);
    const auto m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return tape.record("transpose", {n, m}, std::move(out), {a}, [a, m, n](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return tape.record("add", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
        if (auto ga = grad_buffer(a); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        if (auto gb = grad_buffer(b); !gb.empty())
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
    });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("subtract", a, b);
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return tape.record("subtract", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
        if (auto ga = grad_buffer(a); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        if (auto gb = grad_buffer(b); !gb.empty())
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("multiply", a, b);
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return tape.record("multiply", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
        if (auto ga = grad_buffer(a); !ga.empty()) {
            auto bv = b.values();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (auto gb = grad_buffer(b); !gb.empty()) {
            auto av = a.values();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("divide", a, b);
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return tape.record("divide", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
        auto av = a.values(), bv = b.values();
        if (auto ga = grad_buffer(a); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / bv[i];
        if (auto gb = grad_buffer(b); !gb.empty())
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
    auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    return tape.record("scale", a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
    });
}

Tensor add_scalar(Tape& tape, const Tensor& a, double offset) {
    auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + offset;
    return tape.record("add_scalar", a.shape(), std::move(out), {a}, [a](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
}

Tensor add_row(Tape& tape, const Tensor& a, const Tensor& row) {
    require_rank2("add_row", a);
    require_rank2("add_row", row);
    const auto m = a.rows(), n = a.cols();
    if (row.rows() != 1 || row.cols() != n) {
        throw DimensionError("add_row: row " + shape_string(row.shape()) + " does not broadcast over " +
                             shape_string(a.shape()));
    }
    auto av = a.values(), rv = row.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + rv[j];
    return tape.record("add_row", {m, n}, std::move(out), {a, row}, [a, row, m, n](std::span<const double> g) {
        if (auto ga = grad_buffer(a); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        if (auto gr = grad_buffer(row); !gr.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
    });
}

Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no operands");
    std::size_t n = 0, m = 0;
    for (const auto& p : parts) {
        require_rank2("concat_rows", p);
        if (m == 0) n = p.cols();
        if (p.cols() != n) {
            throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().shape()) + " vs " +
                                 shape_string(p.shape()));
        }
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    return tape.record("concat_rows", {m, n}, std::move(out), parts, [parts](std::span<const double> g) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
            auto gp = grad_buffer(p);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
            offset += p.size();
        }
    });
}

Tensor gather_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> rows) {
    require_rank2("gather_rows", a);
    const auto n = a.cols();
    if (rows.empty()) throw DimensionError("gather_rows: empty index set");
    auto av = a.values();
    std::vector<double> out;
    out.reserve(rows.size() * n);
    for (auto r : rows) {
        if (r >= a.rows()) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range");
        out.insert(out.end(), av.begin() + static_cast<std::ptrdiff_t>(r * n),
                   av.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return tape.record("gather_rows", {idx.size(), n}, std::move(out), {a},
                       [a, idx, n](std::span<const double> g) {
                           auto ga = grad_buffer(a);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j) ga[idx[i] * n + j] += g[i * n + j];
                       });
}

Tensor gather_cols(Tape& tape, const Tensor& a, std::span<const std::size_t> cols) {
    require_rank2("gather_cols", a);
    const auto m = a.rows(), n = a.cols();
    if (cols.empty()) throw DimensionError("gather_cols: empty index set");
    for (auto c : cols)
        if (c >= n) throw DimensionError("gather_cols: column " + std::to_string(c) + " out of range");
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    const auto k = idx.size();
    auto av = a.values();
    std::vector<double> out(m * k);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = av[i * n + idx[j]];
    return tape.record("gather_cols", {m, k}, std::move(out), {a}, [a, idx, m, n, k](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) ga[i * n + idx[j]] += g[i * k + j];
    });
}

Tensor pick(Tape& tape, const Tensor& a, std::span<const std::size_t> cols) {
    require_rank2("pick", a);
    const auto m = a.rows(), n = a.cols();
    if (cols.size() != m) throw DimensionError("pick: need one column per row");
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    auto av = a.values();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (idx[i] >= n) throw DimensionError("pick: column " + std::to_string(idx[i]) + " out of range");
        out[i] = av[i * n + idx[i]];
    }
    return tape.record("pick", {m, 1}, std::move(out), {a}, [a, idx, n](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < idx.size(); ++i) ga[i * n + idx[i]] += g[i];
    });
}

Tensor masked_mean_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> rows) {
    require_rank2("masked_mean", a);
    if (rows.empty()) throw DimensionError("masked_mean: empty index set");
    const auto n = a.cols();
    auto av = a.values();
    std::vector<double> out(n, 0.0);
    for (auto r : rows) {
        if (r >= a.rows()) throw DimensionError("masked_mean: row " + std::to_string(r) + " out of range");
        for (std::size_t j = 0; j < n; ++j) out[j] += av[r * n + j];
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (auto& v : out) v *= inv;
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return tape.record("masked_mean", {1, n}, std::move(out), {a}, [a, idx, n, inv](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (auto r : idx)
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[j] * inv;
    });
}

Tensor column_sum(Tape& tape, const Tensor& a) {
    require_rank2("column_sum", a);
    const auto m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
    return tape.record("column_sum", {1, n}, std::move(out), {a}, [a, m, n](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j];
    });
}

Tensor column_mean(Tape& tape, const Tensor& a) {
    require_rank2("column_mean", a);
    const auto m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
    const double inv = 1.0 / static_cast<double>(m);
    for (auto& v : out) v *= inv;
    return tape.record("column_mean", {1, n}, std::move(out), {a}, [a, m, n, inv](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
    });
}

Tensor column_max(Tape& tape, const Tensor& a) {
    require_rank2("column_max", a);
    const auto m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(n);
    std::vector<std::size_t> arg(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = av[j];
        for (std::size_t i = 1; i < m; ++i) {
            if (av[i * n + j] > out[j]) {
                out[j] = av[i * n + j];
                arg[j] = i;
            }
        }
    }
    return tape.record("column_max", {1, n}, std::move(out), {a}, [a, arg, n](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (std::size_t j = 0; j < n; ++j) ga[arg[j] * n + j] += g[j];
    });
}

Tensor sum(Tape& tape, const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    return tape.record("sum", {1, 1}, {total}, {a}, [a](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (auto& v : ga) v += g[0];
    });
}

Tensor mean(Tape& tape, const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    return tape.record("mean", {1, 1}, {total * inv}, {a}, [a, inv](std::span<const double> g) {
        auto ga = grad_buffer(a);
        for (auto& v : ga) v += g[0] * inv;
    });
}

Tensor exp(Tape& tape, const Tensor& a) {
    return unary(tape, "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(Tape& tape, const Tensor& a) {
    return unary(tape, "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(Tape& tape, const Tensor& a) {
    return unary(tape, "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(Tape& tape, const Tensor& a) {
    return unary(
        tape, "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor row_l2norm(Tape& tape, const Tensor& a) {
    require_rank2("l2_norm", a);
    const auto m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
        out[i] = std::sqrt(s);
    }
    auto norms = out;
    return tape.record("l2_norm", {m, 1}, std::move(out), {a}, [a, norms, n](std::span<const double> g) {
        auto ga = grad_buffer(a);
        auto av = a.values();
        for (std::size_t i = 0; i < norms.size(); ++i) {
            if (norms[i] == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i] * av[i * n + j] / norms[i];
        }
    });
}

Tensor normalize_rows(Tape& tape, const Tensor& a) {
    require_rank2("normalize_rows", a);
    const auto m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(m * n);
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
        norms[i] = std::max(std::sqrt(s), 1e-12);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / norms[i];
    }
    auto y = out;
    return tape.record("normalize_rows", {m, n}, std::move(out), {a},
                       [a, y, norms, m, n](std::span<const double> g) {
                           // dx = (g - y (y . g)) / |x|
                           auto ga = grad_buffer(a);
                           for (std::size_t i = 0; i < m; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * g[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norms[i];
                           }
                       });
}

Tensor row_softmax(Tape& tape, const Tensor& x, double temperature) {
    require_rank2("row_softmax", x);
    if (!(temperature > 0.0)) throw ConfigError("row_softmax: temperature must be positive");
    require_finite("row_softmax", x.values());
    const auto m = x.rows(), n = x.cols();
    auto xv = x.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp((xv[i * n + j] - mx) / temperature);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    auto y = out;
    return tape.record("row_softmax", {m, n}, std::move(out), {x},
                       [x, y, m, n, temperature](std::span<const double> g) {
                           // dx = y * (g - sum(g * y)) / T
                           auto gx = grad_buffer(x);
                           for (std::size_t i = 0; i < m; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                   gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot) / temperature;
                           }
                       });
}

Tensor log_softmax_rows(Tape& tape, const Tensor& x) {
    require_rank2("log_softmax", x);
    require_finite("log_softmax", x.values());
    const auto m = x.rows(), n = x.cols();
    auto xv = x.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(xv[i * n + j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] - lse;
    }
    auto y = out;
    return tape.record("log_softmax", {m, n}, std::move(out), {x}, [x, y, m, n](std::span<const double> g) {
        // dx = g - softmax * sum(g)
        auto gx = grad_buffer(x);
        for (std::size_t i = 0; i < m; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gs;
        }
    });
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets, int ignore_id) {
    require_rank2("cross_entropy", logits);
    require_finite("cross_entropy", logits.values());
    const auto m = logits.rows(), n = logits.cols();
    if (targets.size() != m) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(m) + " rows");
    }
    auto xv = logits.values();
    std::vector<double> softmax(m * n, 0.0);
    std::vector<std::size_t> active;
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] == ignore_id) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
            throw DataError("cross_entropy: target " + std::to_string(targets[i]) + " has no logit column");
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            softmax[i * n + j] = std::exp(xv[i * n + j] - mx);
            z += softmax[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) softmax[i * n + j] /= z;
        total -= xv[i * n + static_cast<std::size_t>(targets[i])] - mx - std::log(z);
        active.push_back(i);
    }
    if (active.empty()) return Tensor::scalar(0.0);
    const double inv = 1.0 / static_cast<double>(active.size());
    std::vector<int> tgt(targets.begin(), targets.end());
    return tape.record("cross_entropy", {1, 1}, {total * inv}, {logits},
                       [logits, softmax = std::move(softmax), active = std::move(active), tgt, n,
                        inv](std::span<const double> g) {
                           auto gx = grad_buffer(logits);
                           for (auto i : active) {
                               for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[0] * inv * softmax[i * n + j];
                               gx[i * n + static_cast<std::size_t>(tgt[i])] -= g[0] * inv;
                           }
                       });
}

Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("mse", a, b);
    auto av = a.values(), bv = b.values();
    double total = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double inv = 1.0 / static_cast<double>(av.size());
    return tape.record("mse", {1, 1}, {total * inv}, {a, b}, [a, b, inv](std::span<const double> g) {
        auto av = a.values(), bv = b.values();
        if (auto ga = grad_buffer(a); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * 2.0 * inv * (av[i] - bv[i]);
        if (auto gb = grad_buffer(b); !gb.empty())
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[0] * 2.0 * inv * (av[i] - bv[i]);
    });
}

Tensor im2col3x3(Tape& tape, const Tensor& pixels, std::size_t batch, std::size_t height, std::size_t width) {
    require_rank2("im2col3x3", pixels);
    const auto c = pixels.cols();
    const auto count = batch * height * width;
    if (pixels.rows() != count) {
        throw DimensionError("im2col3x3: " + shape_string(pixels.shape()) + " is not " + std::to_string(batch) +
                             "x" + std::to_string(height) + "x" + std::to_string(width) + " pixels");
    }
    // source[p * 9 + k]: pixel feeding tap k of output pixel p (replicate padding)
    std::vector<std::size_t> source(count * 9);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < height; ++i)
            for (std::size_t j = 0; j < width; ++j) {
                const auto p = (b * height + i) * width + j;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const auto si = static_cast<std::size_t>(
                            std::clamp<long>(static_cast<long>(i) + di, 0, static_cast<long>(height) - 1));
                        const auto sj = static_cast<std::size_t>(
                            std::clamp<long>(static_cast<long>(j) + dj, 0, static_cast<long>(width) - 1));
                        source[p * 9 + static_cast<std::size_t>((di + 1) * 3 + (dj + 1))] =
                            (b * height + si) * width + sj;
                    }
            }
    auto xv = pixels.values();
    const auto row = 9 * c;
    std::vector<double> out(count * row);
    for (std::size_t p = 0; p < count; ++p)
        for (std::size_t k = 0; k < 9; ++k) {
            const auto s = source[p * 9 + k];
            std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(s * c), c,
                        out.begin() + static_cast<std::ptrdiff_t>(p * row + k * c));
        }
    return tape.record("im2col3x3", {count, row}, std::move(out), {pixels},
                       [pixels, source = std::move(source), count, c, row](std::span<const double> g) {
                           auto gx = grad_buffer(pixels);
                           for (std::size_t p = 0; p < count; ++p)
                               for (std::size_t k = 0; k < 9; ++k) {
                                   const auto s = source[p * 9 + k];
                                   for (std::size_t ch = 0; ch < c; ++ch) gx[s * c + ch] += g[p * row + k * c + ch];
                               }
                       });
}

}  // namespace cteach
