#include <cmath>
#include <string>

#include "cteach/errors.hpp"
#include "cteach/plm.hpp"
#include "cteach/rng.hpp"

namespace cteach {

namespace {

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = std_dev * rng.normal();
    return Tensor::parameter({rows, cols}, std::move(v));
}

Tensor feed_forward(Tape& tape, const Tensor& x, const VlaParams& p) {
    auto hidden = relu(tape, add_row(tape, matmul(tape, x, p.ffn_in_weight), p.ffn_in_bias));
    return add_row(tape, matmul(tape, hidden, p.ffn_out_weight), p.ffn_out_bias);
}

}  // namespace

VlaVariant parse_vla_variant(std::string_view name) {
    if (name == "decoder") return VlaVariant::decoder;
    if (name == "mlp") return VlaVariant::mlp;
    if (name == "raw") return VlaVariant::raw;
    throw ConfigError("unknown adapter variant '" + std::string(name) + "' (decoder, mlp, raw)");
}

std::string_view to_string(VlaVariant variant) {
    switch (variant) {
        case VlaVariant::decoder: return "decoder";
        case VlaVariant::mlp: return "mlp";
        case VlaVariant::raw: return "raw";
    }
    return "decoder";
}

std::vector<std::pair<std::string, Tensor>> VlaParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (variant == VlaVariant::decoder) {
        out = {{"vla/query", query}, {"vla/key", key}, {"vla/value", value}, {"vla/output", output}};
    }
    if (variant != VlaVariant::raw) {
        out.emplace_back("vla/ffn_in_weight", ffn_in_weight);
        out.emplace_back("vla/ffn_in_bias", ffn_in_bias);
        out.emplace_back("vla/ffn_out_weight", ffn_out_weight);
        out.emplace_back("vla/ffn_out_bias", ffn_out_bias);
    }
    return out;
}

std::size_t VlaParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.size();
    return n;
}

VlaParams init_vla(std::uint64_t seed, VlaVariant variant, std::size_t channels, std::size_t hidden) {
    if (channels == 0) throw ConfigError("adapter needs a positive channel count");
    VlaParams p;
    p.variant = variant;
    p.channels = channels;
    if (variant == VlaVariant::raw) return p;
    if (hidden == 0) throw ConfigError("adapter hidden width must be positive");
    p.hidden = hidden;
    Rng rng(mix_seed(seed, 0x7a1));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(channels));
    if (variant == VlaVariant::decoder) {
        p.query = gaussian(rng, channels, channels, proj_std);
        p.key = gaussian(rng, channels, channels, proj_std);
        p.value = gaussian(rng, channels, channels, proj_std);
        p.output = Tensor::zeros({channels, channels}, true);
        p.ffn_in_weight = gaussian(rng, channels, hidden, std::sqrt(2.0 / static_cast<double>(channels)));
        p.ffn_in_bias = Tensor::zeros({1, hidden}, true);
        p.ffn_out_weight = Tensor::zeros({hidden, channels}, true);
        p.ffn_out_bias = Tensor::zeros({1, channels}, true);
    } else {
        p.ffn_in_weight = gaussian(rng, channels, hidden, std::sqrt(2.0 / static_cast<double>(channels)));
        p.ffn_in_bias = Tensor::zeros({1, hidden}, true);
        p.ffn_out_weight = gaussian(rng, hidden, channels, 1.0 / std::sqrt(static_cast<double>(hidden)));
        p.ffn_out_bias = Tensor::zeros({1, channels}, true);
    }
    return p;
}

Tensor vla_forward(Tape& tape, const Tensor& queries, const Tensor& cls, const VlaParams& params) {
    if (!queries.defined()) return Tensor{};
    if (queries.cols() != params.channels || cls.cols() != params.channels) {
        throw DimensionError("vla_forward: queries " + shape_string(queries.shape()) + " and CLS tokens " +
                             shape_string(cls.shape()) + " must have " + std::to_string(params.channels) +
                             " channels");
    }
    switch (params.variant) {
        case VlaVariant::raw:
            return queries;
        case VlaVariant::mlp:
            return feed_forward(tape, queries, params);
        case VlaVariant::decoder: {
            auto q = matmul(tape, queries, params.query);
            auto k = matmul(tape, cls, params.key);
            auto v = matmul(tape, cls, params.value);
            auto attention =
                row_softmax(tape, matmul(tape, q, transpose(tape, k)), std::sqrt(static_cast<double>(params.channels)));
            auto h = add(tape, queries, matmul(tape, matmul(tape, attention, v), params.output));
            return add(tape, h, feed_forward(tape, h, params));
        }
    }
    throw InternalError("vla_forward: unhandled variant");
}

}  // namespace cteach
