#include "cteach/segmenter.hpp"

#include <cmath>

#include "cteach/errors.hpp"
#include "cteach/rng.hpp"

namespace cteach {

namespace {

Tensor he_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> w(fan_in * fan_out);
    for (auto& v : w) v = std_dev * rng.normal();
    return Tensor::parameter({fan_in, fan_out}, std::move(w));
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> SegmenterParams::named() const {
    return {{"segmenter/conv1_weight", conv1_weight}, {"segmenter/conv1_bias", conv1_bias},
            {"segmenter/conv2_weight", conv2_weight}, {"segmenter/conv2_bias", conv2_bias},
            {"segmenter/proj_weight", proj_weight},   {"segmenter/proj_bias", proj_bias}};
}

std::size_t SegmenterParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.size();
    return n;
}

SegmenterParams init_segmenter(std::uint64_t seed, const SegmenterConfig& config, std::size_t teacher_dim) {
    if (config.hidden1 < 4 || config.hidden2 < 4) throw ConfigError("segmenter widths must be at least 4");
    if (config.input_channels == 0) throw ConfigError("segmenter needs at least one input channel");
    if (config.output_channels != teacher_dim) {
        throw ConfigError("segmenter output width " + std::to_string(config.output_channels) +
                          " differs from the teacher embedding width " + std::to_string(teacher_dim));
    }
    Rng rng(mix_seed(seed, 0x5e6));
    SegmenterParams p;
    p.config = config;
    p.conv1_weight = he_weight(rng, 9 * config.input_channels, config.hidden1);
    p.conv1_bias = Tensor::zeros({1, config.hidden1}, true);
    p.conv2_weight = he_weight(rng, 9 * config.hidden1, config.hidden2);
    p.conv2_bias = Tensor::zeros({1, config.hidden2}, true);
    p.proj_weight = he_weight(rng, config.hidden2, config.output_channels);
    p.proj_bias = Tensor::zeros({1, config.output_channels}, true);
    return p;
}

std::vector<double> batch_inputs(std::span<const Scene> scenes) {
    std::vector<double> out;
    for (const auto& s : scenes) {
        if (s.height != scenes.front().height || s.width != scenes.front().width ||
            s.input_channels != scenes.front().input_channels) {
            throw DimensionError("batch scenes differ in size");
        }
        out.insert(out.end(), s.pixel_input.begin(), s.pixel_input.end());
    }
    return out;
}

DenseFeatures segment_forward(Tape& tape, const SegmenterParams& params, std::span<const double> inputs,
                              std::size_t batch, std::size_t height, std::size_t width) {
    const auto cin = params.config.input_channels;
    const auto count = batch * height * width;
    if (count == 0 || inputs.size() != count * cin) {
        throw DimensionError("segment_forward: expected " + std::to_string(batch) + "x" + std::to_string(height) +
                             "x" + std::to_string(width) + "x" + std::to_string(cin) + " inputs, got " +
                             std::to_string(inputs.size()) + " values");
    }
    auto x = Tensor::constant({count, cin}, std::vector<double>(inputs.begin(), inputs.end()));
    auto h1 = relu(tape, add_row(tape, matmul(tape, im2col3x3(tape, x, batch, height, width), params.conv1_weight),
                                 params.conv1_bias));
    auto h2 = relu(tape, add_row(tape, matmul(tape, im2col3x3(tape, h1, batch, height, width), params.conv2_weight),
                                 params.conv2_bias));
    auto out = add_row(tape, matmul(tape, h2, params.proj_weight), params.proj_bias);
    for (double v : out.values())
        if (!std::isfinite(v)) throw NumericError("segment_forward: non-finite features");
    return DenseFeatures{batch, height, width, out};
}

std::vector<double> features_to_bcl(const DenseFeatures& f) {
    const auto l = f.length(), c = f.channels();
    auto v = f.pixels.values();
    std::vector<double> out(f.batch * c * l);
    for (std::size_t b = 0; b < f.batch; ++b)
        for (std::size_t p = 0; p < l; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) out[(b * c + ch) * l + p] = v[(b * l + p) * c + ch];
    return out;
}

DenseFeatures features_from_bcl(std::span<const double> bcl, std::size_t batch, std::size_t channels,
                                std::size_t height, std::size_t width) {
    const auto l = height * width;
    if (bcl.size() != batch * channels * l) throw DimensionError("features_from_bcl: size mismatch");
    std::vector<double> rows(bcl.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < channels; ++ch)
            for (std::size_t p = 0; p < l; ++p) rows[(b * l + p) * channels + ch] = bcl[(b * channels + ch) * l + p];
    return DenseFeatures{batch, height, width, Tensor::constant({batch * l, channels}, std::move(rows))};
}

std::vector<int> flatten_labels(const std::vector<std::vector<int>>& grid) {
    std::vector<int> flat;
    for (const auto& row : grid) {
        if (row.size() != grid.front().size()) throw DimensionError("ragged label grid");
        flat.insert(flat.end(), row.begin(), row.end());
    }
    return flat;
}

std::vector<std::vector<int>> unflatten_labels(std::span<const int> flat, std::size_t height, std::size_t width) {
    if (flat.size() != height * width) throw DimensionError("unflatten_labels: size mismatch");
    std::vector<std::vector<int>> grid(height);
    for (std::size_t i = 0; i < height; ++i) grid[i].assign(flat.begin() + i * width, flat.begin() + (i + 1) * width);
    return grid;
}

}  // namespace cteach
