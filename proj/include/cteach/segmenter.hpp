#pragma once

// Small per-pixel segmentation network: two 3x3 convolutions with ReLU and a
// 1x1 projection to the teacher embedding width.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cteach/tensor.hpp"
#include "cteach/world.hpp"

namespace cteach {

struct SegmenterConfig {
    std::size_t input_channels = 16;
    std::size_t hidden1 = 32;
    std::size_t hidden2 = 32;
    std::size_t output_channels = 32;
};

struct SegmenterParams {
    SegmenterConfig config;
    Tensor conv1_weight;  // 9*input_channels x hidden1
    Tensor conv1_bias;    // 1 x hidden1
    Tensor conv2_weight;  // 9*hidden1 x hidden2
    Tensor conv2_bias;    // 1 x hidden2
    Tensor proj_weight;   // hidden2 x output_channels
    Tensor proj_bias;     // 1 x output_channels

    std::vector<std::pair<std::string, Tensor>> named() const;
    std::size_t parameter_count() const;
};

/// He-initialised weights (gain sqrt(2), fan-in scaled), zero biases.
/// Throws ConfigError when a width is below 4 or the output width differs
/// from `teacher_dim`.
SegmenterParams init_segmenter(std::uint64_t seed, const SegmenterConfig& config, std::size_t teacher_dim);

/// Dense features R for a batch, stored pixel-major: row b*L + l holds the
/// C channels of pixel l (row-major over the grid) of image b. The logical
/// layout is B x C x L.
struct DenseFeatures {
    std::size_t batch = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    Tensor pixels;

    std::size_t length() const { return height * width; }
    std::size_t channels() const { return pixels.cols(); }
    Shape bcl_shape() const { return {batch, channels(), length()}; }
};

/// Inputs of a batch of scenes laid out B x H x W x C_in.
std::vector<double> batch_inputs(std::span<const Scene> scenes);

DenseFeatures segment_forward(Tape& tape, const SegmenterParams& params, std::span<const double> inputs,
                              std::size_t batch, std::size_t height, std::size_t width);

std::vector<double> features_to_bcl(const DenseFeatures& features);
DenseFeatures features_from_bcl(std::span<const double> bcl, std::size_t batch, std::size_t channels,
                                std::size_t height, std::size_t width);

std::vector<int> flatten_labels(const std::vector<std::vector<int>>& grid);
std::vector<std::vector<int>> unflatten_labels(std::span<const int> flat, std::size_t height, std::size_t width);

}  // namespace cteach
