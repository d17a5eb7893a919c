#pragma once

// Binary greymap (P5, maxval 255) output for label and weight maps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cteach {

std::vector<std::uint8_t> encode_pgm(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels);
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels);

/// Integer map to grey levels; values outside [0, 255] throw DataError.
std::vector<std::uint8_t> indexed_levels(std::span<const int> values);

/// Non-negative weights scaled so the maximum maps to 255.
std::vector<std::uint8_t> weight_levels(std::span<const double> weights);

struct PgmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;
};

PgmImage decode_pgm(std::span<const std::uint8_t> bytes);

}  // namespace cteach
