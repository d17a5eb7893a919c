#include "cteach/pgm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "binary_io.hpp"
#include "cteach/errors.hpp"

namespace cteach {

std::vector<std::uint8_t> encode_pgm(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels) {
    if (width == 0 || height == 0) throw DimensionError("pgm: empty image");
    if (pixels.size() != width * height) {
        throw DimensionError("pgm: " + std::to_string(pixels.size()) + " pixels for a " + std::to_string(width) +
                             "x" + std::to_string(height) + " image");
    }
    const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), pixels.begin(), pixels.end());
    return out;
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels) {
    io::write_file(path, encode_pgm(width, height, pixels));
}

std::vector<std::uint8_t> indexed_levels(std::span<const int> values) {
    std::vector<std::uint8_t> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] < 0 || values[i] > 255) throw DataError("pgm: index " + std::to_string(values[i]) + " out of range");
        out[i] = static_cast<std::uint8_t>(values[i]);
    }
    return out;
}

std::vector<std::uint8_t> weight_levels(std::span<const double> weights) {
    double hi = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w) || w < 0.0) throw DataError("pgm: weights must be finite and non-negative");
        hi = std::max(hi, w);
    }
    std::vector<std::uint8_t> out(weights.size(), 0);
    if (hi == 0.0) return out;
    for (std::size_t i = 0; i < weights.size(); ++i) out[i] = static_cast<std::uint8_t>(std::lround(255.0 * weights[i] / hi));
    return out;
}

PgmImage decode_pgm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto token = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
        if (t.empty()) throw IoError("pgm: truncated header");
        return t;
    };
    if (token() != "P5") throw IoError("pgm: not a binary greymap");
    PgmImage img;
    try {
        img.width = std::stoul(token());
        img.height = std::stoul(token());
        if (std::stoul(token()) != 255) throw IoError("pgm: only maxval 255 is supported");
    } catch (const std::logic_error&) {
        throw IoError("pgm: malformed header");
    }
    ++pos;
    if (bytes.size() - std::min(pos, bytes.size()) != img.width * img.height) throw IoError("pgm: pixel data size mismatch");
    img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
    return img;
}

}  // namespace cteach
