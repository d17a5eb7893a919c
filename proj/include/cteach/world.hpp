#pragma once

// Synthetic scenes and the frozen teacher that stands in for a pretrained
// vision-language encoder pair.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cteach {

/// Label of pixels whose annotation is withheld during training.
inline constexpr int kIgnoreId = 255;

struct Category {
    int id = 0;
    std::string name;
};

/// Category list with its seen/unseen partition. Ids are 0..size()-1.
struct Vocabulary {
    std::vector<Category> categories;
    std::vector<int> seen;
    std::vector<int> unseen;

    /// `total` categories named class_00.. with the last `unseen_count` unseen.
    static Vocabulary make(std::size_t total, std::size_t unseen_count);

    /// Throws ConfigError unless ids are 0..n-1, the split is a partition of
    /// them and both parts are nonempty.
    void validate() const;

    std::size_t size() const { return categories.size(); }
    bool contains(int id) const { return id >= 0 && static_cast<std::size_t>(id) < categories.size(); }
    bool is_seen(int id) const;
    bool is_unseen(int id) const;
};

std::string vocabulary_to_json(const Vocabulary& vocab);
Vocabulary vocabulary_from_json(std::string_view text);

/// Unit-norm C-vector per category, indexed by category id.
class TextTable {
public:
    TextTable() = default;
    TextTable(std::size_t dim, std::vector<double> rows);

    std::size_t dim() const { return dim_; }
    std::size_t count() const { return dim_ == 0 ? 0 : rows_.size() / dim_; }
    std::span<const double> row(int id) const;
    std::span<const double> values() const { return rows_; }

    bool operator==(const TextTable&) const = default;

private:
    std::size_t dim_ = 0;
    std::vector<double> rows_;
};

/// Builds the category embeddings. With coherence 1 the rows form a random
/// orthonormal set (when count <= dim); lower coherence blends every row with
/// one shared direction, making categories harder to tell apart.
TextTable embed_categories(const Vocabulary& vocab, std::uint64_t seed, std::size_t dim, double coherence = 1.0);

/// Fixed random projection that renders category embeddings into the
/// segmenter's input space.
struct InputRenderer {
    std::size_t input_channels = 0;
    std::size_t dim = 0;
    std::vector<double> projection;  // input_channels x dim

    static InputRenderer make(std::uint64_t seed, std::size_t input_channels, std::size_t dim);
};

struct SceneSpec {
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t region_count = 4;
    double noise_sigma = 0.1;   // teacher token noise
    double input_noise = 0.1;   // segmenter input noise
};

struct Scene {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::size_t input_channels = 0;
    std::vector<int> gt_labels;         // height*width, row-major
    std::vector<int> seen_labels;       // unseen pixels carry kIgnoreId
    std::vector<double> pixel_input;    // height*width x input_channels
    std::vector<double> dense_tokens;   // height*width x channels
    std::vector<double> cls_token;      // channels, unit norm

    std::size_t pixel_count() const { return height * width; }
    std::span<const double> token(std::size_t pixel) const {
        return std::span<const double>(dense_tokens).subspan(pixel * channels, channels);
    }
    std::vector<bool> ignore_mask() const;

    /// Checks sizes, the seen-label relation, finiteness and that at least
    /// one pixel is annotated.
    void validate(const Vocabulary& vocab) const;

    bool operator==(const Scene&) const = default;
};

/// Replaces unseen category ids by kIgnoreId. Throws DataError on ids
/// outside the vocabulary.
std::vector<int> mask_unseen(std::span<const int> gt_labels, const Vocabulary& vocab);

/// Voronoi partition of the grid into `region_count` regions with distinct
/// categories (at least one of them seen), teacher tokens
/// normalize(t + noise) and CLS token normalize(mean of tokens).
Scene generate_scene(const Vocabulary& vocab, const TextTable& table, const InputRenderer& renderer,
                     std::uint64_t seed, const SceneSpec& spec);

/// Rebuilds dense tokens, CLS token and inputs for an explicit label map.
Scene render_scene(const Vocabulary& vocab, const TextTable& table, const InputRenderer& renderer,
                   std::uint64_t seed, std::size_t height, std::size_t width, std::vector<int> gt_labels,
                   double noise_sigma, double input_noise);

// Binary scene files: "CTSC", u32 version, u32 H, W, C, C_in, then i32 planes
// gt_labels and seen_labels, then f64 planes pixel_input, dense_tokens and
// cls_token; little-endian.
std::vector<std::uint8_t> encode_scene(const Scene& scene);
Scene decode_scene(std::span<const std::uint8_t> bytes);
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

}  // namespace cteach
