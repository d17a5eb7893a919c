#pragma once

// Pixel learning: pseudo labels for ignore regions from multi-scale K-Means
// over teacher tokens plus greedy mask fusion, and classifier weights for
// those regions generated from region centroids by a small adapter.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cteach/segmenter.hpp"
#include "cteach/tensor.hpp"
#include "cteach/world.hpp"

namespace cteach {

/// Pseudo ids start here, well clear of category ids and kIgnoreId.
inline constexpr int kPseudoBase = 1000;

enum class Distance { cosine, euclidean };
Distance parse_distance(std::string_view name);
std::string_view to_string(Distance distance);

/// Row-major H x W x C token grid view.
struct TokenGrid {
    std::span<const double> values;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;

    static TokenGrid of(const Scene& scene) {
        return TokenGrid{scene.dense_tokens, scene.height, scene.width, scene.channels};
    }
    std::span<const double> token(std::size_t pixel) const { return values.subspan(pixel * channels, channels); }
};

struct CenterOrigin {
    std::size_t scale = 0;
    std::size_t window_row = 0;
    std::size_t window_col = 0;
};

struct CenterSet {
    std::size_t channels = 0;
    std::vector<double> centers;  // size() x channels
    std::vector<CenterOrigin> origins;

    std::size_t size() const { return origins.size(); }
    std::span<const double> center(std::size_t i) const {
        return std::span<const double>(centers).subspan(i * channels, channels);
    }
    std::size_t count_at_scale(std::size_t scale) const;
};

/// One center per s x s window (stride s, edge windows clipped) that holds at
/// least one ignore pixel: the mean token of those ignore pixels.
CenterSet init_centers(const TokenGrid& tokens, std::span<const std::size_t> scales, const std::vector<bool>& ignore);

struct KMeansOptions {
    std::size_t max_iters = 10;
    Distance distance = Distance::cosine;
};

struct MaskSet {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<std::vector<std::size_t>> masks;  // sorted pixel indices, pairwise disjoint
    std::vector<double> centers;                  // masks.size() x channels, member means
    std::vector<int> assignment;                  // per pixel: mask index, -1 outside the ignore region
    std::vector<double> distortion;               // total distance after every assignment pass
    std::size_t iterations = 0;                   // center updates performed
    bool converged = false;

    std::size_t size() const { return masks.size(); }
    std::span<const double> center(std::size_t i) const {
        return std::span<const double>(centers).subspan(i * channels, channels);
    }
};

/// Point-to-center distance used by kmeans_ignore; `point` is normalised
/// first under Distance::cosine.
double cluster_distance(std::span<const double> point, std::span<const double> center, Distance distance);

/// Lloyd iterations restricted to ignore pixels, starting from `centers`.
/// Empty clusters are dropped.
MaskSet kmeans_ignore(const TokenGrid& tokens, const CenterSet& centers, const std::vector<bool>& ignore,
                      const KMeansOptions& options = {});

struct FusedMasks {
    std::vector<std::vector<std::size_t>> masks;    // unions, in emission order
    std::vector<std::vector<std::size_t>> members;  // input mask indices per fused mask
    std::size_t size() const { return masks.size(); }
};

/// Greedy NMS-style grouping: while the largest remaining cosine similarity
/// (self-similarity counts as 1) reaches `threshold`, take its row as seed,
/// group every remaining mask whose similarity to the seed exceeds the
/// threshold, emit the union and retire the whole group.
FusedMasks mask_fusion(const std::vector<std::vector<std::size_t>>& masks, std::span<const double> centers,
                       std::size_t channels, double threshold);

struct PseudoLabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> labels;  // seen ids, or pseudo_base + k for pixels of fused mask k
    int pseudo_base = kPseudoBase;
    std::size_t pseudo_count = 0;
};

PseudoLabelMap build_pseudo_labels(std::span<const int> seen_labels, std::size_t height, std::size_t width,
                                   const std::vector<std::vector<std::size_t>>& fused, int pseudo_base = kPseudoBase);

struct PlmOptions {
    std::vector<std::size_t> scales{3, 7};
    double fusion_threshold = 0.8;
    KMeansOptions kmeans;
};

/// init_centers -> kmeans_ignore -> mask_fusion -> build_pseudo_labels for one scene.
struct ScenePseudoLabels {
    CenterSet centers;
    MaskSet clusters;
    FusedMasks fused;
    PseudoLabelMap labels;
};
ScenePseudoLabels discover_pseudo_labels(const Scene& scene, const PlmOptions& options, int pseudo_base = kPseudoBase,
                                         const std::vector<bool>* ignore_override = nullptr);

/// Fraction of pixels agreeing with the majority ground-truth label.
double mask_purity(std::span<const std::size_t> mask, std::span<const int> gt_labels);

struct RegionCentroids {
    Tensor centroids;           // labels.size() x C; undefined when every label is excluded
    std::vector<int> labels;    // labels with at least one pixel, in request order
    std::vector<int> excluded;  // requested labels without pixels
};

/// Mean feature over batch and pixels of every requested label.
RegionCentroids region_centroids(Tape& tape, const DenseFeatures& features, std::span<const int> pixel_labels,
                                 std::span<const int> wanted);

enum class VlaVariant { decoder, mlp, raw };
VlaVariant parse_vla_variant(std::string_view name);
std::string_view to_string(VlaVariant variant);

struct VlaParams {
    VlaVariant variant = VlaVariant::decoder;
    std::size_t channels = 0;
    std::size_t hidden = 0;
    // decoder only
    Tensor query;
    Tensor key;
    Tensor value;
    Tensor output;
    // decoder feed-forward, or the whole mlp variant
    Tensor ffn_in_weight;
    Tensor ffn_in_bias;
    Tensor ffn_out_weight;
    Tensor ffn_out_bias;

    std::vector<std::pair<std::string, Tensor>> named() const;
    std::size_t parameter_count() const;
};

/// Decoder: random query/key/value projections, zero output projection and
/// zero feed-forward output so the block starts as the identity.
VlaParams init_vla(std::uint64_t seed, VlaVariant variant, std::size_t channels, std::size_t hidden);

/// Decoder: h = p + softmax(pWq (SWk)^T / sqrt(C)) SWv Wo; out = h + FFN(h),
/// with the batch CLS tokens S as keys and values. mlp: FFN(p). raw: p.
Tensor vla_forward(Tape& tape, const Tensor& queries, const Tensor& cls, const VlaParams& params);

/// Sum over rows of ||p_i - t_{id_i}||^2 divided by the row count; 0 when
/// there are no rows.
Tensor generate_loss(Tape& tape, const Tensor& generated_seen, std::span<const int> ids, const TextTable& table);

/// x = R . [T_seen ; P_u]^T: seen classes first (in `seen_ids` order), then
/// pseudo classes.
Tensor pixel_logits(Tape& tape, const Tensor& pixels, const Tensor& pseudo_classifiers, const TextTable& table,
                    std::span<const int> seen_ids);

/// Maps pixel labels to classifier columns: seen id -> position in
/// `seen_ids`, pseudo label -> seen_ids.size() + position in
/// `pseudo_labels`, kIgnoreId -> -1.
std::vector<int> encode_targets(std::span<const int> pixel_labels, std::span<const int> seen_ids,
                                std::span<const int> pseudo_labels);

struct PixelLossOptions {
    unsigned focal_gamma = 2;
    double dice_epsilon = 1.0;
};

struct PixelLosses {
    Tensor ce;
    Tensor focal;
    Tensor dice;
};

/// Cross-entropy, focal and soft dice over rows whose target is not -1.
/// Dice averages over the classes present among the targets.
PixelLosses pixel_losses(Tape& tape, const Tensor& logits, std::span<const int> targets,
                         const PixelLossOptions& options = {});

}  // namespace cteach
