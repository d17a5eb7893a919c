#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "cteach/errors.hpp"
#include "cteach/plm.hpp"

namespace cteach {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// Drops clusters without members and renumbers the assignment to match.
void drop_empty(std::vector<int>& assignment, std::vector<double>& centers, std::size_t channels,
                std::span<const std::size_t> pixels) {
    const std::size_t k = centers.size() / channels;
    std::vector<std::size_t> counts(k, 0);
    for (auto p : pixels) ++counts[static_cast<std::size_t>(assignment[p])];
    std::vector<int> remap(k, -1);
    std::vector<double> kept;
    int next = 0;
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;
        remap[c] = next++;
        kept.insert(kept.end(), centers.begin() + static_cast<std::ptrdiff_t>(c * channels),
                    centers.begin() + static_cast<std::ptrdiff_t>((c + 1) * channels));
    }
    for (auto p : pixels) assignment[p] = remap[static_cast<std::size_t>(assignment[p])];
    centers = std::move(kept);
}

}  // namespace

Distance parse_distance(std::string_view name) {
    if (name == "cosine") return Distance::cosine;
    if (name == "euclidean") return Distance::euclidean;
    throw ConfigError("unknown distance '" + std::string(name) + "' (cosine, euclidean)");
}

std::string_view to_string(Distance distance) { return distance == Distance::cosine ? "cosine" : "euclidean"; }

std::size_t CenterSet::count_at_scale(std::size_t scale) const {
    return static_cast<std::size_t>(
        std::count_if(origins.begin(), origins.end(), [&](const CenterOrigin& o) { return o.scale == scale; }));
}

CenterSet init_centers(const TokenGrid& tokens, std::span<const std::size_t> scales, const std::vector<bool>& ignore) {
    const auto h = tokens.height, w = tokens.width, c = tokens.channels;
    if (scales.empty()) throw ConfigError("init_centers: no window scales given");
    if (ignore.size() != h * w || tokens.values.size() != h * w * c) {
        throw DimensionError("init_centers: token grid and ignore mask sizes differ");
    }
    CenterSet out;
    out.channels = c;
    for (auto s : scales) {
        if (s < 1 || s > std::min(h, w)) {
            throw ConfigError("init_centers: window size " + std::to_string(s) + " outside [1, " +
                              std::to_string(std::min(h, w)) + "]");
        }
        for (std::size_t wr = 0; wr * s < h; ++wr) {
            for (std::size_t wc = 0; wc * s < w; ++wc) {
                std::vector<double> mean(c, 0.0);
                std::size_t count = 0;
                for (std::size_t i = wr * s; i < std::min(h, (wr + 1) * s); ++i) {
                    for (std::size_t j = wc * s; j < std::min(w, (wc + 1) * s); ++j) {
                        const auto p = i * w + j;
                        if (!ignore[p]) continue;
                        auto t = tokens.token(p);
                        for (std::size_t k = 0; k < c; ++k) mean[k] += t[k];
                        ++count;
                    }
                }
                if (count == 0) continue;
                for (auto& v : mean) v /= static_cast<double>(count);
                out.centers.insert(out.centers.end(), mean.begin(), mean.end());
                out.origins.push_back(CenterOrigin{s, wr, wc});
            }
        }
    }
    return out;
}

double cluster_distance(std::span<const double> point, std::span<const double> center, Distance distance) {
    if (distance == Distance::cosine) return 1.0 - cosine(point, center);
    double s = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) s += (point[i] - center[i]) * (point[i] - center[i]);
    return s;
}

MaskSet kmeans_ignore(const TokenGrid& tokens, const CenterSet& init, const std::vector<bool>& ignore,
                      const KMeansOptions& options) {
    const auto h = tokens.height, w = tokens.width, c = tokens.channels;
    if (options.max_iters < 1) throw ConfigError("kmeans_ignore: max_iters must be at least 1");
    if (ignore.size() != h * w || tokens.values.size() != h * w * c) {
        throw DimensionError("kmeans_ignore: token grid and ignore mask sizes differ");
    }
    MaskSet out;
    out.height = h;
    out.width = w;
    out.channels = c;
    out.assignment.assign(h * w, -1);

    std::vector<std::size_t> pixels;
    for (std::size_t p = 0; p < h * w; ++p)
        if (ignore[p]) pixels.push_back(p);
    if (pixels.empty()) {
        out.converged = true;
        return out;
    }
    if (init.size() == 0) throw ConfigError("kmeans_ignore: no initial centers for a nonempty ignore region");
    if (init.channels != c) throw DimensionError("kmeans_ignore: center width differs from token width");

    // Points, unit-normalised once for the cosine metric.
    std::vector<double> points(h * w * c, 0.0);
    for (auto p : pixels) {
        auto t = tokens.token(p);
        for (double v : t)
            if (!std::isfinite(v)) throw NumericError("kmeans_ignore: non-finite token");
        const double n = options.distance == Distance::cosine ? norm(t) : 1.0;
        for (std::size_t k = 0; k < c; ++k) points[p * c + k] = n > 0.0 ? t[k] / n : 0.0;
    }
    auto point = [&](std::size_t p) { return std::span<const double>(points).subspan(p * c, c); };

    std::vector<double> centers = init.centers;
    auto assign = [&](std::vector<int>& assignment) {
        const std::size_t k = centers.size() / c;
        double total = 0.0;
        for (auto p : pixels) {
            double best = 0.0;
            int arg = -1;
            for (std::size_t j = 0; j < k; ++j) {
                const double d =
                    cluster_distance(point(p), std::span<const double>(centers).subspan(j * c, c), options.distance);
                if (arg < 0 || d < best) {
                    best = d;
                    arg = static_cast<int>(j);
                }
            }
            assignment[p] = arg;
            total += best;
        }
        return total;
    };
    auto update = [&](const std::vector<int>& assignment) {
        const std::size_t k = centers.size() / c;
        std::vector<double> sums(k * c, 0.0);
        std::vector<std::size_t> counts(k, 0);
        for (auto p : pixels) {
            const auto j = static_cast<std::size_t>(assignment[p]);
            ++counts[j];
            for (std::size_t d = 0; d < c; ++d) sums[j * c + d] += points[p * c + d];
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (counts[j] == 0) continue;
            std::span<const double> mean(sums.data() + j * c, c);
            // A mean that cancels to zero has no direction; keep the old center.
            if (options.distance == Distance::cosine && norm(mean) < 1e-12) continue;
            for (std::size_t d = 0; d < c; ++d) centers[j * c + d] = sums[j * c + d] / static_cast<double>(counts[j]);
        }
    };

    std::vector<int> assignment(h * w, -1);
    out.distortion.push_back(assign(assignment));
    while (out.iterations < options.max_iters) {
        drop_empty(assignment, centers, c, pixels);
        update(assignment);
        std::vector<int> next(h * w, -1);
        out.distortion.push_back(assign(next));
        ++out.iterations;
        const bool same = next == assignment;
        assignment = std::move(next);
        if (same) {
            out.converged = true;
            break;
        }
    }
    drop_empty(assignment, centers, c, pixels);
    update(assignment);

    const std::size_t k = centers.size() / c;
    out.masks.assign(k, {});
    for (auto p : pixels) out.masks[static_cast<std::size_t>(assignment[p])].push_back(p);
    out.centers = std::move(centers);
    out.assignment = std::move(assignment);
    return out;
}

FusedMasks mask_fusion(const std::vector<std::vector<std::size_t>>& masks, std::span<const double> centers,
                       std::size_t channels, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("mask_fusion: threshold must lie in (0, 1]");
    const auto n = masks.size();
    if (channels == 0 || centers.size() != n * channels) {
        throw DimensionError("mask_fusion: " + std::to_string(n) + " masks but " + std::to_string(centers.size()) +
                             " center values");
    }
    FusedMasks out;
    if (n == 0) return out;

    std::vector<double> sim(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            sim[i * n + j] = i == j ? 1.0
                                    : cosine(centers.subspan(i * channels, channels),
                                             centers.subspan(j * channels, channels));
        }
    }
    std::vector<bool> alive(n, true);
    while (true) {
        double best = -2.0;
        std::size_t seed = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (!alive[i]) continue;
            for (std::size_t j = 0; j < n; ++j) {
                if (alive[j] && sim[i * n + j] > best) {
                    best = sim[i * n + j];
                    seed = i;
                }
            }
        }
        if (seed == n || best < threshold) break;
        std::vector<std::size_t> group{seed};
        for (std::size_t j = 0; j < n; ++j)
            if (j != seed && alive[j] && sim[seed * n + j] > threshold) group.push_back(j);
        std::sort(group.begin(), group.end());
        std::vector<std::size_t> merged;
        for (auto g : group) {
            merged.insert(merged.end(), masks[g].begin(), masks[g].end());
            alive[g] = false;
        }
        std::sort(merged.begin(), merged.end());
        merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
        out.masks.push_back(std::move(merged));
        out.members.push_back(std::move(group));
    }
    return out;
}

PseudoLabelMap build_pseudo_labels(std::span<const int> seen_labels, std::size_t height, std::size_t width,
                                   const std::vector<std::vector<std::size_t>>& fused, int pseudo_base) {
    if (seen_labels.size() != height * width) throw DimensionError("build_pseudo_labels: label map size mismatch");
    PseudoLabelMap out;
    out.height = height;
    out.width = width;
    out.pseudo_base = pseudo_base;
    out.pseudo_count = fused.size();
    out.labels.assign(seen_labels.begin(), seen_labels.end());
    std::vector<bool> taken(seen_labels.size(), false);
    for (std::size_t k = 0; k < fused.size(); ++k) {
        for (auto p : fused[k]) {
            if (p >= seen_labels.size()) throw DimensionError("build_pseudo_labels: pixel index out of range");
            if (seen_labels[p] != kIgnoreId) throw DataError("build_pseudo_labels: fused mask covers an annotated pixel");
            if (taken[p]) throw InternalError("build_pseudo_labels: fused masks overlap");
            taken[p] = true;
            out.labels[p] = pseudo_base + static_cast<int>(k);
        }
    }
    for (std::size_t p = 0; p < seen_labels.size(); ++p) {
        if (seen_labels[p] == kIgnoreId && !taken[p]) {
            throw DataError("build_pseudo_labels: fused masks leave ignore pixel " + std::to_string(p) + " unlabeled");
        }
    }
    return out;
}

ScenePseudoLabels discover_pseudo_labels(const Scene& scene, const PlmOptions& options, int pseudo_base,
                                         const std::vector<bool>* ignore_override) {
    const auto ignore = ignore_override ? *ignore_override : scene.ignore_mask();
    const auto grid = TokenGrid::of(scene);
    ScenePseudoLabels out;
    out.centers = init_centers(grid, options.scales, ignore);
    out.clusters = kmeans_ignore(grid, out.centers, ignore, options.kmeans);
    out.fused = mask_fusion(out.clusters.masks, out.clusters.centers, scene.channels, options.fusion_threshold);
    if (ignore_override) {
        // Labels are defined relative to the overridden region.
        std::vector<int> seen = scene.seen_labels;
        for (std::size_t p = 0; p < seen.size(); ++p)
            if (ignore[p]) seen[p] = kIgnoreId;
        out.labels = build_pseudo_labels(seen, scene.height, scene.width, out.fused.masks, pseudo_base);
    } else {
        out.labels = build_pseudo_labels(scene.seen_labels, scene.height, scene.width, out.fused.masks, pseudo_base);
    }
    return out;
}

double mask_purity(std::span<const std::size_t> mask, std::span<const int> gt_labels) {
    if (mask.empty()) return 1.0;
    std::map<int, std::size_t> counts;
    for (auto p : mask) ++counts[gt_labels[p]];
    std::size_t best = 0;
    for (const auto& [label, count] : counts) best = std::max(best, count);
    return static_cast<double>(best) / static_cast<double>(mask.size());
}

}  // namespace cteach
