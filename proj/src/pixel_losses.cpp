#include <algorithm>
#include <set>
#include <string>

#include "cteach/errors.hpp"
#include "cteach/plm.hpp"

namespace cteach {

RegionCentroids region_centroids(Tape& tape, const DenseFeatures& features, std::span<const int> pixel_labels,
                                 std::span<const int> wanted) {
    if (pixel_labels.size() != features.pixels.rows()) {
        throw DimensionError("region_centroids: " + std::to_string(pixel_labels.size()) + " labels for " +
                             std::to_string(features.pixels.rows()) + " pixels");
    }
    RegionCentroids out;
    std::vector<Tensor> rows;
    for (int label : wanted) {
        std::vector<std::size_t> members;
        for (std::size_t p = 0; p < pixel_labels.size(); ++p)
            if (pixel_labels[p] == label) members.push_back(p);
        if (members.empty()) {
            out.excluded.push_back(label);
            continue;
        }
        rows.push_back(masked_mean_rows(tape, features.pixels, members));
        out.labels.push_back(label);
    }
    if (!rows.empty()) out.centroids = concat_rows(tape, rows);
    return out;
}

Tensor generate_loss(Tape& tape, const Tensor& generated_seen, std::span<const int> ids, const TextTable& table) {
    if (ids.empty()) return Tensor::scalar(0.0);
    if (!generated_seen.defined() || generated_seen.rows() != ids.size()) {
        throw DimensionError("generate_loss: one generated feature per seen id is required");
    }
    if (generated_seen.cols() != table.dim()) throw DimensionError("generate_loss: feature width differs from text");
    std::vector<double> targets;
    for (int id : ids) {
        auto t = table.row(id);
        targets.insert(targets.end(), t.begin(), t.end());
    }
    auto diff = sub(tape, generated_seen, Tensor::constant(generated_seen.shape(), std::move(targets)));
    return scale(tape, sum(tape, square(tape, diff)), 1.0 / static_cast<double>(ids.size()));
}

Tensor pixel_logits(Tape& tape, const Tensor& pixels, const Tensor& pseudo_classifiers, const TextTable& table,
                    std::span<const int> seen_ids) {
    const auto c = pixels.cols();
    if (table.dim() != c) throw DimensionError("pixel_logits: feature width differs from text width");
    std::vector<Tensor> parts;
    if (!seen_ids.empty()) {
        std::vector<double> text;
        for (int id : seen_ids) {
            auto t = table.row(id);
            text.insert(text.end(), t.begin(), t.end());
        }
        parts.push_back(Tensor::constant({seen_ids.size(), c}, std::move(text)));
    }
    if (pseudo_classifiers.defined()) {
        if (pseudo_classifiers.cols() != c) throw DimensionError("pixel_logits: pseudo classifier width mismatch");
        parts.push_back(pseudo_classifiers);
    }
    if (parts.empty()) throw DimensionError("pixel_logits: no classifiers");
    auto classifiers = parts.size() == 1 ? parts.front() : concat_rows(tape, parts);
    return matmul(tape, pixels, transpose(tape, classifiers));
}

std::vector<int> encode_targets(std::span<const int> pixel_labels, std::span<const int> seen_ids,
                                std::span<const int> pseudo_labels) {
    std::vector<int> out(pixel_labels.size());
    for (std::size_t p = 0; p < pixel_labels.size(); ++p) {
        const int label = pixel_labels[p];
        if (label == kIgnoreId) {
            out[p] = -1;
            continue;
        }
        auto s = std::find(seen_ids.begin(), seen_ids.end(), label);
        if (s != seen_ids.end()) {
            out[p] = static_cast<int>(s - seen_ids.begin());
            continue;
        }
        auto u = std::find(pseudo_labels.begin(), pseudo_labels.end(), label);
        if (u == pseudo_labels.end()) throw DataError("label " + std::to_string(label) + " has no classifier column");
        out[p] = static_cast<int>(seen_ids.size()) + static_cast<int>(u - pseudo_labels.begin());
    }
    return out;
}

PixelLosses pixel_losses(Tape& tape, const Tensor& logits, std::span<const int> targets,
                         const PixelLossOptions& options) {
    const auto n = logits.rows(), k = logits.cols();
    if (targets.size() != n) throw DimensionError("pixel_losses: one target per pixel row is required");
    std::vector<std::size_t> active_rows, active_cols;
    std::set<std::size_t> present;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] == -1) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= k) {
            throw DataError("pixel_losses: target " + std::to_string(targets[i]) + " has no classifier column");
        }
        active_rows.push_back(i);
        active_cols.push_back(static_cast<std::size_t>(targets[i]));
        present.insert(static_cast<std::size_t>(targets[i]));
    }
    PixelLosses out;
    if (active_rows.empty()) {
        out.ce = out.focal = out.dice = Tensor::scalar(0.0);
        return out;
    }
    out.ce = cross_entropy(tape, logits, targets, -1);

    auto x = active_rows.size() == n ? logits : gather_rows(tape, logits, active_rows);
    const auto m = active_rows.size();

    // focal: mean of (1 - p_t)^gamma * (-log p_t)
    auto log_pt = pick(tape, log_softmax_rows(tape, x), active_cols);
    auto one_minus = add_scalar(tape, scale(tape, exp(tape, log_pt), -1.0), 1.0);
    auto weight = Tensor::constant({m, 1}, std::vector<double>(m, 1.0));
    for (unsigned g = 0; g < options.focal_gamma; ++g) weight = mul(tape, weight, one_minus);
    out.focal = mean(tape, mul(tape, weight, scale(tape, log_pt, -1.0)));

    // dice: 1 - mean over present classes of (2 sum(p y) + eps) / (sum p + sum y + eps)
    auto probs = row_softmax(tape, x, 1.0);
    std::vector<double> onehot(m * k, 0.0), counts(k, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        onehot[i * k + active_cols[i]] = 1.0;
        counts[active_cols[i]] += 1.0;
    }
    auto intersection = column_sum(tape, mul(tape, probs, Tensor::constant({m, k}, std::move(onehot))));
    auto numerator = add_scalar(tape, scale(tape, intersection, 2.0), options.dice_epsilon);
    auto denominator =
        add(tape, add_scalar(tape, column_sum(tape, probs), options.dice_epsilon), Tensor::constant({1, k}, counts));
    const std::vector<std::size_t> classes(present.begin(), present.end());
    auto ratio = gather_cols(tape, div(tape, numerator, denominator), classes);
    out.dice = add_scalar(tape, scale(tape, mean(tape, ratio), -1.0), 1.0);
    return out;
}

}  // namespace cteach
