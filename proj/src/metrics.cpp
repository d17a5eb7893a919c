#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

#include <json.hpp>

#include "cteach/errors.hpp"
#include "cteach/rng.hpp"
#include "cteach/training.hpp"

namespace cteach {

std::vector<int> infer(std::span<const double> features, std::size_t channels, const TextTable& table,
                       const Vocabulary& vocab, double gamma) {
    if (channels == 0 || features.size() % channels != 0) throw DimensionError("infer: ragged feature matrix");
    if (table.dim() != channels) {
        throw DimensionError("infer: " + std::to_string(channels) + "-channel features against " +
                             std::to_string(table.dim()) + "-channel text");
    }
    const std::size_t n = features.size() / channels, k = vocab.size();
    if (table.count() < k) throw DimensionError("infer: text table smaller than the vocabulary");
    std::vector<double> offset(k, 0.0);
    for (int id : vocab.unseen) offset[static_cast<std::size_t>(id)] = gamma;
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* f = features.data() + i * channels;
        double best = -std::numeric_limits<double>::infinity();
        int arg = 0;
        for (std::size_t j = 0; j < k; ++j) {
            auto t = table.row(static_cast<int>(j));
            double dot = 0.0;
            for (std::size_t c = 0; c < channels; ++c) dot += f[c] * t[c];
            const double logit = dot + offset[j];
            if (logit > best) {
                best = logit;
                arg = static_cast<int>(j);
            }
        }
        out[i] = arg;
    }
    return out;
}

std::vector<int> predict_scene(const SegmenterParams& params, const Scene& scene, const TextTable& table,
                               const Vocabulary& vocab, double gamma) {
    Tape tape;
    auto features = segment_forward(tape, params, scene.pixel_input, 1, scene.height, scene.width);
    return infer(features.pixels.values(), features.channels(), table, vocab, gamma);
}

double harmonic_iou(double miou_seen, double miou_unseen) {
    const double s = miou_seen + miou_unseen;
    return s > 0.0 ? 2.0 * miou_seen * miou_unseen / s : 0.0;
}

void ConfusionMatrix::add(int gt, int pred, std::uint64_t count) {
    const auto k = static_cast<int>(classes_);
    if (gt < 0 || gt >= k) throw DataError("unknown ground-truth id " + std::to_string(gt));
    if (pred < 0 || pred >= k) throw DataError("unknown predicted id " + std::to_string(pred));
    counts_[static_cast<std::size_t>(gt) * classes_ + static_cast<std::size_t>(pred)] += count;
}

void ConfusionMatrix::add(std::span<const int> gts, std::span<const int> preds) {
    if (gts.size() != preds.size()) {
        throw DimensionError("confusion: " + std::to_string(preds.size()) + " predictions for " +
                             std::to_string(gts.size()) + " labels");
    }
    for (std::size_t i = 0; i < gts.size(); ++i) add(gts[i], preds[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw DimensionError("confusion: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

MetricsReport ConfusionMatrix::report(const Vocabulary& vocab) const {
    if (vocab.size() != classes_) throw DimensionError("confusion: vocabulary size differs from class count");
    MetricsReport r;
    std::uint64_t correct = 0;
    std::vector<std::uint64_t> gt_total(classes_, 0), pred_total(classes_, 0);
    for (std::size_t g = 0; g < classes_; ++g)
        for (std::size_t p = 0; p < classes_; ++p) {
            const auto n = counts_[g * classes_ + p];
            gt_total[g] += n;
            pred_total[p] += n;
            r.total_pixels += n;
            if (g == p) correct += n;
        }
    for (std::size_t c = 0; c < classes_; ++c) {
        const auto id = static_cast<int>(c);
        r.pixel_counts[id] = gt_total[c];
        if (vocab.is_unseen(id)) r.predicted_unseen += pred_total[c];
        const auto tp = counts_[c * classes_ + c];
        const auto denom = gt_total[c] + pred_total[c] - tp;
        if (denom == 0) continue;
        r.per_class[id] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    auto split_mean = [&](const std::vector<int>& ids) {
        double acc = 0.0;
        std::size_t n = 0;
        for (int id : ids) {
            auto it = r.per_class.find(id);
            if (it == r.per_class.end()) continue;
            acc += it->second;
            ++n;
        }
        return n ? acc / static_cast<double>(n) : 0.0;
    };
    r.pacc = r.total_pixels ? static_cast<double>(correct) / static_cast<double>(r.total_pixels) : 0.0;
    r.miou_seen = split_mean(vocab.seen);
    r.miou_unseen = split_mean(vocab.unseen);
    r.hiou = harmonic_iou(r.miou_seen, r.miou_unseen);
    return r;
}

MetricsReport evaluate(std::span<const int> preds, std::span<const int> gts, const Vocabulary& vocab) {
    ConfusionMatrix cm(vocab.size());
    cm.add(gts, preds);
    return cm.report(vocab);
}

std::vector<Scene> eval_scenes(const World& world, std::size_t count) {
    std::vector<Scene> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(world.scene(mix_seed(mix_seed(world.config.seed, 0xe7a1), i)));
    return out;
}

MetricsReport evaluate_scenes(const SegmenterParams& params, std::span<const Scene> scenes, const World& world,
                              double gamma, std::size_t threads) {
    const std::size_t n = scenes.size();
    std::vector<ConfusionMatrix> partial(n, ConfusionMatrix(world.vocab.size()));
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < n; i += stride) {
            auto pred = predict_scene(params, scenes[i], world.table, world.vocab, gamma);
            partial[i].add(scenes[i].gt_labels, pred);
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    work(t, threads);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    ConfusionMatrix total(world.vocab.size());
    for (const auto& cm : partial) total.merge(cm);
    return total.report(world.vocab);
}

std::string metrics_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["pAcc"] = r.pacc;
    j["mIoU_S"] = r.miou_seen;
    j["mIoU_U"] = r.miou_unseen;
    j["hIoU"] = r.hiou;
    auto per_class = nlohmann::ordered_json::object();
    for (const auto& [id, iou] : r.per_class) per_class[std::to_string(id)] = iou;
    j["per_class"] = per_class;
    auto counts = nlohmann::ordered_json::object();
    for (const auto& [id, n] : r.pixel_counts) counts[std::to_string(id)] = n;
    j["pixel_counts"] = counts;
    j["total_pixels"] = r.total_pixels;
    j["predicted_unseen"] = r.predicted_unseen;
    return j.dump(2) + "\n";
}

}  // namespace cteach
