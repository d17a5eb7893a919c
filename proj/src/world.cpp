#include "cteach/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "cteach/errors.hpp"
#include "cteach/rng.hpp"

namespace cteach {

namespace {

void normalize(std::span<double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    const double n = std::sqrt(s);
    if (n == 0.0) throw NumericError("cannot normalize a zero vector");
    for (auto& x : v) x /= n;
}

constexpr std::uint32_t kSceneVersion = 1;

}  // namespace

Vocabulary Vocabulary::make(std::size_t total, std::size_t unseen_count) {
    Vocabulary v;
    for (std::size_t i = 0; i < total; ++i) {
        std::string name = "class_";
        if (i < 10) name += "0";
        name += std::to_string(i);
        v.categories.push_back(Category{static_cast<int>(i), std::move(name)});
        if (i + unseen_count >= total) {
            v.unseen.push_back(static_cast<int>(i));
        } else {
            v.seen.push_back(static_cast<int>(i));
        }
    }
    v.validate();
    return v;
}

void Vocabulary::validate() const {
    if (categories.size() < 2) throw ConfigError("vocabulary needs at least 2 categories");
    if (categories.size() >= static_cast<std::size_t>(kIgnoreId)) {
        throw ConfigError("vocabulary too large: ids must stay below the ignore id " + std::to_string(kIgnoreId));
    }
    for (std::size_t i = 0; i < categories.size(); ++i) {
        if (categories[i].id != static_cast<int>(i)) {
            throw ConfigError("category ids must be 0..n-1 in order; found " + std::to_string(categories[i].id) +
                              " at position " + std::to_string(i));
        }
    }
    if (seen.empty() || unseen.empty()) throw ConfigError("both the seen and the unseen split must be nonempty");
    std::set<int> all;
    for (int id : seen) {
        if (!contains(id)) throw ConfigError("seen id " + std::to_string(id) + " is not a category");
        if (!all.insert(id).second) throw ConfigError("duplicate seen id " + std::to_string(id));
    }
    for (int id : unseen) {
        if (!contains(id)) throw ConfigError("unseen id " + std::to_string(id) + " is not a category");
        if (!all.insert(id).second) throw ConfigError("id " + std::to_string(id) + " is both seen and unseen");
    }
    if (all.size() != categories.size()) throw ConfigError("the split must cover every category");
}

bool Vocabulary::is_seen(int id) const { return std::find(seen.begin(), seen.end(), id) != seen.end(); }

bool Vocabulary::is_unseen(int id) const { return std::find(unseen.begin(), unseen.end(), id) != unseen.end(); }

std::string vocabulary_to_json(const Vocabulary& vocab) {
    nlohmann::ordered_json doc;
    doc["categories"] = nlohmann::ordered_json::array();
    for (const auto& c : vocab.categories) doc["categories"].push_back({{"id", c.id}, {"name", c.name}});
    doc["seen"] = vocab.seen;
    doc["unseen"] = vocab.unseen;
    return doc.dump(2) + "\n";
}

Vocabulary vocabulary_from_json(std::string_view text) {
    Vocabulary vocab;
    try {
        auto doc = nlohmann::json::parse(text);
        int next = 0;
        for (const auto& c : doc.at("categories")) {
            if (c.is_string()) {
                vocab.categories.push_back(Category{next, c.get<std::string>()});
            } else {
                vocab.categories.push_back(Category{c.at("id").get<int>(), c.at("name").get<std::string>()});
            }
            ++next;
        }
        vocab.seen = doc.at("seen").get<std::vector<int>>();
        vocab.unseen = doc.at("unseen").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("vocabulary document: ") + e.what());
    }
    vocab.validate();
    return vocab;
}

TextTable::TextTable(std::size_t dim, std::vector<double> rows) : dim_(dim), rows_(std::move(rows)) {
    if (dim_ == 0 || rows_.size() % dim_ != 0) throw DimensionError("text table rows do not match its dimension");
}

std::span<const double> TextTable::row(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= count()) {
        throw DataError("category " + std::to_string(id) + " has no text embedding");
    }
    return std::span<const double>(rows_).subspan(static_cast<std::size_t>(id) * dim_, dim_);
}

TextTable embed_categories(const Vocabulary& vocab, std::uint64_t seed, std::size_t dim, double coherence) {
    if (vocab.size() < 2) throw ConfigError("embed_categories: need at least 2 categories");
    if (dim < 8) throw ConfigError("embed_categories: embedding dimension must be at least 8");
    if (!(coherence > 0.0 && coherence <= 1.0)) throw ConfigError("embed_categories: coherence must lie in (0, 1]");
    const std::size_t n = vocab.size();
    Rng rng(mix_seed(seed, 0x7e47));
    std::vector<double> rows(n * dim);
    for (auto& v : rows) v = rng.normal();
    std::span<double> all(rows);
    // Modified Gram-Schmidt while the rows can still be orthogonal.
    for (std::size_t i = 0; i < n; ++i) {
        auto ri = all.subspan(i * dim, dim);
        if (i < dim) {
            for (std::size_t k = 0; k < i; ++k) {
                auto rk = all.subspan(k * dim, dim);
                double dot = 0.0;
                for (std::size_t j = 0; j < dim; ++j) dot += ri[j] * rk[j];
                for (std::size_t j = 0; j < dim; ++j) ri[j] -= dot * rk[j];
            }
        }
        normalize(ri);
    }
    if (coherence < 1.0) {
        std::vector<double> shared(dim);
        for (auto& v : shared) v = rng.normal();
        normalize(shared);
        for (std::size_t i = 0; i < n; ++i) {
            auto ri = all.subspan(i * dim, dim);
            for (std::size_t j = 0; j < dim; ++j) ri[j] = coherence * ri[j] + (1.0 - coherence) * shared[j];
            normalize(ri);
        }
    }
    return TextTable(dim, std::move(rows));
}

InputRenderer InputRenderer::make(std::uint64_t seed, std::size_t input_channels, std::size_t dim) {
    if (input_channels == 0 || dim == 0) throw ConfigError("input renderer needs positive channel counts");
    InputRenderer r;
    r.input_channels = input_channels;
    r.dim = dim;
    r.projection.resize(input_channels * dim);
    Rng rng(mix_seed(seed, 0x1a9e));
    for (auto& v : r.projection) v = rng.normal();
    return r;
}

std::vector<bool> Scene::ignore_mask() const {
    std::vector<bool> mask(seen_labels.size());
    for (std::size_t p = 0; p < seen_labels.size(); ++p) mask[p] = seen_labels[p] == kIgnoreId;
    return mask;
}

void Scene::validate(const Vocabulary& vocab) const {
    const auto n = pixel_count();
    if (gt_labels.size() != n || seen_labels.size() != n || pixel_input.size() != n * input_channels ||
        dense_tokens.size() != n * channels || cls_token.size() != channels) {
        throw DimensionError("scene planes do not match its header sizes");
    }
    bool any_seen = false;
    for (std::size_t p = 0; p < n; ++p) {
        if (!vocab.contains(gt_labels[p])) throw DataError("scene label " + std::to_string(gt_labels[p]) + " unknown");
        const int expected = vocab.is_seen(gt_labels[p]) ? gt_labels[p] : kIgnoreId;
        if (seen_labels[p] != expected) throw DataError("seen labels disagree with the ground truth split");
        any_seen = any_seen || expected != kIgnoreId;
    }
    if (!any_seen) throw DataError("scene has no annotated (seen) pixel");
    for (double v : dense_tokens)
        if (!std::isfinite(v)) throw NumericError("scene tokens are not finite");
    for (double v : pixel_input)
        if (!std::isfinite(v)) throw NumericError("scene inputs are not finite");
    double norm = 0.0;
    for (double v : cls_token) norm += v * v;
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-9) throw NumericError("CLS token is not unit norm");
}

std::vector<int> mask_unseen(std::span<const int> gt_labels, const Vocabulary& vocab) {
    std::vector<int> out(gt_labels.size());
    for (std::size_t p = 0; p < gt_labels.size(); ++p) {
        const int id = gt_labels[p];
        if (!vocab.contains(id)) throw DataError("mask_unseen: unknown category id " + std::to_string(id));
        out[p] = vocab.is_seen(id) ? id : kIgnoreId;
    }
    return out;
}

Scene render_scene(const Vocabulary& vocab, const TextTable& table, const InputRenderer& renderer,
                   std::uint64_t seed, std::size_t height, std::size_t width, std::vector<int> gt_labels,
                   double noise_sigma, double input_noise) {
    if (gt_labels.size() != height * width) throw DimensionError("label map does not match the grid");
    if (renderer.dim != table.dim()) throw DimensionError("input renderer and text table dimensions differ");
    if (noise_sigma < 0.0 || input_noise < 0.0) throw ConfigError("noise levels must be non-negative");
    Scene s;
    s.height = height;
    s.width = width;
    s.channels = table.dim();
    s.input_channels = renderer.input_channels;
    s.seen_labels = mask_unseen(gt_labels, vocab);
    s.gt_labels = std::move(gt_labels);
    const auto n = s.pixel_count();
    const auto c = s.channels;
    const auto cin = s.input_channels;

    Rng token_rng(mix_seed(seed, 11));
    s.dense_tokens.resize(n * c);
    for (std::size_t p = 0; p < n; ++p) {
        auto t = table.row(s.gt_labels[p]);
        std::span<double> dst(s.dense_tokens.data() + p * c, c);
        for (std::size_t j = 0; j < c; ++j) dst[j] = t[j] + noise_sigma * token_rng.normal();
        normalize(dst);
    }
    s.cls_token.assign(c, 0.0);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t j = 0; j < c; ++j) s.cls_token[j] += s.dense_tokens[p * c + j];
    normalize(s.cls_token);

    Rng input_rng(mix_seed(seed, 12));
    s.pixel_input.resize(n * cin);
    for (std::size_t p = 0; p < n; ++p) {
        auto t = table.row(s.gt_labels[p]);
        for (std::size_t k = 0; k < cin; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += renderer.projection[k * c + j] * t[j];
            s.pixel_input[p * cin + k] = acc + input_noise * input_rng.normal();
        }
    }
    s.validate(vocab);
    return s;
}

Scene generate_scene(const Vocabulary& vocab, const TextTable& table, const InputRenderer& renderer,
                     std::uint64_t seed, const SceneSpec& spec) {
    const auto h = spec.height, w = spec.width, k = spec.region_count;
    if (k < 2) throw ConfigError("generate_scene: region_count must be at least 2");
    if (h < 8 || w < 8) throw ConfigError("generate_scene: grid must be at least 8x8");
    if (spec.noise_sigma < 0.0) throw ConfigError("generate_scene: noise_sigma must be non-negative");
    if (k > h * w) throw ConfigError("generate_scene: region_count exceeds the pixel count");
    if (k > vocab.size()) throw ConfigError("generate_scene: region_count exceeds the vocabulary size");

    Rng rng(mix_seed(seed, 10));
    // Region seeds, spread out by rejection sampling when possible.
    const double min_gap = 0.5 * std::sqrt(static_cast<double>(h * w) / static_cast<double>(k));
    std::vector<std::size_t> seeds;
    while (seeds.size() < k) {
        std::size_t candidate = 0;
        for (int attempt = 0; attempt < 200; ++attempt) {
            candidate = rng.index(h * w);
            bool ok = true;
            for (auto s : seeds) {
                const double di = static_cast<double>(s / w) - static_cast<double>(candidate / w);
                const double dj = static_cast<double>(s % w) - static_cast<double>(candidate % w);
                if (std::sqrt(di * di + dj * dj) < min_gap || s == candidate) ok = false;
            }
            if (ok) break;
        }
        if (std::find(seeds.begin(), seeds.end(), candidate) == seeds.end()) seeds.push_back(candidate);
    }

    std::vector<int> ids(vocab.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    ids.resize(k);
    if (std::none_of(ids.begin(), ids.end(), [&](int id) { return vocab.is_seen(id); })) {
        ids[0] = vocab.seen[rng.index(vocab.seen.size())];
    }

    std::vector<int> labels(h * w);
    for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t best = 0;
        long best_d = -1;
        for (std::size_t r = 0; r < k; ++r) {
            const long di = static_cast<long>(p / w) - static_cast<long>(seeds[r] / w);
            const long dj = static_cast<long>(p % w) - static_cast<long>(seeds[r] % w);
            const long d = di * di + dj * dj;
            if (best_d < 0 || d < best_d) {
                best_d = d;
                best = r;
            }
        }
        labels[p] = ids[best];
    }
    return render_scene(vocab, table, renderer, seed, h, w, std::move(labels), spec.noise_sigma, spec.input_noise);
}

std::vector<std::uint8_t> encode_scene(const Scene& scene) {
    io::ByteWriter out;
    out.raw("CTSC");
    out.u32(kSceneVersion);
    out.u32(static_cast<std::uint32_t>(scene.height));
    out.u32(static_cast<std::uint32_t>(scene.width));
    out.u32(static_cast<std::uint32_t>(scene.channels));
    out.u32(static_cast<std::uint32_t>(scene.input_channels));
    for (int v : scene.gt_labels) out.i32(v);
    for (int v : scene.seen_labels) out.i32(v);
    for (double v : scene.pixel_input) out.f64(v);
    for (double v : scene.dense_tokens) out.f64(v);
    for (double v : scene.cls_token) out.f64(v);
    return std::move(out.bytes());
}

Scene decode_scene(std::span<const std::uint8_t> bytes) {
    io::ByteReader in(bytes, "scene");
    if (in.raw(4) != "CTSC") throw IoError("scene: bad magic");
    if (auto version = in.u32(); version != kSceneVersion) {
        throw IoError("scene: unsupported version " + std::to_string(version));
    }
    Scene s;
    s.height = in.u32();
    s.width = in.u32();
    s.channels = in.u32();
    s.input_channels = in.u32();
    const auto n = s.height * s.width;
    in.need(n * 8 + n * (s.input_channels + s.channels) * 8 + s.channels * 8);
    s.gt_labels.resize(n);
    s.seen_labels.resize(n);
    for (auto& v : s.gt_labels) v = in.i32();
    for (auto& v : s.seen_labels) v = in.i32();
    s.pixel_input.resize(n * s.input_channels);
    s.dense_tokens.resize(n * s.channels);
    s.cls_token.resize(s.channels);
    for (auto& v : s.pixel_input) v = in.f64();
    for (auto& v : s.dense_tokens) v = in.f64();
    for (auto& v : s.cls_token) v = in.f64();
    if (in.remaining() != 0) throw IoError("scene: trailing bytes");
    return s;
}

void save_scene(const Scene& scene, const std::filesystem::path& path) { io::write_file(path, encode_scene(scene)); }

Scene load_scene(const std::filesystem::path& path) { return decode_scene(io::read_file(path)); }

}  // namespace cteach
