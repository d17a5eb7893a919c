#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "cteach/errors.hpp"
#include "cteach/world.hpp"

using namespace cteach;

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

struct Fixture {
    Vocabulary vocab = Vocabulary::make(12, 3);
    TextTable table = embed_categories(vocab, 5, 32);
    InputRenderer renderer = InputRenderer::make(6, 16, 32);
};

}  // namespace

TEST_CASE("vocabulary split is a partition") {
    auto v = Vocabulary::make(12, 3);
    CHECK(v.size() == 12);
    CHECK(v.seen.size() == 9);
    CHECK(v.unseen == std::vector<int>{9, 10, 11});
    CHECK_NOTHROW(v.validate());
    CHECK(v.is_seen(0));
    CHECK(v.is_unseen(11));

    auto bad = v;
    bad.unseen.push_back(0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(Vocabulary::make(4, 0), ConfigError);
    CHECK_THROWS_AS(Vocabulary::make(4, 4), ConfigError);
}

TEST_CASE("vocabulary JSON round trip") {
    auto v = Vocabulary::make(6, 2);
    auto back = vocabulary_from_json(vocabulary_to_json(v));
    CHECK(back.seen == v.seen);
    CHECK(back.unseen == v.unseen);
    REQUIRE(back.categories.size() == v.categories.size());
    CHECK(back.categories[3].name == v.categories[3].name);
    CHECK_THROWS_AS(vocabulary_from_json("{\"categories\": []}"), ConfigError);
}

TEST_CASE("embed_categories rows are unit norm and deterministic") {
    auto v = Vocabulary::make(12, 3);
    auto a = embed_categories(v, 42, 32);
    auto b = embed_categories(v, 42, 32);
    CHECK(a == b);
    CHECK_FALSE(a == embed_categories(v, 43, 32));
    for (int i = 0; i < 12; ++i) CHECK(std::abs(std::sqrt(dot(a.row(i), a.row(i))) - 1.0) < 1e-9);
    CHECK_THROWS_AS(embed_categories(v, 1, 4), ConfigError);
    CHECK_THROWS_AS(embed_categories(Vocabulary{{{0, "a"}}, {0}, {}}, 1, 16), ConfigError);
    CHECK_THROWS_AS(a.row(12), DataError);
}

TEST_CASE("embed_categories near-orthogonality over 50 seeds") {
    auto v = Vocabulary::make(20, 5);
    double worst = 0.0, mean_abs = 0.0;
    std::size_t pairs = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto t = embed_categories(v, seed, 64);
        for (int i = 0; i < 20; ++i)
            for (int j = i + 1; j < 20; ++j) {
                const double c = std::abs(dot(t.row(i), t.row(j)));
                worst = std::max(worst, c);
                mean_abs += c;
                ++pairs;
            }
    }
    CHECK(worst < 0.45);
    CHECK(mean_abs / static_cast<double>(pairs) < 2.0 / std::sqrt(64.0) + 0.1);
}

TEST_CASE("scene invariants") {
    Fixture f;
    SceneSpec spec;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto s = generate_scene(f.vocab, f.table, f.renderer, seed, spec);
        CHECK_NOTHROW(s.validate(f.vocab));
        CHECK(s.gt_labels.size() == 256);
        std::set<int> ids(s.gt_labels.begin(), s.gt_labels.end());
        CHECK(ids.size() == spec.region_count);
        bool any_seen = false;
        for (std::size_t p = 0; p < s.pixel_count(); ++p) {
            const int g = s.gt_labels[p];
            CHECK(s.seen_labels[p] == (f.vocab.is_seen(g) ? g : kIgnoreId));
            any_seen = any_seen || f.vocab.is_seen(g);
        }
        CHECK(any_seen);
        CHECK(std::abs(std::sqrt(dot(s.cls_token, s.cls_token)) - 1.0) < 1e-12);
    }
}

TEST_CASE("cls token is the normalised token mean") {
    Fixture f;
    auto s = generate_scene(f.vocab, f.table, f.renderer, 3, SceneSpec{});
    std::vector<double> mean(s.channels, 0.0);
    for (std::size_t p = 0; p < s.pixel_count(); ++p)
        for (std::size_t c = 0; c < s.channels; ++c) mean[c] += s.token(p)[c];
    const double cosine = dot(mean, s.cls_token) / std::sqrt(dot(mean, mean));
    CHECK(std::abs(cosine - 1.0) < 1e-12);
}

TEST_CASE("noise_sigma zero gives identical tokens per category") {
    Fixture f;
    SceneSpec spec;
    spec.noise_sigma = 0.0;
    auto s = generate_scene(f.vocab, f.table, f.renderer, 8, spec);
    for (std::size_t p = 0; p < s.pixel_count(); ++p)
        for (std::size_t q = p + 1; q < s.pixel_count(); ++q)
            if (s.gt_labels[p] == s.gt_labels[q]) CHECK(std::abs(dot(s.token(p), s.token(q)) - 1.0) < 1e-12);
}

TEST_CASE("coherence ordering over 20 seeds") {
    auto vocab = Vocabulary::make(12, 3);
    for (double sigma : {0.1, 0.3}) {
        double within = 0.0, cross = 0.0;
        std::size_t nw = 0, nc = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            auto table = embed_categories(vocab, seed, 64);
            auto renderer = InputRenderer::make(seed, 16, 64);
            SceneSpec spec;
            spec.noise_sigma = sigma;
            auto s = generate_scene(vocab, table, renderer, seed + 100, spec);
            for (std::size_t p = 0; p < s.pixel_count(); p += 3)
                for (std::size_t q = p + 1; q < s.pixel_count(); q += 5) {
                    const double c = dot(s.token(p), s.token(q));
                    if (s.gt_labels[p] == s.gt_labels[q]) {
                        within += c;
                        ++nw;
                    } else {
                        cross += c;
                        ++nc;
                    }
                }
        }
        within /= static_cast<double>(nw);
        cross /= static_cast<double>(nc);
        CHECK(within > cross);
        if (sigma == 0.1) CHECK(within - cross >= 0.3);
    }
}

TEST_CASE("region counts") {
    Fixture f;
    SceneSpec spec;
    spec.region_count = 1;
    CHECK_THROWS_AS(generate_scene(f.vocab, f.table, f.renderer, 1, spec), ConfigError);
    spec.region_count = 2;
    auto s = generate_scene(f.vocab, f.table, f.renderer, 1, spec);
    CHECK(std::set<int>(s.gt_labels.begin(), s.gt_labels.end()).size() == 2);
    spec.height = 4;
    CHECK_THROWS_AS(generate_scene(f.vocab, f.table, f.renderer, 1, spec), ConfigError);
}

TEST_CASE("mask_unseen") {
    auto v = Vocabulary::make(4, 2);  // seen {0,1}, unseen {2,3}
    std::vector<int> all_seen{0, 1, 1, 0};
    CHECK(mask_unseen(all_seen, v) == all_seen);

    std::vector<int> half(16);
    for (std::size_t i = 0; i < 16; ++i) half[i] = i < 8 ? 0 : 3;
    auto masked = mask_unseen(half, v);
    CHECK(std::count(masked.begin(), masked.end(), kIgnoreId) == 8);
    CHECK(half[15] == 3);

    std::vector<int> unknown{0, 9};
    CHECK_THROWS_AS(mask_unseen(unknown, v), DataError);
}

TEST_CASE("all-unseen scene violates the scene invariant") {
    Fixture f;
    std::vector<int> labels(64, f.vocab.unseen[0]);
    CHECK_THROWS_AS(render_scene(f.vocab, f.table, f.renderer, 1, 8, 8, labels, 0.1, 0.1), DataError);
}

TEST_CASE("scene binary round trip") {
    Fixture f;
    auto s = generate_scene(f.vocab, f.table, f.renderer, 11, SceneSpec{});
    auto bytes = encode_scene(s);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTSC");
    CHECK(decode_scene(bytes) == s);
    auto cut = std::span<const std::uint8_t>(bytes).first(bytes.size() - 3);
    CHECK_THROWS_AS(decode_scene(cut), IoError);
}

TEST_CASE("seed determinism") {
    Fixture f;
    CHECK(generate_scene(f.vocab, f.table, f.renderer, 9, SceneSpec{}) ==
          generate_scene(f.vocab, f.table, f.renderer, 9, SceneSpec{}));
    CHECK_FALSE(generate_scene(f.vocab, f.table, f.renderer, 9, SceneSpec{}) ==
                generate_scene(f.vocab, f.table, f.renderer, 10, SceneSpec{}));
}
