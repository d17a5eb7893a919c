// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "cteach/cli.hpp"
#include "cteach/config.hpp"
#include "cteach/rng.hpp"
#include "cteach/training.hpp"

using namespace cteach;

namespace {

// Pinned tolerances and budgets (seconds).
constexpr double kRoundingSlack = 0.05;     // percentage points, one-decimal rounding
constexpr double kOracleTolerance = 1e-10;  // loop oracles
constexpr double kResumeTolerance = 1e-12;
constexpr double kGlmMargin = 0.10;         // mIoU_U gain from the CLS token
constexpr double kCeMargin = 0.05;          // hIoU loss without CE
constexpr double kPoolingSlack = 0.02;
constexpr std::size_t kAblationSeeds = 5;
constexpr std::size_t kAblationIterations = 1000;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void verdict(int id, const char* name, bool ok, double elapsed, double budget, const std::string& detail) {
    const bool pass = ok && elapsed < budget;
    if (!pass) ++failures;
    std::printf("%s  [%2d] %-28s %s (%.1fs, budget %.0fs)\n", pass ? "PASS" : "FAIL", id, name, detail.c_str(), elapsed,
                budget);
    std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> unit(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    std::vector<double> out(v.begin(), v.end());
    for (auto& x : out) x /= std::sqrt(s);
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::vector<double> gaussian(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

// --- 1 ------------------------------------------------------------------------

// Seen classes 0,1 and unseen 2,3, kPairPixels pixels each; `es` pixels of
// class 0 read as 1 and `eu` of class 2 read as 3.
constexpr std::size_t kPairPixels = 20000;

MetricsReport two_pair_report(std::size_t es, std::size_t eu) {
    auto vocab = Vocabulary::make(4, 2);
    std::vector<int> gt, pred;
    for (int c = 0; c < 4; ++c) {
        for (std::size_t i = 0; i < kPairPixels; ++i) {
            gt.push_back(c);
            const std::size_t e = c == 0 ? es : c == 2 ? eu : 0;
            pred.push_back(i < e ? c + 1 : c);
        }
    }
    return evaluate(pred, gt, vocab);
}

// error count whose pair mIoU, ((n-e)/n + n/(n+e))/2, is closest to target
std::size_t errors_for(double target) {
    const double n = static_cast<double>(kPairPixels);
    std::size_t best = 0;
    double gap = 1e9;
    for (std::size_t e = 0; e < kPairPixels; ++e) {
        const double x = static_cast<double>(e);
        const double d = std::abs(0.5 * ((n - x) / n + n / (n + x)) - target);
        if (d < gap) gap = d, best = e;
    }
    return best;
}

void metric_arithmetic() {
    const auto t0 = Clock::now();
    struct Row {
        double s, u, h;
    };
    const Row rows[] = {{91.9, 77.8, 84.3}, {89.2, 82.2, 85.6}};
    bool ok = true;
    std::string detail;
    for (const auto& r : rows) {
        const double direct = 100.0 * harmonic_iou(r.s / 100.0, r.u / 100.0);
        const auto m = two_pair_report(errors_for(r.s / 100.0), errors_for(r.u / 100.0));
        const bool split_matches = std::abs(100.0 * m.miou_seen - r.s) <= 1e-2 &&
                                   std::abs(100.0 * m.miou_unseen - r.u) <= 1e-2;
        const double via_eval = 100.0 * m.hiou;
        ok = ok && split_matches && std::abs(direct - r.h) <= kRoundingSlack && std::abs(via_eval - r.h) <= kRoundingSlack;
        detail += fmt("(%.1f, %.1f) -> %.2f / evaluate %.2f; ", r.s, r.u, direct, via_eval);
    }
    verdict(1, "metric arithmetic", ok, seconds_since(t0), 1.0, detail);
}

// --- 2 ------------------------------------------------------------------------

void gradient_suite_check() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::size_t paths = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (const auto& p : gradient_suite(seed)) {
            ++paths;
            if (!(p.max_rel_error <= worst)) {
                worst = p.max_rel_error;
                worst_name = p.name;
            }
        }
    }
    verdict(2, "gradient suite", worst < kGradTolerance, seconds_since(t0), 120.0,
            std::to_string(paths) + " checks over 10 seeds, max rel error " + fmt("%.2e", worst) + " at " + worst_name);
}

// --- 3 ------------------------------------------------------------------------

void clustering_oracle() {
    const auto t0 = Clock::now();
    std::size_t mismatches = 0, rises = 0, unconverged = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(mix_seed(seed, 0xc1));
        const std::size_t h = 8, w = 8, c = 6;
        auto tokens = gaussian(rng, h * w * c);
        std::vector<bool> ignore(h * w);
        for (std::size_t p = 0; p < h * w; ++p) ignore[p] = rng.uniform() < 0.6;
        ignore[h * w / 2] = true;
        TokenGrid grid{tokens, h, w, c};
        const std::size_t scales[] = {3, 7};
        auto m = kmeans_ignore(grid, init_centers(grid, scales, ignore), ignore, KMeansOptions{200, Distance::cosine});
        if (!m.converged) ++unconverged;
        for (std::size_t i = 1; i < m.distortion.size(); ++i)
            if (m.distortion[i] > m.distortion[i - 1]) ++rises;
        for (std::size_t p = 0; p < h * w; ++p) {
            int nearest = -1;
            if (ignore[p]) {
                auto x = unit(grid.token(p));
                double best = 0.0;
                for (std::size_t k = 0; k < m.size(); ++k) {
                    const double d = 1.0 - dot(x, m.center(k)) / std::sqrt(dot(m.center(k), m.center(k)));
                    if (nearest < 0 || d < best) {
                        best = d;
                        nearest = static_cast<int>(k);
                    }
                }
            }
            if (m.assignment[p] != nearest) ++mismatches;
        }
    }
    verdict(3, "clustering oracle", mismatches == 0 && rises == 0 && unconverged == 0, seconds_since(t0), 30.0,
            std::to_string(mismatches) + " assignment mismatches, " + std::to_string(rises) + " distortion rises, " +
                std::to_string(unconverged) + " unconverged, 50 instances");
}

// --- 4 ------------------------------------------------------------------------

void fusion_properties() {
    const auto t0 = Clock::now();
    std::size_t broken = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(mix_seed(seed, 0xf5));
        const std::size_t n = 2 + rng.index(15), c = 2 + rng.index(6);
        std::vector<std::size_t> pixels(200);
        for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = i;
        std::vector<std::vector<std::size_t>> masks(n);
        for (auto p : pixels) {
            if (rng.uniform() < 0.3) continue;
            masks[rng.index(n)].push_back(p);
        }
        std::vector<double> centers = gaussian(rng, n * c);
        // Some near-duplicates so that groups actually form.
        for (std::size_t i = 1; i < n; i += 3)
            for (std::size_t d = 0; d < c; ++d) centers[i * c + d] = centers[(i - 1) * c + d] + 0.1 * rng.normal();
        const double lambda = 0.3 + 0.7 * rng.uniform();
        auto f = mask_fusion(masks, centers, c, lambda);

        std::set<std::size_t> input_union, output_union;
        std::size_t output_total = 0;
        for (const auto& m : masks) input_union.insert(m.begin(), m.end());
        for (const auto& m : f.masks) {
            output_union.insert(m.begin(), m.end());
            output_total += m.size();
        }
        std::vector<int> used(n, 0);
        for (const auto& g : f.members)
            for (auto k : g) ++used[k];
        const bool each_once = std::all_of(used.begin(), used.end(), [](int u) { return u == 1; });
        if (input_union != output_union || output_total != output_union.size() || !each_once) ++broken;
    }

    const std::vector<std::vector<std::size_t>> trace{{0}, {1}, {2}};
    const double s = std::sqrt(1.0 - 0.95 * 0.95);
    const std::vector<double> centers{1, 0, 0.95, s, 0, 1};
    auto f = mask_fusion(trace, centers, 2, 0.8);
    const bool trace_ok = f.size() == 2 && f.members[0] == std::vector<std::size_t>{0, 1} &&
                          f.members[1] == std::vector<std::size_t>{2};
    verdict(4, "fusion properties", broken == 0 && trace_ok, seconds_since(t0), 10.0,
            std::to_string(broken) + "/100 non-partitions; hand trace " + (trace_ok ? "{1+2, 3}" : "wrong"));
}

// --- 5 ------------------------------------------------------------------------

void coherent_purity() {
    const auto t0 = Clock::now();
    WorldConfig wc;
    wc.noise_sigma = 0.0;
    const auto world = World::make(wc);
    double worst = 1.0;
    std::size_t masks = 0, outside = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto scene = world.scene(mix_seed(seed, 0x9a));
        const auto found = discover_pseudo_labels(scene, PlmOptions{});
        for (const auto& m : found.fused.masks) {
            ++masks;
            worst = std::min(worst, mask_purity(m, scene.gt_labels));
            for (auto p : m)
                if (!world.vocab.is_unseen(scene.gt_labels[p])) ++outside;
        }
    }
    verdict(5, "coherent-limit purity", worst == 1.0 && outside == 0 && masks > 0, seconds_since(t0), 30.0,
            fmt("min purity %.4f over %.0f masks, %.0f pixels outside unseen regions", worst,
                static_cast<double>(masks), static_cast<double>(outside)));
}

// --- 6, 7, 8, 9 -------------------------------------------------------------------

struct Trained {
    MetricsReport metrics;
    TrainState state;
};

Trained train_and_evaluate(const std::string& overrides, std::uint64_t seed) {
    auto cfg = parse_run_config(overrides);
    cfg.train.seed = seed;
    cfg.train.iterations = kAblationIterations;
    cfg.resolve();
    const auto world = World::make(cfg.world);
    auto state = init_state(cfg.train, world.config.channels);
    while (state.iteration < cfg.train.iterations) {
        const auto batch = training_batch(world, cfg.train, state.iteration);
        train_step(state, cfg.train, world, batch);
    }
    const auto scenes = eval_scenes(world, cfg.eval.scene_count);
    auto metrics = evaluate_scenes(state.segmenter, scenes, world, cfg.train.gamma, thread_cap());
    return {metrics, std::move(state)};
}

struct Sweep {
    std::vector<double> hiou, miou_unseen;
    double seconds = 0.0;
};

Sweep sweep(const char* tag, const std::string& overrides, TrainState* keep_first = nullptr) {
    Sweep out;
    const auto t0 = Clock::now();
    for (std::uint64_t seed = 0; seed < kAblationSeeds; ++seed) {
        auto r = train_and_evaluate(overrides, seed);
        out.hiou.push_back(r.metrics.hiou);
        out.miou_unseen.push_back(r.metrics.miou_unseen);
        std::printf("      %-10s seed %llu  mIoU_S %.4f  mIoU_U %.4f  hIoU %.4f\n", tag,
                    static_cast<unsigned long long>(seed), r.metrics.miou_seen, r.metrics.miou_unseen, r.metrics.hiou);
        std::fflush(stdout);
        if (seed == 0 && keep_first) *keep_first = std::move(r.state);
    }
    out.seconds = seconds_since(t0);
    return out;
}

void gamma_monotonicity(const TrainState& state) {
    const auto t0 = Clock::now();
    const auto world = World::make(WorldConfig{});
    const auto scenes = eval_scenes(world, 32);
    std::string counts;
    std::uint64_t last = 0;
    bool ok = true;
    for (double g : {0.0, 0.5, 1.5, 5.0}) {
        const auto m = evaluate_scenes(state.segmenter, scenes, world, g, thread_cap());
        ok = ok && m.predicted_unseen >= last;
        last = m.predicted_unseen;
        counts += std::to_string(m.predicted_unseen) + " ";
    }
    verdict(9, "gamma monotonicity", ok, seconds_since(t0), 60.0, "unseen pixels at gamma 0/0.5/1.5/5: " + counts);
}

// --- 10 -----------------------------------------------------------------------

void determinism() {
    const auto t0 = Clock::now();
    auto cfg = parse_run_config(R"({"train": {"iterations": 40}})");
    cfg.resolve();
    const auto world = World::make(cfg.world);
    auto run = [&](std::size_t steps, TrainState state) {
        while (state.iteration < steps) {
            const auto batch = training_batch(world, cfg.train, state.iteration);
            train_step(state, cfg.train, world, batch);
        }
        return state;
    };
    const auto scenes = eval_scenes(world, cfg.eval.scene_count);
    auto a = run(40, init_state(cfg.train, world.config.channels));
    auto b = run(40, init_state(cfg.train, world.config.channels));
    const bool same_json = metrics_to_json(evaluate_scenes(a.segmenter, scenes, world, 1.5)) ==
                           metrics_to_json(evaluate_scenes(b.segmenter, scenes, world, 1.5));

    const auto hash = config_hash(cfg);
    auto straight = run(20, init_state(cfg.train, world.config.channels));
    auto half = run(10, init_state(cfg.train, world.config.channels));
    auto resumed = run(20, decode_checkpoint(encode_checkpoint(half, hash), cfg.train, world.config.channels, hash));
    double worst = 0.0;
    auto pa = straight.parameters(), pb = resumed.parameters();
    bool shapes = pa.size() == pb.size();
    for (std::size_t i = 0; shapes && i < pa.size(); ++i) {
        shapes = pa[i].second.size() == pb[i].second.size();
        for (std::size_t k = 0; shapes && k < pa[i].second.size(); ++k)
            worst = std::max(worst, std::abs(pa[i].second.values()[k] - pb[i].second.values()[k]));
    }
    verdict(10, "determinism and resume", same_json && shapes && worst <= kResumeTolerance, seconds_since(t0), 300.0,
            std::string("metrics JSON ") + (same_json ? "identical" : "differs") + fmt(", resume max |dw| %.1e", worst));
}

// --- 11 -----------------------------------------------------------------------

void infonce_edges() {
    const auto t0 = Clock::now();
    Tape tape;
    TokenBank empty(24);
    const double lone = infonce_global(tape, Tensor::constant({1, 4}, {0.1, 0.2, 0.3, 0.4}),
                                       Tensor::constant({1, 4}, {-1, 0.5, 2, 0}), empty, 0.07)
                            .item();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(mix_seed(seed, 0x1f));
        const std::size_t b = 1 + rng.index(4), c = 2 + rng.index(8), entries = rng.index(4);
        TokenBank bank(3);
        for (std::size_t e = 0; e < entries; ++e) bank.push(gaussian(rng, b * c), b, c);
        auto cls = gaussian(rng, b * c), pred = gaussian(rng, b * c);
        const double tau = 0.05 + rng.uniform();
        Tape t;
        const double got =
            infonce_global(t, Tensor::constant({b, c}, cls), Tensor::constant({b, c}, pred), bank, tau).item();
        double want = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            auto s = unit(std::span<const double>(cls).subspan(i * c, c));
            auto p = unit(std::span<const double>(pred).subspan(i * c, c));
            const double pos = std::exp(dot(s, p) / tau);
            double denom = pos;
            for (const auto& e : bank.entries())
                for (std::size_t k = 0; k < e.batch; ++k)
                    denom += std::exp(dot(unit(std::span<const double>(e.tokens).subspan(k * c, c)), p) / tau);
            want -= std::log(pos / denom);
        }
        want /= static_cast<double>(b);
        worst = std::max(worst, std::abs(got - want));
    }
    verdict(11, "infonce edge cases", lone == 0.0 && worst <= kOracleTolerance, seconds_since(t0), 5.0,
            fmt("empty bank loss %.1e, oracle max |diff| %.1e over 200 instances", lone, worst));
}

}  // namespace

int main() {
    std::printf("acceptance: 11 criteria\n");
    metric_arithmetic();
    gradient_suite_check();
    clustering_oracle();
    fusion_properties();
    coherent_purity();
    infonce_edges();
    determinism();

    TrainState reference;
    const auto base = sweep("attention", "{}", &reference);
    gamma_monotonicity(reference);
    const auto nocls = sweep("no-cls", R"({"losses": {"cls_token": false}})");
    const auto noce = sweep("no-ce", R"({"losses": {"ce": false}})");
    const auto mean_pool = sweep("mean", R"({"glm": {"pooling": "mean"}})");
    const auto max_pool = sweep("max", R"({"glm": {"pooling": "max"}})");

    const double u_on = median(base.miou_unseen), u_off = median(nocls.miou_unseen);
    verdict(6, "ablation: cls token", u_on - u_off >= kGlmMargin, base.seconds + nocls.seconds, 900.0,
            fmt("median mIoU_U %.4f with vs %.4f without (gap %.4f, need %.2f)", u_on, u_off, u_on - u_off, kGlmMargin));

    const double h_on = median(base.hiou), h_off = median(noce.hiou);
    verdict(7, "ablation: cross-entropy", h_on - h_off >= kCeMargin, base.seconds + noce.seconds, 900.0,
            fmt("median hIoU %.4f with vs %.4f without (gap %.4f, need %.2f)", h_on, h_off, h_on - h_off, kCeMargin));

    const double ha = median(base.hiou), hm = median(mean_pool.hiou), hx = median(max_pool.hiou);
    verdict(8, "pooling order", ha >= hm && hm >= hx - kPoolingSlack,
            base.seconds + mean_pool.seconds + max_pool.seconds, 1800.0,
            fmt("median hIoU attention %.4f, mean %.4f, max %.4f (slack %.2f)", ha, hm, hx, kPoolingSlack));

    std::printf("acceptance: %d of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
