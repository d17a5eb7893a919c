#include "cteach/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "binary_io.hpp"
#include "cteach/config.hpp"
#include "cteach/errors.hpp"
#include "cteach/pgm.hpp"
#include "cteach/rng.hpp"

namespace cteach {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::size_t thread_cap() {
    const char* v = std::getenv("CTEACH_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) return 1;
    return static_cast<std::size_t>(n);
}

namespace {

struct WriteFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw WriteFailure("cannot create directory " + dir.string());
}

template <class Fn>
void writing(Fn&& fn) {
    try {
        fn();
    } catch (const IoError& e) {
        throw WriteFailure(e.what());
    }
}

void write_text(const fs::path& path, std::string_view text) {
    writing([&] { io::write_text(path, text); });
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string gamma_tag(double g) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", g);
    return buf;
}

RunConfig config_from(const std::optional<std::string>& path) {
    if (path) return load_run_config(*path);
    RunConfig c;
    c.resolve();
    return c;
}

TrainState load_state(const fs::path& path, const RunConfig& cfg) {
    try {
        return load_checkpoint(path, cfg.train, cfg.world.channels, config_hash(cfg));
    } catch (const IoError& e) {
        throw CheckpointFailure(e.what());
    }
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> iterations;
    std::optional<std::string> resume;
    std::string out;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    auto cfg = config_from(a.config);
    if (a.seed) cfg.train.seed = *a.seed;
    if (a.iterations) cfg.train.iterations = *a.iterations;
    cfg.out_dir = a.out;
    cfg.resolve();
    const auto world = World::make(cfg.world);
    const fs::path dir(a.out);
    make_dir(dir / "checkpoints");

    const auto hash = config_hash(cfg);
    write_text(dir / "config.json", run_config_to_json(cfg));
    ojson manifest;
    manifest["version"] = std::string(code_version());
    manifest["seed"] = cfg.train.seed;
    manifest["config_hash"] = hex64(hash);
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    write_text(dir / "vocabulary.json", vocabulary_to_json(world.vocab));

    auto state = a.resume ? load_state(*a.resume, cfg) : init_state(cfg.train, world.config.channels);
    std::string csv = loss_csv_header();
    while (state.iteration < cfg.train.iterations) {
        const auto batch = training_batch(world, cfg.train, state.iteration);
        const auto report = train_step(state, cfg.train, world, batch);
        csv += loss_csv_row(report);
        if (cfg.checkpoint_every && state.iteration % cfg.checkpoint_every == 0) {
            char name[40];
            std::snprintf(name, sizeof name, "step_%06llu.ctck", static_cast<unsigned long long>(state.iteration));
            writing([&] { save_checkpoint(state, hash, dir / "checkpoints" / name); });
        }
    }
    write_text(dir / "loss.csv", csv);
    writing([&] { save_checkpoint(state, hash, dir / "checkpoint.ctck"); });

    const auto scenes = eval_scenes(world, cfg.eval.scene_count);
    const auto metrics = evaluate_scenes(state.segmenter, scenes, world, cfg.train.gamma, thread_cap());
    write_text(dir / "metrics.json", metrics_to_json(metrics));
    out << "trained " << state.iteration << " iterations; hIoU " << metrics.hiou << " (mIoU_S " << metrics.miou_seen
        << ", mIoU_U " << metrics.miou_unseen << ")\n";
    return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
    std::optional<std::string> checkpoint;
    std::string config;
    std::optional<double> gamma;
    std::optional<std::string> out;
    bool oracle = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    auto cfg = load_run_config(a.config);
    const double gamma = a.gamma.value_or(cfg.train.gamma);
    const auto world = World::make(cfg.world);
    const auto scenes = eval_scenes(world, cfg.eval.scene_count);
    MetricsReport metrics;
    if (a.oracle) {
        ConfusionMatrix cm(world.vocab.size());
        for (const auto& s : scenes) cm.add(s.gt_labels, s.gt_labels);
        metrics = cm.report(world.vocab);
    } else {
        if (!a.checkpoint) throw CheckpointFailure("eval needs --checkpoint unless --oracle is given");
        const auto state = load_state(*a.checkpoint, cfg);
        metrics = evaluate_scenes(state.segmenter, scenes, world, gamma, thread_cap());
    }
    const auto json = metrics_to_json(metrics);
    out << json;
    if (a.out) {
        make_dir(*a.out);
        const auto name = a.oracle ? std::string("metrics_oracle.json") : "metrics_gamma_" + gamma_tag(gamma) + ".json";
        write_text(fs::path(*a.out) / name, json);
    }
    return kExitOk;
}

// --- pseudo -----------------------------------------------------------------

struct PseudoArgs {
    std::optional<std::string> config;
    std::optional<std::string> checkpoint;
    std::uint64_t seed = 0;
    std::string out;
};

std::uint8_t slot_level(std::size_t index) { return static_cast<std::uint8_t>(index % 254 + 1); }

int cmd_pseudo(const PseudoArgs& a, std::ostream& out) {
    const auto cfg = config_from(a.config);
    const auto world = World::make(cfg.world);
    const auto& plm = cfg.train.plm;
    const fs::path dir(a.out);
    make_dir(dir);

    SegmenterParams segmenter = a.checkpoint ? load_state(*a.checkpoint, cfg).segmenter
                                             : init_segmenter(mix_seed(a.seed, 11), cfg.train.segmenter,
                                                              world.config.channels);
    const std::size_t h = world.config.height, w = world.config.width, n = h * w;

    ojson summary;
    summary["seed"] = a.seed;
    summary["scales"] = plm.scales;
    summary["fusion_threshold"] = plm.fusion_threshold;
    summary["all_ignore"] = cfg.pseudo.all_ignore;
    auto scenes_json = ojson::array();
    double purity_min = 1.0;
    for (std::size_t i = 0; i < cfg.pseudo.scene_count; ++i) {
        const auto seed = mix_seed(mix_seed(a.seed, 0x95e0d0), i);
        const auto scene = world.scene(seed);
        std::vector<bool> ignore = scene.ignore_mask();
        if (cfg.pseudo.all_ignore) ignore.assign(n, true);
        const auto found = discover_pseudo_labels(scene, plm, kPseudoBase, cfg.pseudo.all_ignore ? &ignore : nullptr);

        char name[32];
        std::snprintf(name, sizeof name, "scene_%03zu", i);
        const auto sdir = dir / name;
        make_dir(sdir);
        writing([&] { save_scene(scene, sdir / "scene.ctsc"); });
        writing([&] { write_pgm(sdir / "gt.pgm", w, h, indexed_levels(scene.gt_labels)); });

        const auto grid = TokenGrid::of(scene);
        ojson per_scale = ojson::object();
        for (auto s : plm.scales) {
            std::vector<std::size_t> members;
            for (std::size_t c = 0; c < found.centers.size(); ++c)
                if (found.centers.origins[c].scale == s) members.push_back(c);
            per_scale[std::to_string(s)] = members.size();
            std::vector<std::uint8_t> level(n, 0);
            for (std::size_t p = 0; p < n && !members.empty(); ++p) {
                if (!ignore[p]) continue;
                std::size_t best = 0;
                double best_d = cluster_distance(grid.token(p), found.centers.center(members[0]), plm.kmeans.distance);
                for (std::size_t m = 1; m < members.size(); ++m) {
                    const double d = cluster_distance(grid.token(p), found.centers.center(members[m]), plm.kmeans.distance);
                    if (d < best_d) {
                        best_d = d;
                        best = m;
                    }
                }
                level[p] = slot_level(best);
            }
            writing([&] { write_pgm(sdir / ("centers_s" + std::to_string(s) + ".pgm"), w, h, level); });
        }

        std::vector<std::uint8_t> kmeans(n, 0), fused(n, 0);
        for (std::size_t p = 0; p < n; ++p)
            if (found.clusters.assignment[p] >= 0) kmeans[p] = slot_level(static_cast<std::size_t>(found.clusters.assignment[p]));
        auto purities = ojson::array();
        double weighted = 0.0;
        std::size_t covered = 0;
        for (std::size_t k = 0; k < found.fused.size(); ++k) {
            const auto& mask = found.fused.masks[k];
            for (auto p : mask) fused[p] = slot_level(k);
            const double purity = mask_purity(mask, scene.gt_labels);
            purities.push_back(purity);
            weighted += purity * static_cast<double>(mask.size());
            covered += mask.size();
            purity_min = std::min(purity_min, purity);
        }
        writing([&] { write_pgm(sdir / "kmeans.pgm", w, h, kmeans); });
        writing([&] { write_pgm(sdir / "fused.pgm", w, h, fused); });

        Tape tape;
        const auto features = segment_forward(tape, segmenter, scene.pixel_input, 1, h, w);
        const auto pooled = attention_pool(tape, Tensor::constant({1, scene.channels}, scene.cls_token), features);
        writing([&] { write_pgm(sdir / "attention.pgm", w, h, weight_levels(pooled.weights.values())); });

        ojson sj;
        sj["index"] = i;
        sj["scene_seed"] = seed;
        sj["ignore_pixels"] = static_cast<std::size_t>(std::count(ignore.begin(), ignore.end(), true));
        sj["centers_per_scale"] = per_scale;
        sj["center_count"] = found.centers.size();
        sj["kmeans_count"] = found.clusters.size();
        sj["kmeans_iterations"] = found.clusters.iterations;
        sj["fused_count"] = found.fused.size();
        sj["pseudo_purity"] = purities;
        sj["purity"] = covered ? weighted / static_cast<double>(covered) : 1.0;
        scenes_json.push_back(sj);
    }
    summary["scenes"] = scenes_json;
    summary["min_purity"] = purity_min;
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    out << "wrote " << cfg.pseudo.scene_count << " scenes to " << dir.string() << "\n";
    return kExitOk;
}

// --- gradcheck --------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, std::ostream& out, std::ostream& err) {
    std::vector<std::string> failing;
    for (std::size_t k = 0; k < seeds; ++k) {
        const auto s = seed + k;
        for (const auto& path : gradient_suite(s)) {
            char line[160];
            std::snprintf(line, sizeof line, "seed %llu  %-40s %.3e\n", static_cast<unsigned long long>(s),
                          path.name.c_str(), path.max_rel_error);
            out << line;
            if (!(path.max_rel_error < kGradTolerance)) failing.push_back(path.name + " (seed " + std::to_string(s) + ")");
        }
    }
    if (failing.empty()) return kExitOk;
    err << "gradient check failed on:\n";
    for (const auto& f : failing) err << "  " << f << "\n";
    return kExitGradient;
}

}  // namespace

// --- gradient suite ---------------------------------------------------------

namespace {

Tensor random_leaf(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = scale * rng.normal();
    return Tensor::parameter({rows, cols}, std::move(v));
}

Tensor random_unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
    std::vector<double> v(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            v[r * cols + c] = rng.normal();
            s += v[r * cols + c] * v[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= std::sqrt(s);
    }
    return Tensor::constant({rows, cols}, std::move(v));
}

// Every weight of the adapter random so no path is trivially zero.
VlaParams random_vla(Rng& rng, VlaVariant variant, std::size_t c, std::size_t hidden) {
    auto p = init_vla(rng.engine()(), variant, c, hidden);
    for (auto& [name, t] : p.named()) {
        auto v = t.mutable_values();
        for (auto& x : v) x = 0.4 * rng.normal();
    }
    return p;
}

std::vector<Tensor> leaves_of(const VlaParams& p) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : p.named()) out.push_back(t);
    return out;
}

}  // namespace

std::vector<GradPath> gradient_suite(std::uint64_t seed) {
    std::vector<GradPath> results;
    Rng rng(mix_seed(seed, 0x67c4));

    for (const auto& prim : primitive_set()) {
        std::vector<double> x(6);
        for (auto& v : x) v = rng.normal();
        results.push_back({"primitive/" + prim.name, finite_difference_check(prim.probe, Tensor::constant({2, 3}, x))});
    }

    const std::size_t c = 8, b = 2, side = 4, l = side * side;
    const auto vocab = Vocabulary::make(6, 2);
    const auto table = embed_categories(vocab, mix_seed(seed, 3), c);
    const auto cls = random_unit_rows(rng, b, c);
    TokenBank bank(3);
    for (int i = 0; i < 2; ++i) bank.push(random_unit_rows(rng, b, c).values(), b, c);
    auto pixels = random_leaf(rng, b * l, c, 0.5);
    const DenseFeatures features{b, side, side, pixels};
    const Tensor pixel_leaf[] = {pixels};

    for (auto pooling : {Pooling::attention, Pooling::mean, Pooling::max}) {
        for (auto negatives : {Negatives::bank, Negatives::bank_and_batch}) {
            const auto name = "glm/" + std::string(to_string(pooling)) + "_infonce_" + std::string(to_string(negatives));
            results.push_back({name, finite_difference_check(
                                         [&](Tape& t) {
                                             auto pooled = pool_variant(t, cls, features, pooling);
                                             return infonce_global(t, cls, pooled.predicted, bank, 0.07, negatives);
                                         },
                                         pixel_leaf)});
        }
    }

    // Label map: seen ids 0..2 plus two pseudo regions.
    std::vector<int> labels(b * l);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        const auto r = rng.index(5);
        labels[p] = r < 3 ? vocab.seen[r] : kPseudoBase + static_cast<int>(r - 3);
    }
    for (int k = 0; k < 5; ++k) labels[static_cast<std::size_t>(k)] = k < 3 ? vocab.seen[static_cast<std::size_t>(k)] : kPseudoBase + k - 3;
    const std::vector<int> seen_q{vocab.seen[0], vocab.seen[1], vocab.seen[2]};
    const std::vector<int> pseudo_q{kPseudoBase, kPseudoBase + 1};
    std::vector<int> wanted = seen_q;
    wanted.insert(wanted.end(), pseudo_q.begin(), pseudo_q.end());
    const std::vector<std::size_t> seen_rows{0, 1, 2}, pseudo_rows{3, 4};
    const auto targets = encode_targets(labels, vocab.seen, pseudo_q);

    for (auto variant : {VlaVariant::decoder, VlaVariant::mlp, VlaVariant::raw}) {
        const auto vla = random_vla(rng, variant, c, 6);
        const auto tag = std::string(to_string(variant));

        auto queries = random_leaf(rng, 3, c, 0.5);
        auto leaves = leaves_of(vla);
        leaves.push_back(queries);
        results.push_back({"plm/generate_" + tag, finite_difference_check(
                                                      [&](Tape& t) {
                                                          return generate_loss(t, vla_forward(t, queries, cls, vla),
                                                                               seen_q, table);
                                                      },
                                                      leaves)});

        leaves = leaves_of(vla);
        leaves.push_back(pixels);
        results.push_back(
            {"plm/centroids_" + tag + "_pixel_losses", finite_difference_check(
                                                           [&](Tape& t) {
                                                               auto cents = region_centroids(t, features, labels, wanted);
                                                               auto gen = vla_forward(t, cents.centroids, cls, vla);
                                                               auto pu = gather_rows(t, gen, pseudo_rows);
                                                               auto x = pixel_logits(t, pixels, pu, table, vocab.seen);
                                                               auto parts = pixel_losses(t, x, targets);
                                                               auto g = generate_loss(t, gather_rows(t, gen, seen_rows),
                                                                                      seen_q, table);
                                                               return add(t, add(t, add(t, parts.ce, parts.focal), parts.dice), g);
                                                           },
                                                           leaves)});
    }

    auto logits = random_leaf(rng, 6, 4, 1.0);
    const Tensor logit_leaf[] = {logits};
    std::vector<int> small_targets{0, 3, 1, -1, 2, 3};
    results.push_back({"plm/cross_entropy", finite_difference_check(
                                                [&](Tape& t) { return pixel_losses(t, logits, small_targets).ce; },
                                                logit_leaf)});
    results.push_back({"plm/focal", finite_difference_check(
                                        [&](Tape& t) { return pixel_losses(t, logits, small_targets).focal; },
                                        logit_leaf)});
    results.push_back({"plm/dice", finite_difference_check(
                                       [&](Tape& t) { return pixel_losses(t, logits, small_targets).dice; },
                                       logit_leaf)});
    return results;
}

// --- entry point --------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Zero-shot segmentation with a frozen teacher, at desk scale"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train a segmenter and write a run directory");
    train_cmd->add_option("--config", train.config, "Run configuration JSON");
    train_cmd->add_option("--seed", train.seed, "Training seed (overrides train.seed)");
    train_cmd->add_option("--iterations", train.iterations, "Iteration budget (overrides train.iterations)");
    train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");
    train_cmd->add_option("--out", train.out, "Run directory")->required();

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on held-out scenes");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file");
    eval_cmd->add_option("--config", eval.config, "Run configuration JSON")->required();
    eval_cmd->add_option("--gamma", eval.gamma, "Offset added to unseen logits (overrides eval.gamma)");
    eval_cmd->add_option("--out", eval.out, "Directory for the metrics report");
    eval_cmd->add_flag("--oracle", eval.oracle, "Score ground truth against itself");

    PseudoArgs pseudo;
    auto* pseudo_cmd = app.add_subcommand("pseudo", "Export pseudo-label discovery maps for sampled scenes");
    pseudo_cmd->add_option("--config", pseudo.config, "Run configuration JSON");
    pseudo_cmd->add_option("--checkpoint", pseudo.checkpoint, "Checkpoint for the attention maps");
    pseudo_cmd->add_option("--seed", pseudo.seed, "Scene sampling seed");
    pseudo_cmd->add_option("--out", pseudo.out, "Output directory")->required();

    std::uint64_t grad_seed = 0;
    std::size_t grad_seeds = 1;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable path");
    grad_cmd->add_option("--seed", grad_seed, "First seed");
    grad_cmd->add_option("--seeds", grad_seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(train, out);
        if (eval_cmd->parsed()) return cmd_eval(eval, out);
        if (pseudo_cmd->parsed()) return cmd_pseudo(pseudo, out);
        if (grad_cmd->parsed()) return cmd_gradcheck(grad_seed, grad_seeds, out, err);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CheckpointFailure& e) {
        err << "error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const WriteFailure& e) {
        err << "error: " << e.what() << "\n";
        return kExitWrite;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}

}  // namespace cteach
