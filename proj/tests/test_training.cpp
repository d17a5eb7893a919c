#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cteach/config.hpp"
#include "cteach/errors.hpp"
#include "cteach/rng.hpp"
#include "cteach/training.hpp"

using namespace cteach;

namespace {

struct Setup {
    RunConfig run;
    World world;

    explicit Setup(std::string_view json = "{}") : run(parse_run_config(json)), world(World::make(run.world)) {}
    TrainConfig& train() { return run.train; }
};

std::vector<double> snapshot(const TrainState& s) {
    std::vector<double> out;
    for (const auto& [name, t] : s.parameters()) out.insert(out.end(), t.values().begin(), t.values().end());
    return out;
}

void run_steps(TrainState& state, const TrainConfig& config, const World& world, std::size_t steps) {
    for (std::size_t i = 0; i < steps; ++i) {
        auto batch = training_batch(world, config, state.iteration);
        train_step(state, config, world, batch);
    }
}

}  // namespace

TEST_CASE("total loss is the plain sum of enabled terms") {
    Tape t;
    LossTerms terms{Tensor::scalar(0.3), Tensor::scalar(0.5), Tensor::scalar(0.2), Tensor::scalar(0.1),
                    Tensor::scalar(0.4)};
    CHECK(std::abs(total_loss(t, terms).item() - 1.5) < 1e-15);

    LossTerms only_ce;
    only_ce.ce = Tensor::scalar(0.7);
    CHECK(total_loss(t, only_ce).item() == 0.7);
    CHECK(total_loss(t, LossTerms{}).item() == 0.0);

    terms.dice = Tensor::scalar(std::nan(""));
    try {
        total_loss(t, terms);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("dice") != std::string::npos);
    }
}

TEST_CASE("zero learning rate leaves parameters but rotates the bank") {
    Setup s(R"({"optim": {"learning_rate": 0.0, "weight_decay": 0.0}})");
    auto state = init_state(s.train(), s.world.config.channels);
    const auto before = snapshot(state);
    run_steps(state, s.train(), s.world, 3);
    CHECK(snapshot(state) == before);
    CHECK(state.bank.size() == 3);
    CHECK(state.iteration == 3);
    CHECK(state.adam.step == 3);
}

TEST_CASE("a step changes parameters and reports every part") {
    Setup s;
    auto state = init_state(s.train(), s.world.config.channels);
    const auto before = snapshot(state);
    auto batch = training_batch(s.world, s.train(), 0);
    auto report = train_step(state, s.train(), s.world, batch);
    CHECK(snapshot(state) != before);
    for (const char* k : {"global", "ce", "focal", "dice", "generate"}) CHECK(report.parts.count(k) == 1);
    double sum = 0.0;
    for (const auto& [k, v] : report.parts) sum += v;
    CHECK(std::abs(sum - report.total) < 1e-12);
    CHECK(report.pseudo_count > 0);
    CHECK(report.parts["global"] == 0.0);  // empty bank at the first step
}

TEST_CASE("disabled terms contribute exactly zero") {
    Setup s(R"({"losses": {"nel": false, "cls_token": false, "generate": false}})");
    auto state = init_state(s.train(), s.world.config.channels);
    auto batch = training_batch(s.world, s.train(), 0);
    auto report = train_step(state, s.train(), s.world, batch);
    CHECK(report.total == report.parts["ce"]);
    CHECK(report.parts["focal"] == 0.0);
    CHECK(report.parts["dice"] == 0.0);
}

TEST_CASE("overfitting a single scene drives cross-entropy down") {
    Setup s(R"({"optim": {"learning_rate": 0.01}, "train": {"batch_size": 1}})");
    auto state = init_state(s.train(), s.world.config.channels);
    const std::vector<Scene> batch{s.world.scene(77)};
    std::vector<double> ce;
    for (int i = 0; i < 50; ++i) ce.push_back(train_step(state, s.train(), s.world, batch).parts["ce"]);
    for (std::size_t i = 0; i + 10 < ce.size(); ++i) CHECK_MESSAGE(ce[i + 10] < ce[i], "step " << i);
}

TEST_CASE("inference offset flips a close call") {
    auto vocab = Vocabulary::make(2, 1);
    TextTable table(2, {1, 0, 0, 1});
    const std::vector<double> f{1.0, -0.2};
    CHECK(infer(f, 2, table, vocab, 0.0) == std::vector<int>{0});
    CHECK(infer(f, 2, table, vocab, 1.5) == std::vector<int>{1});
    const std::vector<double> tie{1.0, 1.0};
    CHECK(infer(tie, 2, table, vocab, 0.0) == std::vector<int>{0});
    CHECK_THROWS_AS(infer(f, 3, table, vocab, 0.0), DimensionError);
}

TEST_CASE("unseen prediction count is monotone in the offset") {
    auto vocab = Vocabulary::make(12, 3);
    auto table = embed_categories(vocab, 1, 16);
    Rng rng(3);
    std::vector<double> f(500 * 16);
    for (auto& x : f) x = rng.normal();
    std::size_t last = 0;
    for (double gamma : {0.0, 0.5, 1.5, 5.0}) {
        auto pred = infer(f, 16, table, vocab, gamma);
        const auto n = static_cast<std::size_t>(
            std::count_if(pred.begin(), pred.end(), [&](int p) { return vocab.is_unseen(p); }));
        CHECK(n >= last);
        last = n;
    }
    CHECK(last == 500);
}

TEST_CASE("metrics") {
    auto vocab = Vocabulary::make(4, 2);
    const std::vector<int> gt{0, 0, 1, 1, 2, 2, 3, 3};
    auto perfect = evaluate(gt, gt, vocab);
    CHECK(perfect.pacc == 1.0);
    CHECK(perfect.miou_seen == 1.0);
    CHECK(perfect.miou_unseen == 1.0);
    CHECK(perfect.hiou == 1.0);

    const std::vector<int> pred{0, 0, 1, 0, 2, 2, 3, 2};
    auto r = evaluate(pred, gt, vocab);
    CHECK(r.pacc == 0.75);
    CHECK(std::abs(r.per_class[0] - 2.0 / 3.0) < 1e-15);
    CHECK(r.per_class[1] == 0.5);
    CHECK(std::abs(r.miou_seen - 7.0 / 12.0) < 1e-15);
    CHECK(std::abs(r.miou_unseen - 7.0 / 12.0) < 1e-15);
    CHECK(r.predicted_unseen == 4);
    CHECK(r.pixel_counts[3] == 2);

    auto wide = Vocabulary::make(5, 2);  // class 2 is seen and never appears
    auto w = evaluate(pred, gt, wide);
    CHECK(w.per_class.count(4) == 0);
    CHECK_THROWS_AS(evaluate(std::vector<int>{9}, std::vector<int>{0}, vocab), DataError);
    CHECK_THROWS_AS(evaluate(std::vector<int>{0, 1}, std::vector<int>{0}, vocab), DimensionError);
}

TEST_CASE("harmonic IoU") {
    CHECK(std::abs(100.0 * harmonic_iou(0.919, 0.778) - 84.3) <= 0.05);
    CHECK(std::abs(100.0 * harmonic_iou(0.892, 0.822) - 85.6) <= 0.05);
    CHECK(harmonic_iou(0.0, 0.0) == 0.0);
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
        const double s = rng.uniform(), u = rng.uniform();
        const double h = harmonic_iou(s, u);
        CHECK(h >= std::min(s, u) - 1e-15);
        CHECK(h <= std::max(s, u) + 1e-15);
        CHECK(h <= 2.0 * std::min(s, u) + 1e-15);
    }
}

TEST_CASE("threaded evaluation matches serial") {
    Setup s;
    auto state = init_state(s.train(), s.world.config.channels);
    auto scenes = eval_scenes(s.world, 6);
    CHECK(evaluate_scenes(state.segmenter, scenes, s.world, 1.5, 1) ==
          evaluate_scenes(state.segmenter, scenes, s.world, 1.5, 3));
    CHECK(metrics_to_json(evaluate_scenes(state.segmenter, scenes, s.world, 1.5)).find("\"hIoU\"") !=
          std::string::npos);
}

TEST_CASE("checkpoint round trip") {
    Setup s;
    auto state = init_state(s.train(), s.world.config.channels);
    run_steps(state, s.train(), s.world, 3);
    const std::uint64_t hash = config_hash(s.run);
    auto bytes = encode_checkpoint(state, hash);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTCK");
    auto back = decode_checkpoint(bytes, s.train(), s.world.config.channels, hash);
    CHECK(encode_checkpoint(back, hash) == bytes);
    CHECK(back.iteration == 3);
    CHECK(back.bank == state.bank);

    CHECK_THROWS_AS(decode_checkpoint(bytes, s.train(), s.world.config.channels, hash + 1), IoError);
    auto cut = std::span<const std::uint8_t>(bytes).first(bytes.size() - 5);
    CHECK_THROWS_AS(decode_checkpoint(cut, s.train(), s.world.config.channels, hash), IoError);
    auto bad = bytes;
    bad[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(bad, s.train(), s.world.config.channels, hash), IoError);
}

TEST_CASE("resume replays an uninterrupted run") {
    Setup s;
    const std::uint64_t hash = config_hash(s.run);
    auto straight = init_state(s.train(), s.world.config.channels);
    run_steps(straight, s.train(), s.world, 20);

    auto first = init_state(s.train(), s.world.config.channels);
    run_steps(first, s.train(), s.world, 10);
    auto resumed = decode_checkpoint(encode_checkpoint(first, hash), s.train(), s.world.config.channels, hash);
    run_steps(resumed, s.train(), s.world, 10);

    const auto a = snapshot(straight), b = snapshot(resumed);
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    CHECK(worst <= 1e-12);
    CHECK(resumed.bank == straight.bank);
}

TEST_CASE("clone is deep") {
    Setup s;
    auto state = init_state(s.train(), s.world.config.channels);
    auto copy = state.clone();
    state.segmenter.proj_weight.mutable_values()[0] += 1.0;
    CHECK(copy.segmenter.proj_weight.values()[0] != state.segmenter.proj_weight.values()[0]);
}

TEST_CASE("loss csv") {
    StepReport r;
    r.iteration = 4;
    r.parts = {{"global", 0.5}, {"ce", 1.0}};
    r.total = 1.5;
    r.pseudo_count = 3;
    CHECK(loss_csv_header() == "iteration,global,ce,focal,dice,generate,total,pseudo_count\n");
    CHECK(loss_csv_row(r) == "4,0.5,1,0,0,0,1.5,3\n");
}
