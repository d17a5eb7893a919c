#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cteach/cli.hpp"
#include "cteach/pgm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "cteach");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cteach::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("cteach_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
    auto p = dir / "config.json";
    std::ofstream(p) << text;
    return p;
}

const char* kSmall = R"({"train": {"iterations": 10, "checkpoint_every": 5}, "eval": {"scene_count": 4}})";

// One trained run shared by the eval cases.
const fs::path& trained_run() {
    static const fs::path dir = [] {
        auto d = scratch("shared");
        auto cfg = write_config(d, kSmall);
        auto r = run({"train", "--config", cfg.string(), "--out", (d / "run").string()});
        REQUIRE(r.code == 0);
        return d / "run";
    }();
    return dir;
}

}  // namespace

TEST_CASE("missing config file names the path") {
    auto r = run({"train", "--config", "/nonexistent/cfg.json", "--out", scratch("missing").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("/nonexistent/cfg.json") != std::string::npos);
}

TEST_CASE("unknown config key is reported by path") {
    auto d = scratch("unknown");
    auto cfg = write_config(d, R"({"glm": {"temprature": 0.1}})");
    auto r = run({"train", "--config", cfg.string(), "--out", (d / "run").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("glm.temprature") != std::string::npos);
}

TEST_CASE("bad command line is a usage error") {
    CHECK(run({"train"}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
}

TEST_CASE("train smoke run writes a self-describing directory") {
    const auto& dir = trained_run();
    for (const char* f : {"config.json", "manifest.json", "vocabulary.json", "loss.csv", "checkpoint.ctck",
                          "metrics.json", "checkpoints/step_000005.ctck", "checkpoints/step_000010.ctck"})
        CHECK_MESSAGE(fs::exists(dir / f), f);
    auto metrics = json::parse(slurp(dir / "metrics.json"));
    for (const char* k : {"pAcc", "mIoU_S", "mIoU_U", "hIoU", "per_class"}) CHECK(metrics.contains(k));
    auto manifest = json::parse(slurp(dir / "manifest.json"));
    CHECK(manifest["seed"] == 0);
    CHECK(manifest["config_hash"].get<std::string>().size() == 16);

    std::istringstream csv(slurp(dir / "loss.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    CHECK(line == "iteration,global,ce,focal,dice,generate,total,pseudo_count");
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 10);
}

TEST_CASE("same config and seed give byte-identical metrics") {
    auto d = scratch("determinism");
    auto cfg = write_config(d, kSmall);
    CHECK(run({"train", "--config", cfg.string(), "--seed", "3", "--out", (d / "a").string()}).code == 0);
    CHECK(run({"train", "--config", cfg.string(), "--seed", "3", "--out", (d / "b").string()}).code == 0);
    CHECK(slurp(d / "a" / "metrics.json") == slurp(d / "b" / "metrics.json"));
    CHECK(slurp(d / "a" / "checkpoint.ctck") == slurp(d / "b" / "checkpoint.ctck"));
    CHECK(slurp(d / "a" / "loss.csv") == slurp(d / "b" / "loss.csv"));
}

TEST_CASE("resume continues the loss curve") {
    auto d = scratch("resume");
    auto cfg = write_config(d, kSmall);
    const auto& full = trained_run();
    auto r = run({"train", "--config", cfg.string(), "--resume", (full / "checkpoints/step_000005.ctck").string(),
                  "--out", (d / "run").string()});
    REQUIRE(r.code == 0);
    CHECK(slurp(d / "run" / "checkpoint.ctck") == slurp(full / "checkpoint.ctck"));
    CHECK(slurp(d / "run" / "metrics.json") == slurp(full / "metrics.json"));
}

TEST_CASE("eval gamma sweep is monotone in unseen predictions") {
    const auto& dir = trained_run();
    const auto cfg = (dir / "config.json").string(), ck = (dir / "checkpoint.ctck").string();
    auto out = scratch("sweep");
    long last = -1;
    for (const char* g : {"0", "1.5", "5"}) {
        auto r = run({"eval", "--checkpoint", ck, "--config", cfg, "--gamma", g, "--out", out.string()});
        REQUIRE(r.code == 0);
        auto m = json::parse(r.out);
        const long n = m["predicted_unseen"].get<long>();
        CHECK(n >= last);
        last = n;
        CHECK(fs::exists(out / (std::string("metrics_gamma_") + g + ".json")));
    }
}

TEST_CASE("oracle eval scores one everywhere") {
    const auto& dir = trained_run();
    auto r = run({"eval", "--config", (dir / "config.json").string(), "--oracle"});
    REQUIRE(r.code == 0);
    auto m = json::parse(r.out);
    for (const char* k : {"pAcc", "mIoU_S", "mIoU_U", "hIoU"}) CHECK(m[k].get<double>() == 1.0);
}

TEST_CASE("checkpoint problems exit with 3") {
    const auto& dir = trained_run();
    const auto cfg = (dir / "config.json").string();
    CHECK(run({"eval", "--checkpoint", "/nonexistent.ctck", "--config", cfg}).code == 3);
    CHECK(run({"eval", "--config", cfg}).code == 3);

    auto d = scratch("hash");
    auto other = write_config(d, R"({"glm": {"temperature": 0.2}})");
    auto r = run({"eval", "--checkpoint", (dir / "checkpoint.ctck").string(), "--config", other.string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("hash") != std::string::npos);

    auto truncated = d / "cut.ctck";
    auto bytes = slurp(dir / "checkpoint.ctck");
    std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK(run({"eval", "--checkpoint", truncated.string(), "--config", cfg}).code == 3);
}

TEST_CASE("pseudo export") {
    auto d = scratch("pseudo");
    auto cfg = write_config(d, R"({"world": {"noise_sigma": 0.0}})");
    auto r = run({"pseudo", "--config", cfg.string(), "--out", (d / "out").string()});
    REQUIRE(r.code == 0);
    auto summary = json::parse(slurp(d / "out" / "summary.json"));
    CHECK(summary["min_purity"].get<double>() == 1.0);
    CHECK(summary["scenes"].size() == 4);
    for (const char* f : {"scene.ctsc", "gt.pgm", "centers_s3.pgm", "centers_s7.pgm", "kmeans.pgm", "fused.pgm",
                          "attention.pgm"})
        CHECK_MESSAGE(fs::exists(d / "out" / "scene_000" / f), f);
    const auto raw = slurp(d / "out" / "scene_000" / "fused.pgm");
    auto pgm = cteach::decode_pgm(std::span(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
    CHECK(pgm.width == 16);
    CHECK(pgm.height == 16);
}

TEST_CASE("pseudo center counts over a fully ignored grid") {
    auto d = scratch("pseudo14");
    auto cfg = write_config(d, R"({"world": {"height": 14, "width": 14}, "pseudo": {"all_ignore": true, "scene_count": 2}})");
    REQUIRE(run({"pseudo", "--config", cfg.string(), "--out", (d / "out").string()}).code == 0);
    auto summary = json::parse(slurp(d / "out" / "summary.json"));
    for (const auto& s : summary["scenes"]) {
        CHECK(s["center_count"] == 29);
        CHECK(s["centers_per_scale"]["3"] == 25);
        CHECK(s["centers_per_scale"]["7"] == 4);
    }
}

TEST_CASE("fusion threshold one keeps every cluster") {
    auto d = scratch("lambda1");
    auto cfg = write_config(d, R"({"plm": {"fusion_threshold": 1.0}})");
    REQUIRE(run({"pseudo", "--config", cfg.string(), "--out", (d / "out").string()}).code == 0);
    auto summary = json::parse(slurp(d / "out" / "summary.json"));
    for (const auto& s : summary["scenes"]) CHECK(s["fused_count"] == s["kmeans_count"]);
}

TEST_CASE("unwritable output exits with 4") {
    auto d = scratch("write");
    std::ofstream(d / "blocker") << "x";
    CHECK(run({"pseudo", "--out", (d / "blocker" / "out").string()}).code == 4);
    auto cfg = write_config(d, kSmall);
    CHECK(run({"train", "--config", cfg.string(), "--out", (d / "blocker" / "run").string()}).code == 4);
}

TEST_CASE("gradcheck passes and a corrupted adjoint is caught") {
    auto r = run({"gradcheck", "--seed", "0", "--seeds", "1"});
    CHECK(r.code == 0);
    CHECK(r.out.find("primitive/matmul") != std::string::npos);
    CHECK(r.out.find("glm/attention_infonce_bank") != std::string::npos);

    auto log = scratch("faulty") / "log.txt";
    const std::string cmd = std::string("CTEACH_CORRUPT_ADJOINT=matmul ") + CTEACH_FAULTY_BINARY +
                            " gradcheck --seed 0 --seeds 1 > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 5);
    const auto text = slurp(log);
    CHECK(text.find("primitive/matmul") != std::string::npos);

    const std::string clean = std::string(CTEACH_BINARY) + " gradcheck --seeds 1 > /dev/null 2>&1";
    CHECK(std::system(clean.c_str()) == 0);
}
