#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cteach/cli.hpp"
#include "cteach/config.hpp"
#include "cteach/errors.hpp"
#include "cteach/plm.hpp"
#include "cteach/training.hpp"

namespace py = pybind11;
using namespace cteach;

namespace {

template <class T>
py::array_t<T> array(const std::vector<T>& v, std::vector<py::ssize_t> shape) {
    py::array_t<T> out(shape);
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

py::dict report_dict(const MetricsReport& r) {
    py::dict d;
    d["pAcc"] = r.pacc;
    d["mIoU_S"] = r.miou_seen;
    d["mIoU_U"] = r.miou_unseen;
    d["hIoU"] = r.hiou;
    d["per_class"] = r.per_class;
    d["pixel_counts"] = r.pixel_counts;
    d["predicted_unseen"] = r.predicted_unseen;
    return d;
}

struct PyWorld {
    RunConfig config;
    World world;

    explicit PyWorld(const std::string& json) : config(parse_run_config(json)), world(World::make(config.world)) {}
};

py::dict train(const std::string& json, std::uint64_t seed, std::size_t iterations) {
    auto cfg = parse_run_config(json);
    cfg.train.seed = seed;
    cfg.train.iterations = iterations;
    cfg.resolve();
    const auto world = World::make(cfg.world);
    auto state = init_state(cfg.train, world.config.channels);
    std::vector<double> totals;
    {
        py::gil_scoped_release release;
        while (state.iteration < cfg.train.iterations) {
            const auto batch = training_batch(world, cfg.train, state.iteration);
            totals.push_back(train_step(state, cfg.train, world, batch).total);
        }
    }
    const auto scenes = eval_scenes(world, cfg.eval.scene_count);
    py::dict out = report_dict(evaluate_scenes(state.segmenter, scenes, world, cfg.train.gamma, thread_cap()));
    out["loss"] = totals;
    return out;
}

}  // namespace

PYBIND11_MODULE(_cteach, m) {
    m.doc() = "Zero-shot segmentation with a frozen teacher, at desk scale.";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);

    py::class_<Scene>(m, "Scene")
        .def_readonly("height", &Scene::height)
        .def_readonly("width", &Scene::width)
        .def_readonly("channels", &Scene::channels)
        .def_property_readonly("gt_labels",
                               [](const Scene& s) {
                                   return array(s.gt_labels, {static_cast<py::ssize_t>(s.height),
                                                              static_cast<py::ssize_t>(s.width)});
                               })
        .def_property_readonly("seen_labels",
                               [](const Scene& s) {
                                   return array(s.seen_labels, {static_cast<py::ssize_t>(s.height),
                                                                static_cast<py::ssize_t>(s.width)});
                               })
        .def_property_readonly("dense_tokens",
                               [](const Scene& s) {
                                   return array(s.dense_tokens,
                                                {static_cast<py::ssize_t>(s.height), static_cast<py::ssize_t>(s.width),
                                                 static_cast<py::ssize_t>(s.channels)});
                               })
        .def_property_readonly("cls_token", [](const Scene& s) {
            return array(s.cls_token, {static_cast<py::ssize_t>(s.channels)});
        });

    py::class_<PyWorld>(m, "World")
        .def(py::init<const std::string&>(), py::arg("config") = "{}")
        .def_property_readonly("seen", [](const PyWorld& w) { return w.world.vocab.seen; })
        .def_property_readonly("unseen", [](const PyWorld& w) { return w.world.vocab.unseen; })
        .def("scene", [](const PyWorld& w, std::uint64_t seed) { return w.world.scene(seed); }, py::arg("seed"))
        .def(
            "pseudo_labels",
            [](const PyWorld& w, const Scene& scene) {
                const auto found = discover_pseudo_labels(scene, w.config.train.plm);
                py::dict d;
                d["labels"] = array(found.labels.labels, {static_cast<py::ssize_t>(scene.height),
                                                          static_cast<py::ssize_t>(scene.width)});
                d["center_count"] = found.centers.size();
                d["kmeans_count"] = found.clusters.size();
                d["fused_count"] = found.fused.size();
                std::vector<double> purity;
                for (const auto& mask : found.fused.masks) purity.push_back(mask_purity(mask, scene.gt_labels));
                d["purity"] = purity;
                return d;
            },
            py::arg("scene"));

    m.def("harmonic_iou", &harmonic_iou, py::arg("miou_seen"), py::arg("miou_unseen"));
    m.def(
        "evaluate",
        [](const std::vector<int>& preds, const std::vector<int>& gts, std::size_t vocab_size, std::size_t unseen) {
            return report_dict(evaluate(preds, gts, Vocabulary::make(vocab_size, unseen)));
        },
        py::arg("preds"), py::arg("gts"), py::arg("vocab_size"), py::arg("unseen_count"));
    m.def(
        "gradient_suite",
        [](std::uint64_t seed) {
            std::vector<std::pair<std::string, double>> out;
            for (const auto& p : gradient_suite(seed)) out.emplace_back(p.name, p.max_rel_error);
            return out;
        },
        py::arg("seed") = 0);
    m.def("train", &train, py::arg("config") = "{}", py::arg("seed") = 0, py::arg("iterations") = 1000,
          "Train in memory and return held-out metrics plus the loss curve.");
    m.def(
        "main",
        [](std::vector<std::string> args) {
            args.insert(args.begin(), "cteach");
            std::vector<const char*> argv;
            for (const auto& a : args) argv.push_back(a.c_str());
            std::ostringstream out, err;
            const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Run a CLI subcommand; returns (exit code, stdout, stderr).");
}
