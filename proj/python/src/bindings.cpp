#include "wmlora/checkpoint.hpp"
#include "wmlora/config.hpp"
#include "wmlora/detection/stats.hpp"
#include "wmlora/harness/config.hpp"
#include "wmlora/harness/experiments.hpp"
#include "wmlora/lora/watermark_lora.hpp"
#include "wmlora/watermark/losses.hpp"

#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace wmlora;
using watermark::SecretMessage;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array& a) {
    std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

Array to_array(const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat64).contiguous();
    std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
    Array out(shape);
    std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * static_cast<std::size_t>(c.numel()));
    return out;
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
    if (o.is_none()) return nlohmann::json::object();
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict run_experiment(const std::string& name, const py::object& config, const std::string& cache_dir,
                        const std::string& out_dir, std::uint64_t seed, const py::dict& kwargs) {
    auto cfg = from_py(config);
    if (cfg.empty()) cfg = harness::default_config(harness::Profile::quick);
    nlohmann::json result;
    {
        py::gil_scoped_release release;
        harness::Pipeline p(cfg, cache_dir);
        if (name == "robustness") {
            std::vector<std::string> d = distortion::eval_suite_names();
            {
                py::gil_scoped_acquire g;
                if (kwargs.contains("distortions")) d = kwargs["distortions"].cast<std::vector<std::string>>();
            }
            result = harness::run_robustness_sweep(p, seed, d, out_dir);
        } else if (name == "samplers") {
            result = harness::run_sampler_sweep(p, seed, harness::default_sampler_cells(), out_dir);
        } else if (name == "alpha") {
            result = harness::run_alpha_sweep(p, seed, harness::section(cfg, "alpha_grid").get<std::vector<double>>(),
                                              out_dir);
        } else if (name == "attack") {
            result = harness::run_finetune_attack(p, seed, out_dir);
        } else if (name == "ablation") {
            result = harness::run_ablation_suite(p, seed, harness::default_ablation_cells(cfg), out_dir);
        } else if (name == "prvl") {
            result = harness::run_prvl_ablation(p, seed, out_dir);
        } else if (name == "collusion") {
            const auto& c = harness::section(cfg, "collusion");
            result = harness::run_collusion_experiment(p, seed, c.value("samples", 512), c.value("ratio", 0.5), out_dir);
        } else {
            throw ConfigError("unknown experiment '" + name + "'");
        }
    }
    return to_py(result);
}

}  // namespace

PYBIND11_MODULE(_wmlora, m) {
    m.doc() = "Watermark LoRA toy system";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<PayloadError>(m, "PayloadError", base.ptr());
    py::register_exception<TrainingError>(m, "TrainingError", base.ptr());
    py::register_exception<MergeError>(m, "MergeError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());

    py::class_<SecretMessage>(m, "SecretMessage")
        .def(py::init([](const std::vector<int>& bits) {
                 std::vector<std::uint8_t> b;
                 for (int v : bits) {
                     if (v != 0 && v != 1) throw PayloadError("bits must be 0 or 1");
                     b.push_back(static_cast<std::uint8_t>(v));
                 }
                 return SecretMessage(std::move(b));
             }),
             py::arg("bits"))
        .def_static("parse", &SecretMessage::parse, py::arg("text"), py::arg("length"))
        .def_static("random", &SecretMessage::random, py::arg("length"), py::arg("seed"))
        .def_static("zeros", &SecretMessage::zeros, py::arg("length"))
        .def_property_readonly("bits",
                               [](const SecretMessage& s) { return std::vector<int>(s.bits().begin(), s.bits().end()); })
        .def("complement", &SecretMessage::complement)
        .def("__len__", &SecretMessage::size)
        .def("__str__", &SecretMessage::to_string)
        .def("__repr__", [](const SecretMessage& s) { return "SecretMessage('" + s.to_string() + "')"; })
        .def(py::self == py::self);

    m.def("fpr", &detection::fpr, py::arg("k"), py::arg("tau"), "P(matches > tau) under k fair bits");
    m.def("fpr_incomplete_beta", &detection::fpr_incomplete_beta, py::arg("k"), py::arg("tau"));
    m.def("regularized_incomplete_beta", &detection::regularized_incomplete_beta, py::arg("x"), py::arg("a"),
          py::arg("b"));
    m.def("threshold_for_fpr", &detection::threshold_for_fpr, py::arg("k"), py::arg("target_fpr"));
    m.def(
        "bit_accuracy",
        [](const SecretMessage& s, const Array& bits) { return detection::bit_accuracy(s, to_tensor(bits)); },
        py::arg("secret"), py::arg("extracted"));
    m.def(
        "tpr",
        [](const Array& extracted, const SecretMessage& s, int tau) {
            return detection::evaluate_tpr(to_tensor(extracted), s, tau);
        },
        py::arg("extracted"), py::arg("secret"), py::arg("tau"));
    m.def(
        "collusion_table",
        [](const Array& extracted, const SecretMessage& s1, const SecretMessage& s2, double ratio) {
            return to_py(detection::collusion_table(to_tensor(extracted), s1, s2, ratio).to_json());
        },
        py::arg("extracted"), py::arg("s1"), py::arg("s2"), py::arg("merge_ratio") = 0.5);

    m.def(
        "prvl_loss",
        [](const Array& reference, const Array& watermarked, std::int64_t window) {
            return watermark::prvl_loss(to_tensor(reference), to_tensor(watermarked), window).item<double>();
        },
        py::arg("reference"), py::arg("watermarked"), py::arg("window") = 7);

    m.def(
        "init_mapper",
        [](std::int64_t l, std::int64_t r, const std::string& mode, std::uint64_t seed) {
            return to_array(lora::init_mapper(l, r, lora::parse_mapper_init(mode), seed).embeddings);
        },
        py::arg("payload_bits"), py::arg("rank"), py::arg("init") = "orthogonal", py::arg("seed") = 0);
    m.def(
        "scaling_diagonals",
        [](const Array& bits, const Array& embeddings) {
            return to_array(lora::scaling_diagonals(to_tensor(bits), to_tensor(embeddings)));
        },
        py::arg("bits"), py::arg("embeddings"));
    m.def(
        "lora_delta",
        [](const Array& A, const Array& B, const Array& diag) {
            return to_array(lora::lora_delta(to_tensor(A), to_tensor(B), to_tensor(diag)));
        },
        py::arg("A"), py::arg("B"), py::arg("diag"));

    m.def(
        "default_config",
        [](const std::string& profile) { return to_py(harness::default_config(harness::parse_profile(profile))); },
        py::arg("profile") = "full");
    m.def(
        "config_hash", [](const py::object& cfg) { return config_hash(from_py(cfg)); }, py::arg("config"));
    m.def(
        "checkpoint_metadata", [](const std::string& path) { return to_py(load_checkpoint(path).metadata); },
        py::arg("path"));
    m.def("run_experiment", &run_experiment, py::arg("name"), py::arg("config"), py::arg("cache_dir"),
          py::arg("out_dir"), py::arg("seed") = 0, py::arg("kwargs") = py::dict(),
          "Runs one experiment through the artifact cache and returns its result record.");
}
