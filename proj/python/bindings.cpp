#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <stdexcept>
#include <utility>

#include "hfgd/audit.hpp"
#include "hfgd/config.hpp"
#include "hfgd/data.hpp"
#include "hfgd/metrics.hpp"
#include "hfgd/model.hpp"
#include "hfgd/tensor.hpp"

namespace py = pybind11;
using namespace hfgd;

namespace {

// Partial key=value text overlays the defaults, like the CLI's --config.
ModelConfig config_from_text(const std::string& text) {
    KeyValues kv = ModelConfig().to_kv();
    const KeyValues parsed = KeyValues::parse(text);
    for (const auto& [k, v] : parsed.items()) {
        if (!kv.has(k)) throw std::invalid_argument("unknown key '" + k + "'");
        kv.set(k, v);
    }
    ModelConfig cfg = ModelConfig::from_kv(kv);
    cfg.validate();
    return cfg;
}

SceneSpec spec_with(int image_size, int num_classes) {
    SceneSpec spec;
    spec.image_size = image_size;
    spec.num_classes = num_classes;
    spec.validate();
    return spec;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Two-branch stop-gradient segmentation core";

    py::class_<Tensor>(m, "Tensor")
        .def_static(
            "from_data",
            [](Shape shape, std::vector<double> data, bool requires_grad) {
                return Tensor::from_data(std::move(shape), std::move(data),
                                         requires_grad);
            },
            py::arg("shape"), py::arg("data"), py::arg("requires_grad") = false)
        .def_static(
            "zeros",
            [](Shape shape, bool requires_grad) {
                return Tensor::zeros(std::move(shape), requires_grad);
            },
            py::arg("shape"), py::arg("requires_grad") = false)
        .def_static(
            "full",
            [](Shape shape, double value, bool requires_grad) {
                return Tensor::full(std::move(shape), value, requires_grad);
            },
            py::arg("shape"), py::arg("value"), py::arg("requires_grad") = false)
        .def_static("scalar", &Tensor::scalar, py::arg("value"))
        .def_property_readonly("shape",
                               [](const Tensor& t) { return t.shape(); })
        .def_property_readonly("requires_grad",
                               [](const Tensor& t) { return t.requires_grad(); })
        .def("numel", &Tensor::numel)
        .def("value", &Tensor::value)
        .def("tolist", [](const Tensor& t) { return t.data(); })
        .def("__repr__", [](const Tensor& t) {
            std::string s = "Tensor(shape=[";
            for (size_t i = 0; i < t.shape().size(); ++i) {
                if (i) s += ",";
                s += std::to_string(t.shape()[i]);
            }
            return s + "])";
        });

    m.def("add", &add);
    m.def("sub", &sub);
    m.def("mul", &mul);
    m.def("divide", &divide);
    m.def("add_scalar", &add_scalar);
    m.def("scale", &scale);
    m.def("relu", &relu);
    m.def("matmul", &matmul);
    m.def("reshape",
          [](const Tensor& x, Shape shape) { return reshape(x, std::move(shape)); });
    m.def("softmax", &softmax, py::arg("x"), py::arg("axis"));
    m.def("sum_all", &sum_all);
    m.def("mean_all", &mean_all);
    m.def("cross_entropy", &cross_entropy, py::arg("logits"), py::arg("labels"),
          py::arg("ignore_index") = -1);
    m.def("stop_gradient", &stop_gradient);

    m.def(
        "backward",
        [](const Tensor& loss,
           const std::vector<std::pair<std::string, Tensor>>& params) {
            std::vector<NamedParam> named;
            named.reserve(params.size());
            for (const auto& [n, t] : params) named.push_back({n, t});
            const GradientMap grads = backward(loss, named);
            py::dict out;
            for (const auto& [n, g] : grads.entries()) {
                out[py::str(n)] = g.data();
            }
            return out;
        },
        py::arg("loss"), py::arg("params"),
        "Reverse-mode sweep; returns {name: flat gradient list}. Parameters "
        "the loss cannot reach get exact zeros.");

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_static("from_text", &config_from_text, py::arg("text"),
                    "Overlay partial key=value text onto the defaults.")
        .def("to_text",
             [](const ModelConfig& c) { return c.to_kv().serialize(); })
        .def_readwrite("num_classes", &ModelConfig::num_classes)
        .def_readwrite("width_mult", &ModelConfig::width_mult)
        .def_readwrite("target_os", &ModelConfig::target_os)
        .def_readwrite("cae_enabled", &ModelConfig::cae_enabled)
        .def_readwrite("hfg_guidance_enabled", &ModelConfig::hfg_guidance_enabled)
        .def_readwrite("hfgm_aa_enabled", &ModelConfig::hfgm_aa_enabled)
        .def_readwrite("lateral_stop_grad_enabled",
                       &ModelConfig::lateral_stop_grad_enabled)
        .def_readwrite("car_weight", &ModelConfig::car_weight);

    py::class_<Model>(m, "Model")
        .def(py::init([](const ModelConfig& cfg, std::uint64_t seed) {
                 return new Model(cfg, seed);
             }),
             py::arg("config"), py::arg("seed") = 0)
        .def_property_readonly("config",
                               [](const Model& m_) { return m_.config(); })
        .def("param_names",
             [](Model& m_) {
                 std::vector<std::string> names;
                 for (const auto& p : m_.parameters()) names.push_back(p.name);
                 return names;
             })
        .def(
            "student_logits",
            [](Model& m_, const Tensor& image) {
                NoGradGuard ng;
                Tensor img = image;
                if (img.ndim() == 3) {
                    img = reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)});
                }
                return m_.forward(img, nullptr, NormMode::eval).student_logits;
            },
            py::arg("image"),
            "Eval-mode student logits [B,C,H,W]; accepts [3,H,W] or [B,3,H,W].")
        .def(
            "predict",
            [](Model& m_, const Tensor& image) {
                NoGradGuard ng;
                Tensor img = image;
                if (img.ndim() == 3) {
                    img = reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)});
                }
                const Tensor logits =
                    m_.forward(img, nullptr, NormMode::eval).student_logits;
                return argmax_classes(logits);
            },
            py::arg("image"), "Flat per-pixel class indices (row-major).")
        .def("token_similarity", [](const Model& m_) {
            return token_similarity_matrix(m_.tokens());
        });

    m.def(
        "generate_sample",
        [](std::uint64_t seed, int image_size, int num_classes) {
            const SegSample s =
                generate_sample(seed, spec_with(image_size, num_classes));
            const std::vector<int> labels(s.labels.begin(), s.labels.end());
            return py::make_tuple(s.image, labels);
        },
        py::arg("seed"), py::arg("image_size") = 64, py::arg("num_classes") = 6,
        "Deterministic synthetic sample: ([3,H,W] image, flat label list).");

    m.def(
        "grad_audit",
        [](Model& model, std::uint64_t seed, int batch_size) {
            const GradAuditReport rep = grad_audit(model, seed, batch_size);
            return py::make_tuple(rep.sound, rep.text());
        },
        py::arg("model"), py::arg("seed") = 0, py::arg("batch_size") = 4,
        "Per-loss gradient topology audit: (sound, report text).");
}
