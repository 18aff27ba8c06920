#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "nlran/errors.hpp"
#include "nlran/gradcheck.hpp"
#include "nlran/metrics.hpp"
#include "nlran/model.hpp"

namespace py = pybind11;
using namespace nlran;

namespace {

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::object& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::array_t<float> predict(const Model<float>& model, py::array_t<float, py::array::c_style | py::array::forcecast> x) {
  Shape shape(x.shape(), x.shape() + x.ndim());
  std::vector<float> data(x.data(), x.data() + x.size());
  Tensor<float> logits;
  {
    py::gil_scoped_release release;
    logits = model.predict_logits(Tensor<float>(shape, std::move(data)));
  }
  std::vector<py::ssize_t> out_shape(logits.shape().begin(), logits.shape().end());
  py::array_t<float> out(out_shape);
  std::copy(logits.data(), logits.data() + logits.size(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the nlran C++ core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<CapabilityError>(m, "CapabilityError", PyExc_RuntimeError);

  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_static("resmix3", &NetworkConfig::resmix3)
      .def_static("resmix6", &NetworkConfig::resmix6)
      .def_static("full_scale", &NetworkConfig::full_scale, py::arg("six_stacks") = false)
      .def_static("resnet_baseline", &NetworkConfig::resnet_baseline)
      .def_static("from_dict", [](const py::object& d) { return NetworkConfig::from_json(from_python(d)); })
      .def("to_dict", [](const NetworkConfig& c) { return to_python(c.to_json()); })
      .def("validate", &NetworkConfig::validate)
      .def("hash", &NetworkConfig::hash)
      .def_readwrite("base_channels", &NetworkConfig::base_channels)
      .def_readwrite("use_nonlocal", &NetworkConfig::use_nonlocal)
      .def_readwrite("num_classes", &NetworkConfig::num_classes)
      .def_readwrite("input_channels", &NetworkConfig::input_channels)
      .def_readwrite("input_shape", &NetworkConfig::input_shape)
      .def_readwrite("attention_stacks", &NetworkConfig::attention_stacks)
      .def(py::self == py::self)
      .def("__repr__", [](const NetworkConfig& c) { return "NetworkConfig(" + c.to_json().dump() + ")"; });

  m.def("describe", [](const NetworkConfig& cfg) {
    py::list rows;
    for (const auto& r : describe(cfg)) {
      py::dict row;
      row["name"] = r.name;
      row["kind"] = r.kind;
      row["channels"] = r.channels;
      row["extents"] = py::make_tuple(r.extents[0], r.extents[1], r.extents[2]);
      row["params"] = r.params;
      row["macs"] = r.macs;
      row["stage_row"] = r.stage_row;
      rows.append(row);
    }
    return rows;
  });
  m.def("count_params", py::overload_cast<const NetworkConfig&>(&count_params));
  m.def("count_flops", &count_flops, "Multiply-accumulates for a batch of one");

  py::class_<Model<float>>(m, "Model")
      .def(py::init<const NetworkConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_checkpoint<float>(path); })
      .def("save", [](const Model<float>& model, const std::string& path) { save_checkpoint(model, path); })
      .def_property_readonly("config", &Model<float>::config)
      .def_property_readonly("num_parameters", [](const Model<float>& model) { return count_params(model); })
      .def("predict_logits", &predict, py::arg("x"), "x: float array [N, C, D, H, W]");

  m.def(
      "weighted_metrics",
      [](const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes) {
        return to_python(weighted_metrics(confusion(truth, predicted, classes)).to_json());
      },
      py::arg("truth"), py::arg("predicted"), py::arg("classes") = 3);
  m.def(
      "roc_auc", [](const std::vector<double>& scores, const std::vector<int>& truth) {
        return auc(roc_curve(scores, truth));
      },
      py::arg("scores"), py::arg("truth"));

  m.def(
      "gradcheck_suite",
      [](double tolerance, std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_gradcheck_suite(tolerance, seed)) {
          py::dict d;
          d["name"] = r.name;
          d["max_error"] = r.max_error;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("tolerance") = 1e-4, py::arg("seed") = 2024);
}
