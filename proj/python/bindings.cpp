#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cactusnet/applicability.hpp"
#include "cactusnet/cactus.hpp"
#include "cactusnet/checkpoint.hpp"
#include "cactusnet/experiment.hpp"
#include "cactusnet/predictor.hpp"

namespace py = pybind11;
using namespace cnl;

namespace {

Tensor to_tensor(const std::vector<float>& values, const Shape& shape) {
  Tensor t(shape);
  if (values.size() != t.size()) throw ShapeError("value count does not match the shape");
  std::copy(values.begin(), values.end(), t.values().begin());
  return t;
}

}  // namespace

PYBIND11_MODULE(_cactusnet, m) {
  m.doc() = "CactusNet applicability measurement and routing";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<RangeError>(m, "RangeError", PyExc_ValueError);
  py::register_exception<AggregationError>(m, "AggregationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<cactus::Thresholds>(m, "Thresholds")
      .def_readonly("q", &cactus::Thresholds::q)
      .def_readonly("y1", &cactus::Thresholds::y1)
      .def_readonly("y2", &cactus::Thresholds::y2)
      .def_readonly("tau1", &cactus::Thresholds::tau1)
      .def_readonly("tau2", &cactus::Thresholds::tau2);
  m.def("compute_thresholds", &cactus::compute_thresholds, py::arg("q"), py::arg("y1"), py::arg("y2"));

  m.def(
      "verdict",
      [](double app, const cactus::Thresholds& t) { return std::string(cactus::to_string(cactus::verdict_for(app, t))); },
      py::arg("app"), py::arg("thresholds"));

  m.def(
      "route_step",
      [](const std::vector<std::tuple<int, double, double>>& candidates) {
        std::vector<cactus::Candidate> c;
        for (const auto& [branch, app, tau2] : candidates) c.push_back({branch, app, tau2});
        return cactus::route_step(c);
      },
      py::arg("candidates"), "candidates are (branch, app, tau2); returns the chosen index or None");

  m.def(
      "class_applicability",
      [](const std::vector<double>& xis) {
        std::vector<app::SeparabilityRecord> records;
        for (std::size_t j = 0; j < xis.size(); ++j) records.push_back({0, static_cast<int>(j), 0, xis[j], 0});
        return app::class_applicability(records);
      },
      py::arg("xis"));

  m.def(
      "read_table",
      [](const std::filesystem::path& path) {
        std::map<std::pair<int, std::size_t>, double> out;
        for (const auto& [key, e] : app::read_table_csv(path).entries()) out[key] = e.app;
        return out;
      },
      py::arg("path"), "applicability.csv as {(class_id, layer): app}");

  m.def(
      "predict",
      [](const std::filesystem::path& checkpoint, const std::vector<float>& values, const Shape& shape) {
        const auto net = load_checkpoint(checkpoint).net;
        const auto out = cnl::predict(net, to_tensor(values, shape));
        return std::vector<float>(out.values().begin(), out.values().end());
      },
      py::arg("checkpoint"), py::arg("values"), py::arg("shape"));

  m.def(
      "predict_applicability",
      [](const std::filesystem::path& predictor, const std::vector<float>& values, const Shape& shape) {
        return pred::predict_batch(pred::load_predictor(predictor), to_tensor(values, shape));
      },
      py::arg("predictor"), py::arg("values"), py::arg("shape"));

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"cactusnet"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        py::gil_scoped_release release;
        return cli::run(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "runs a CLI verb and returns its exit code");
}
