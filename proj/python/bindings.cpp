#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "tseg/calibration.hpp"
#include "tseg/common.hpp"
#include "tseg/dataspace.hpp"
#include "tseg/evaluation.hpp"
#include "tseg/harness.hpp"

namespace py = pybind11;
using namespace tseg;

namespace {

py::array_t<float> features_array(const SampleGrid& s) {
  py::array_t<float> a({s.height, s.width, s.channels});
  std::copy(s.features.begin(), s.features.end(), a.mutable_data());
  return a;
}

py::array_t<std::uint8_t> label_array(const LabelGrid& l, int h, int w) {
  py::array_t<std::uint8_t> a({h, w});
  std::copy(l.begin(), l.end(), a.mutable_data());
  return a;
}

LabelGrid to_labels(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  return LabelGrid(a.data(), a.data() + a.size());
}

harness::RunConfig config_from(const py::object& config) {
  if (config.is_none()) return harness::parse_config(nlohmann::json::object());
  const auto text = py::module_::import("json").attr("dumps")(config).cast<std::string>();
  return harness::parse_config(nlohmann::json::parse(text));
}

}  // namespace

PYBIND11_MODULE(_tseg, m) {
  m.attr("__version__") = kVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("surrogate_entropy", &surrogate_entropy, py::arg("s"), py::arg("num_classes") = 2);
  m.def(
      "expected_ig",
      [](double s, double delta, int c) { return expected_ig(s, delta, c).bits; }, py::arg("s"),
      py::arg("delta"), py::arg("num_classes") = 2);
  m.def(
      "ig_zero_crossing", [](double delta) { return ig_zero_crossing(delta).s; },
      py::arg("delta"));

  m.def(
      "dice",
      [](py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> pred,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> ref,
         int class_id) {
        const std::vector<LabelGrid> p{to_labels(pred)}, r{to_labels(ref)};
        return dice(p, r, class_id);
      },
      py::arg("pred"), py::arg("ref"), py::arg("class_id"));

  m.def(
      "paired_significance",
      [](std::vector<double> a, std::vector<double> b, int n, std::uint64_t seed) {
        return paired_significance(a, b, n, seed);
      },
      py::arg("a"), py::arg("b"), py::arg("n_permutations") = 10000, py::arg("seed") = 0);

  m.def(
      "generate_task",
      [](const py::object& task, std::uint64_t seed) {
        TaskSpec spec = TaskSpec::default_shifted();
        if (!task.is_none()) {
          const auto text = py::module_::import("json").attr("dumps")(task).cast<std::string>();
          spec = nlohmann::json::parse(text).get<TaskSpec>();
        }
        spec.validate();
        const auto t = generate_task(spec, seed);
        py::list source, source_labels, target;
        for (std::size_t i = 0; i < t.labeled.samples.size(); ++i) {
          const auto& s = t.labeled.samples[i];
          source.append(features_array(s));
          source_labels.append(label_array(t.labeled.labels[i], s.height, s.width));
        }
        for (const auto& s : t.target.samples()) target.append(features_array(s));
        py::dict d;
        d["source_features"] = source;
        d["source_labels"] = source_labels;
        d["target_features"] = target;
        d["dataset_id"] = dataset_id(spec, seed);
        return d;
      },
      py::arg("task") = py::none(), py::arg("seed") = 0,
      "Source features and labels plus unlabeled target features.");

  m.def(
      "run",
      [](const std::string& experiment, const std::filesystem::path& out,
         const py::object& config) {
        const auto cfg = config_from(config);
        const auto e = harness::parse_experiment(experiment);
        harness::RunSummary s;
        {
          py::gil_scoped_release release;
          s = harness::run(e, cfg, out);
        }
        py::dict d;
        d["run_id"] = s.run_id;
        d["artifacts"] = s.artifacts;
        return d;
      },
      py::arg("experiment"), py::arg("out"), py::arg("config") = py::none());

  m.def(
      "report",
      [](const std::filesystem::path& dir) {
        std::ostringstream out, err;
        const int code = harness::report(dir, out, err);
        if (code != 0) throw IoError(err.str());
        return out.str();
      },
      py::arg("results_dir"));
}
