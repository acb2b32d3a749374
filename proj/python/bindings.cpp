// Python bindings. Structured configs cross the boundary as JSON strings;
// the thin wrappers in unidiff/__init__.py accept dicts.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include <json.hpp>

#include "unidiff/applications.hpp"
#include "unidiff/checkpoint.hpp"
#include "unidiff/eval.hpp"
#include "unidiff/gradcheck.hpp"
#include "unidiff/oracle.hpp"
#include "unidiff/sampling.hpp"
#include "unidiff/training.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace unidiff;

namespace {

NoiseSchedule schedule_from(const std::string& s) {
  if (s == "toy") return toy_schedule();
  if (s == "default") return default_schedule();
  return NoiseSchedule::from_json(json::parse(s));
}

DistributionSpec spec_from(const std::string& s) {
  if (s == "benchmark") return benchmark_spec();
  return DistributionSpec::from_json(json::parse(s));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Unified multimodal diffusion at desk scale";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_static("from_json", [](const std::string& s) { return schedule_from(s); }, py::arg("spec"),
                  "'toy', 'default' or a schedule JSON string")
      .def_static("linear", &build_linear_schedule, py::arg("T"), py::arg("beta_start"), py::arg("beta_end"),
                  py::arg("strict_marginal") = false)
      .def_property_readonly("T", &NoiseSchedule::T)
      .def("alpha_bar", &NoiseSchedule::alpha_bar)
      .def("beta", &NoiseSchedule::beta)
      .def_property_readonly("alpha_bars", &NoiseSchedule::alpha_bars)
      .def("to_json", [](const NoiseSchedule& s) { return s.to_json().dump(); });

  m.def(
      "sample_dataset",
      [](const std::string& spec, std::size_t n, std::uint64_t seed) {
        const auto d = sample_dataset(spec_from(spec), n, seed);
        return py::make_tuple(d.x, d.y);
      },
      py::arg("spec"), py::arg("n"), py::arg("seed") = 0, "Returns (x, y) arrays of shape (n, d_x), (n, d_y).");

  m.def("spec_json", [](const std::string& spec) { return spec_from(spec).to_json().dump(); }, py::arg("spec"));

  py::class_<OracleModel>(m, "Oracle")
      .def(py::init([](const std::string& spec, const std::string& sched) {
             return OracleModel(spec_from(spec), schedule_from(sched));
           }),
           py::arg("spec") = "benchmark", py::arg("schedule") = "toy")
      .def(
          "predict",
          [](const OracleModel& o, const Mat& x, const Mat& y, const std::vector<int>& tx, const std::vector<int>& ty) {
            Mat ex, ey;
            o.predict_batch(x, y, tx, ty, ex, ey);
            return py::make_tuple(ex, ey);
          },
          py::arg("x"), py::arg("y"), py::arg("tx"), py::arg("ty"))
      .def("score", &OracleModel::score, py::arg("x"), py::arg("y"), py::arg("tx"), py::arg("ty"));

  m.def(
      "generate",
      [](const std::string& source, const std::string& request, const std::string& sched) {
        const auto req = SampleRequest::from_json(json::parse(request));
        Samples s;
        py::gil_scoped_release nogil;
        if (std::filesystem::is_directory(source)) {
          s = generate(NetworkEps(load_checkpoint(source)), req);
        } else {
          s = generate(OracleEps(OracleModel(spec_from(source), schedule_from(sched))), req);
        }
        py::gil_scoped_acquire gil;
        return py::make_tuple(s.x, s.y);
      },
      py::arg("source"), py::arg("request"), py::arg("schedule") = "toy",
      "source is a checkpoint directory, or a spec (JSON or 'benchmark') to sample with the exact oracle.");

  m.def(
      "train",
      [](const std::string& config, const std::string& spec, const std::string& backbone, const std::string& sched,
         const std::string& out_dir) {
        const auto cfg = TrainConfig::from_json(json::parse(config));
        const auto sc = schedule_from(sched);
        json bj = json::parse(backbone);
        TrainData d;
        d.spec = spec_from(spec);
        if (!bj.contains("d_x")) bj["d_x"] = d.spec->d_x;
        if (!bj.contains("d_y")) bj["d_y"] = d.spec->d_y;
        if (!bj.contains("timesteps")) bj["timesteps"] = sc.T();
        TrainHooks h;
        if (!out_dir.empty()) h.out_dir = std::filesystem::path(out_dir);
        if (h.out_dir) std::filesystem::create_directories(*h.out_dir);
        const auto r = train(cfg, d, BackboneConfig::from_json(bj), sc, h);
        py::list curve;
        for (const auto& rec : r.curve) {
          curve.append(py::make_tuple(rec.step, rec.loss, rec.oracle_gap ? py::cast(*rec.oracle_gap) : py::none()));
        }
        return py::dict(py::arg("steps") = r.steps_done, py::arg("forward_calls") = r.calls.forward,
                        py::arg("backward_calls") = r.calls.backward, py::arg("curve") = curve);
      },
      py::arg("config") = "{}", py::arg("spec") = "benchmark", py::arg("backbone") = "{}", py::arg("schedule") = "toy",
      py::arg("out_dir") = "");

  m.def(
      "energy_distance",
      [](const Mat& a, const Mat& b, int permutations, std::uint64_t seed, std::size_t max_per_side) {
        const auto t = energy_distance(a, b, permutations, seed, max_per_side);
        return py::make_tuple(t.statistic, t.p_value);
      },
      py::arg("a"), py::arg("b"), py::arg("permutations") = 200, py::arg("seed") = 0, py::arg("max_per_side") = 0,
      "Returns (statistic, p_value).");

  m.def("gaussian_w2", &gaussian_w2, py::arg("mean_a"), py::arg("cov_a"), py::arg("mean_b"), py::arg("cov_b"),
        "Squared 2-Wasserstein distance between two Gaussians.");
  m.def("slerp", &slerp, py::arg("a"), py::arg("b"), py::arg("theta"));

  m.def(
      "gradient_check",
      [](const std::string& backbone, std::uint64_t seed, std::size_t max_params) {
        return gradient_check(BackboneConfig::from_json(json::parse(backbone)), seed, max_params).max_rel_error;
      },
      py::arg("backbone"), py::arg("seed") = 0, py::arg("max_params") = 0);
}
