// Python bindings. Structured values cross the boundary as JSON text and are
// decoded with the json module on the Python side.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lmsub/demo.hpp"
#include "lmsub/error.hpp"
#include "lmsub/evaluator.hpp"
#include "lmsub/pipeline.hpp"
#include "lmsub/run_config.hpp"
#include "lmsub/views.hpp"

namespace py = pybind11;
using namespace lmsub;

namespace {

py::object to_py(const Json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

Json from_py(const py::object& o) {
  return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::object distribution(const std::vector<std::tuple<std::string, double, std::int64_t>>& arms, double beta) {
  bandit::BanditState s;
  s.beta = beta;
  for (const auto& [id, loss_sum, loss_count] : arms) {
    bandit::ArmStats a;
    a.arm_id = id;
    a.loss_sum = loss_sum;
    a.loss_count = loss_count;
    a.pull_count = loss_count;
    s.arms.push_back(a);
  }
  return to_py(views::distribution(bandit::sample_distribution(s)));
}

py::object run_demo(int trials, std::uint64_t seed, std::int64_t ramp, const std::string& out) {
  RunConfig rc;
  rc.seed = seed;
  auto backend = make_backend(rc);
  demo::DemoConfig cfg;
  cfg.trials = trials;
  cfg.seed = seed;
  cfg.schedule = bandit::BetaSchedule::linear(0.0, 1.0, ramp);
  demo::DemoResult r;
  {
    py::gil_scoped_release release;
    r = demo::rare_letters_demo(*backend, cfg);
  }
  if (!out.empty()) r.write(out);
  py::list rows;
  for (const auto& t : r.trials) {
    py::dict d;
    d["trial"] = t.trial;
    d["arm_index"] = t.arm_index;
    d["beta"] = t.beta;
    d["expected"] = t.expected;
    d["answer"] = t.answer ? py::cast(*t.answer) : py::none();
    d["loss"] = t.loss;
    rows.append(d);
  }
  py::dict result;
  result["subroutine_id"] = r.subroutine_id;
  result["trials"] = rows;
  result["smoothed_loss"] = r.smoothed_loss;
  result["arm_prompts"] = r.arm_prompts;
  return result;
}

py::object evaluate(const std::string& corpus, const std::string& truth, const std::string& system) {
  std::vector<eval::LetterText> letters;
  for (const auto& l : load_corpus(corpus)) letters.push_back({l.letter_id, l.text});
  return to_py(eval::evaluate(letters, eval::load_truth(truth), eval::load_system_output(system)).to_json());
}

std::string run(const py::object& config, const std::string& store_path) {
  const auto rc = RunConfig::from_json(from_py(config));
  const auto inputs = load_run_inputs(rc);
  Store store(store_path);
  auto backend = make_backend(rc);
  Pipeline pipeline(store, *backend, engine_config(rc), pipeline_config(rc, inputs.context));
  py::gil_scoped_release release;
  return pipeline.run(inputs.letters, inputs.guidance);
}

py::object trace(const std::string& store_path, const std::string& invocation_id) {
  Store store(store_path);
  return to_py(views::trace(store.trace(invocation_id)));
}

py::object export_run(const std::string& store_path, const std::string& run_id) {
  Store store(store_path);
  return to_py(Json(export_system_output(store, run_id)));
}

}  // namespace

PYBIND11_MODULE(_lmsub, m) {
  m.doc() = "Adaptive LM subroutines for public comment analysis";

  // Leaked on purpose: it must outlive interpreter finalization.
  static auto* error = new py::exception<Error>(m, "LmsubError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      switch (e.code()) {
        case ErrorCode::kNotFound:
          PyErr_SetString(PyExc_FileNotFoundError, e.what());
          return;
        case ErrorCode::kInvalidArgument:
        case ErrorCode::kInputInvalid:
        case ErrorCode::kSchemaInvalid:
        case ErrorCode::kOutOfRange:
          PyErr_SetString(PyExc_ValueError, e.what());
          return;
        default:
          PyErr_SetString(error->ptr(), e.what());
      }
    }
  });

  m.def("rare_letters_oracle", &demo::rare_letters_oracle, py::arg("sentence"), py::arg("letters") = "QWXZ");
  m.def("beta_at",
        [](double start, double end, std::int64_t ramp, std::int64_t trial) {
          return bandit::beta_at(bandit::BetaSchedule::linear(start, end, ramp), trial);
        },
        py::arg("start"), py::arg("end"), py::arg("ramp"), py::arg("trial"));
  m.def("distribution", &distribution, py::arg("arms"), py::arg("beta"),
        "Sampling distribution for arms given as (arm_id, loss_sum, loss_count).");
  m.def("demo_bandit", &run_demo, py::arg("trials") = 100, py::arg("seed") = 0, py::arg("ramp") = 100,
        py::arg("out") = "");
  m.def("evaluate", &evaluate, py::arg("corpus"), py::arg("truth"), py::arg("system_output"));
  m.def("run", &run, py::arg("config"), py::arg("store") = ":memory:");
  m.def("trace", &trace, py::arg("store"), py::arg("invocation_id"));
  m.def("export_run", &export_run, py::arg("store"), py::arg("run_id"));
}
