#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "amdet/analytics.hpp"
#include "amdet/attack.hpp"
#include "amdet/detector.hpp"
#include "amdet/errors.hpp"

namespace py = pybind11;
using namespace amdet;

namespace {

py::array_t<double> to_numpy(std::span<const double> v, std::vector<py::ssize_t> shape) {
  return py::array_t<double>(shape, v.data());  // copies
}

py::array_t<double> to_numpy(const Tensor& t) {
  return to_numpy(t.data(), std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
}

py::array_t<double> to_numpy(const std::vector<double>& v) {
  return to_numpy(v, {static_cast<py::ssize_t>(v.size())});
}

std::vector<double> from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw DimensionError("expected a 1-D array");
  return {a.data(), a.data() + a.size()};
}

KeyValues settings(const py::dict& d) {
  KeyValues kv;
  for (const auto& [k, v] : d) kv.emplace_back(py::str(k), py::str(v));
  return kv;
}

py::dict encoded(const EncodeOutput& out) {
  py::dict r;
  r["pooled"] = to_numpy(out.pooled);
  r["token_states"] = to_numpy(out.token_states);
  r["valid_len"] = out.valid_len;
  r["sim_x"] = sim_x(out).item();
  return r;
}

py::list trace_rows(const std::vector<TraceRow>& trace) {
  py::list rows;
  for (const auto& t : trace) {
    py::dict d;
    d["step"] = t.step;
    d["l_benign"] = t.l_benign;
    d["l_backdoor"] = t.l_backdoor;
    d["l_reg"] = t.l_reg;
    d["sim_x"] = t.sim_x;
    d["prop_trigger"] = t.prop_trigger;
    d["prop_bos"] = t.prop_bos;
    rows.append(d);
  }
  return rows;
}

py::dict report_dict(const ScanReport& r) {
  py::dict d;
  d["verdict"] = to_string(r.verdict);
  d["assim_fraction"] = r.assim_fraction;
  d["dev_fraction"] = r.dev_fraction;
  d["positive_ratio"] = r.positive_ratio ? py::cast(*r.positive_ratio) : py::none();
  d["s_tar"] = r.s_tar ? py::cast(*r.s_tar) : py::none();
  d["v"] = to_numpy(r.v);
  d["final_loss"] = r.final_loss;
  d["seconds"] = r.seconds;
  d["failure"] = r.failure;
  py::list checks;
  for (const auto& c : r.checks) {
    py::dict e;
    e["step"] = c.step;
    e["epoch"] = c.epoch;
    e["assim_fraction"] = c.ind.assim_fraction;
    e["dev_fraction"] = c.ind.dev_fraction;
    e["positive_ratio"] = c.positive_ratio ? py::cast(*c.positive_ratio) : py::none();
    e["passed"] = c.passed;
    checks.append(e);
  }
  d["checks"] = checks;
  d["text"] = format_scan_report(r);
  return d;
}

TriggerSpec trigger_of(const py::object& o) {
  if (py::isinstance<py::str>(o)) return TriggerSpec::from_text(o.cast<std::string>());
  TriggerSpec t;
  t.ids = o.cast<std::vector<int>>();
  t.validate();
  return t;
}

}  // namespace

PYBIND11_MODULE(_amdet, m) {
  m.doc() = "Toy text encoders, textual backdoors and their detection";

  py::register_exception<Error>(m, "AmdetError");

  py::class_<EncoderConfig>(m, "EncoderConfig")
      .def(py::init<>())
      .def(py::init([](const py::dict& d) { return EncoderConfig::from_fields(settings(d)); }))
      .def_readwrite("d_model", &EncoderConfig::d_model)
      .def_readwrite("n_layers", &EncoderConfig::n_layers)
      .def_readwrite("n_heads", &EncoderConfig::n_heads)
      .def_readwrite("max_len", &EncoderConfig::max_len)
      .def_readwrite("mlp_ratio", &EncoderConfig::mlp_ratio)
      .def_readwrite("embedding_std", &EncoderConfig::embedding_std)
      .def_readwrite("write_scale", &EncoderConfig::write_scale)
      .def("fields", [](const EncoderConfig& c) {
        py::dict d;
        for (const auto& [k, v] : c.fields()) d[py::str(k)] = v;
        return d;
      });

  m.def(
      "tokenize",
      [](const std::string& text, const EncoderConfig& cfg) { return tokenize(text, cfg).ids; }, py::arg("text"),
      py::arg("config") = EncoderConfig{});

  py::class_<EncoderModel>(m, "EncoderModel")
      .def_static("init", &EncoderModel::init, py::arg("config") = EncoderConfig{}, py::arg("seed") = 1)
      .def_static("load", &load_model)
      .def("save", [](const EncoderModel& self, const std::string& path) { save_model(self, path); })
      .def_property_readonly("config", &EncoderModel::config)
      .def_property_readonly("metadata", [](const EncoderModel& self) { return self.metadata; })
      .def("copy", [](const EncoderModel& self) { return EncoderModel(self); })
      .def("encode",
           [](const EncoderModel& self, const std::string& text) {
             NoGradGuard ng;
             return encoded(self.encode_fast(tokenize(text, self.config())));
           })
      .def("encode_with_feature",
           [](const EncoderModel& self, const std::string& text, const py::array_t<double>& v) {
             NoGradGuard ng;
             return encoded(
                 encode_with_feature(self, tokenize(text, self.config()), Tensor::vector(from_numpy(v))));
           })
      .def("token_row", [](const EncoderModel& self, int id) {
        if (id < 0 || id >= static_cast<int>(self.config().vocab_size)) throw VocabularyError("token id out of range");
        const std::size_t d = self.config().d_model;
        const auto t = self.param("token_embedding").data();
        return to_numpy(std::vector<double>(t.begin() + id * d, t.begin() + (id + 1) * d));
      });

  m.def(
      "train_backdoor",
      [](const EncoderModel& base, const std::vector<std::string>& prompts, const py::dict& config) {
        const auto kv = settings(config);
        const auto goals = goals_from_fields(kv, base.config().d_model);
        if (goals.empty()) throw ContractError("config needs a trigger");
        auto r = train_backdoor(base, prompts, goals, TrainConfig::from_fields(kv));
        return py::make_tuple(std::move(r.model), trace_rows(r.trace));
      },
      py::arg("base"), py::arg("prompts"), py::arg("config"));

  m.def(
      "train_benign",
      [](const EncoderModel& base, const std::vector<std::string>& prompts, const py::dict& config) {
        auto r = train_benign(base, prompts, TrainConfig::from_fields(settings(config)));
        return py::make_tuple(std::move(r.model), trace_rows(r.trace));
      },
      py::arg("base"), py::arg("prompts"), py::arg("config") = py::dict());

  m.def(
      "asr",
      [](const EncoderModel& model, const EncoderModel& anchor, const std::vector<std::string>& prompts,
         const py::object& trigger, const py::array_t<double>& target) {
        const auto t = resolve_target(TargetSpec::from_feature(from_numpy(target)), anchor);
        return asr_eval(model, prompts, trigger_of(trigger), t);
      },
      py::arg("model"), py::arg("anchor"), py::arg("prompts"), py::arg("trigger"), py::arg("target"));

  m.def(
      "utility",
      [](const EncoderModel& model, const EncoderModel& anchor, const std::vector<std::string>& prompts) {
        return utility_eval(model, anchor, prompts);
      },
      py::arg("model"), py::arg("anchor"), py::arg("prompts"));

  m.def(
      "random_target",
      [](std::size_t dim, std::uint64_t seed) { return to_numpy(TargetSpec::random_feature(dim, seed).feature); },
      py::arg("dim"), py::arg("seed"));

  m.def(
      "scan",
      [](const EncoderModel& model, const EncoderModel& anchor, const std::vector<std::string>& prompts,
         const py::dict& config, const py::object& trigger) {
        auto sc = ScanConfig::from_fields(settings(config));
        if (prompts.size() < sc.train_prompts + sc.test_prompts) {
          if (prompts.size() <= sc.test_prompts) throw ContractError("not enough prompts for a scan");
          sc.train_prompts = prompts.size() - sc.test_prompts;
        }
        const auto data = ShallowDataset::split(prompts, sc.train_prompts, sc.test_prompts);
        std::optional<TriggerSpec> truth;
        if (!trigger.is_none()) truth = trigger_of(trigger);
        ScanReport rep;
        {
          py::gil_scoped_release release;
          rep = detect(model, anchor, data, sc, truth);
        }
        return report_dict(rep);
      },
      py::arg("model"), py::arg("anchor"), py::arg("prompts"), py::arg("config") = py::dict(),
      py::arg("trigger") = py::none());

  m.def(
      "landscape",
      [](const EncoderModel& model, const EncoderModel& anchor, const py::array_t<double>& v,
         const std::vector<std::string>& prompts, const py::dict& config) {
        const auto sc = ScanConfig::from_fields(settings(config));
        const auto land = analyze_landscape(model, anchor, from_numpy(v), prompts, sc.inversion, sc.landscape);
        const auto g = static_cast<py::ssize_t>(land.grid.size);
        py::dict d;
        d["values"] = to_numpy(land.grid.values, {g, g});
        d["eigenvalues"] = to_numpy(land.spectrum.eigenvalues);
        d["positive_ratio"] = land.spectrum.positive_ratio;
        d["spacing"] = land.grid.dx;
        return d;
      },
      py::arg("model"), py::arg("anchor"), py::arg("v"), py::arg("prompts"), py::arg("config") = py::dict());
}
