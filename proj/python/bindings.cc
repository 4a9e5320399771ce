// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "uses2/datagen.h"
#include "uses2/evalcli.h"
#include "uses2/objective.h"
#include "uses2/training.h"

namespace py = pybind11;
using nlohmann::json;
using namespace uses2;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// [L] or [C, L] array -> [C, L] tensor.
Tensor<float> ToSamples(const FloatArray& a) {
  if (a.ndim() != 1 && a.ndim() != 2) throw Error("expected a 1-D or 2-D array of samples");
  const std::int64_t c = a.ndim() == 1 ? 1 : a.shape(0);
  const std::int64_t l = a.shape(a.ndim() - 1);
  Tensor<float> t({c, l});
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

FloatArray ToArray(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

json ParseJson(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Input-condition invariant speech enhancement";
  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  py::class_<Model>(m, "Model")
      .def_static(
          "build", [](const std::string& config, std::uint64_t seed) { return Model::Build(ModelConfig::FromJson(ParseJson(config)), seed); },
          py::arg("config_json"), py::arg("seed") = 0)
      .def_static(
          "load", [](const std::string& dir) { return LoadCheckpoint(dir).first; }, py::arg("ckpt_dir"))
      .def(
          "save", [](const Model& model, const std::string& dir) { SaveCheckpoint(dir, model); }, py::arg("ckpt_dir"))
      .def(
          "enhance",
          [](const Model& model, const FloatArray& mixture, int rate_hz) {
            Waveform in{ToSamples(mixture), rate_hz};
            Waveform out;
            {
              py::gil_scoped_release release;
              out = model.Forward(in);
            }
            return ToArray(out.samples).attr("reshape")(-1);
          },
          py::arg("mixture"), py::arg("rate_hz"), "Enhance a [C, L] or [L] mixture; returns [L].")
      .def_property_readonly("config_json", [](const Model& model) { return model.config().ToJson().dump(); })
      .def_property_readonly("num_params", [](const Model& model) { return CountParams(model.params()); })
      .def("stats_json", [](const Model& model) { return Stats(model).ToJson(model.config()).dump(); });

  m.def(
      "stft",
      [](const FloatArray& wave, int rate_hz) { return ToArray(StftForward(ToSamples(wave), StftConfig::ForRate(rate_hz))); },
      py::arg("wave"), py::arg("rate_hz"), "[C, L] samples -> [C, 2, F, T] real/imaginary planes.");
  m.def(
      "istft",
      [](const FloatArray& spec, int rate_hz, std::int64_t length) {
        if (spec.ndim() != 4) throw Error("expected a [C, 2, F, T] array");
        Tensor<float> t(Shape(spec.shape(), spec.shape() + 4));
        std::copy(spec.data(), spec.data() + spec.size(), t.data());
        return ToArray(IstftForward(t, StftConfig::ForRate(rate_hz), length));
      },
      py::arg("spec"), py::arg("rate_hz"), py::arg("length"));

  m.def(
      "loss",
      [](const FloatArray& estimate, const FloatArray& reference, int rate_hz) {
        return Loss(Waveform{ToSamples(estimate), rate_hz}, Waveform{ToSamples(reference), rate_hz}, LossConfig{});
      },
      py::arg("estimate"), py::arg("reference"), py::arg("rate_hz"));
  m.def(
      "sdr", [](const FloatArray& e, const FloatArray& r) { return Sdr(ToSamples(e), ToSamples(r)); },
      py::arg("estimate"), py::arg("reference"));
  m.def(
      "si_sdr", [](const FloatArray& e, const FloatArray& r) { return SiSdr(ToSamples(e), ToSamples(r)); },
      py::arg("estimate"), py::arg("reference"));

  m.def(
      "read_wav",
      [](const std::string& path) {
        const Waveform w = ReadWav(path);
        return py::make_tuple(ToArray(w.samples), w.rate_hz);
      },
      py::arg("path"), "Returns ([C, L] samples, rate).");
  m.def(
      "write_wav",
      [](const std::string& path, const FloatArray& samples, int rate_hz) {
        WriteWav(path, Waveform{ToSamples(samples), rate_hz});
      },
      py::arg("path"), py::arg("samples"), py::arg("rate_hz"));

  m.def(
      "build_corpus",
      [](const std::string& out, std::uint64_t seed, int train, int dev, int test, double min_seconds,
         double max_seconds) {
        CorpusSpec spec;
        spec.seed = seed;
        spec.train = train;
        spec.dev = dev;
        spec.test = test;
        spec.min_seconds = min_seconds;
        spec.max_seconds = max_seconds;
        return BuildCorpus(out, spec).paths;
      },
      py::arg("out_dir"), py::arg("seed"), py::arg("train") = 8, py::arg("dev") = 2, py::arg("test") = 2,
      py::arg("min_seconds") = 2.0, py::arg("max_seconds") = 5.0);

  m.def(
      "evaluate_json",
      [](const Model* model, const std::string& manifest) { return Evaluate(model, ReadManifest(manifest)).ToJson().dump(); },
      py::arg("model").none(true), py::arg("manifest"));

  m.def(
      "lr_at", [](std::int64_t step, int halvings) { return LrAt(step, halvings, TrainConfig{}); }, py::arg("step"),
      py::arg("halvings") = 0);
}
