// Python module dysmm._core: text, DSP, decision-rule oracle, manifests,
// splits, configuration and the verify suites.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dysmm/error.hpp"
#include "dysmm/pipeline.hpp"
#include "dysmm/verify.hpp"

namespace py = pybind11;
using namespace dysmm;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

WaveForm from_numpy(py::array_t<double, py::array::c_style | py::array::forcecast> samples) {
  if (samples.ndim() != 1) throw ShapeError("samples must be one-dimensional");
  WaveForm w;
  w.samples.assign(samples.data(), samples.data() + samples.size());
  return w;
}

py::dict plan_summary(const SplitPlan& p, const Manifest& m) {
  py::list folds;
  for (const auto& f : p.folds) {
    py::dict d;
    d["id"] = f.id;
    d["train"] = f.train;
    d["test"] = f.test;
    d["test_speakers"] = f.test_speakers;
    folds.append(d);
  }
  py::dict d;
  d["protocol"] = to_string(p.protocol);
  d["task"] = to_string(p.task);
  d["train_uncommon"] = p.train_uncommon;
  d["test_uncommon"] = p.test_uncommon;
  d["folds"] = folds;
  d["violations"] = check_plan(p, m);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Speech and text cross-attention for dysarthria assessment";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("normalize_word", &normalize_word);
  m.def("tokenize", [](const std::string& w) { return tokenize(w).tokens; });
  m.def("detokenize", [](const std::vector<int>& ids) { return detokenize(TokenSequence{ids}); });

  m.def("hz_to_mel", &hz_to_mel);
  m.def("mel_to_hz", &mel_to_hz);
  m.def(
      "mel_filterbank",
      [](std::size_t n_mels, std::size_t fft_size, double fmin, double fmax) {
        FrontendConfig c;
        c.n_mels = n_mels;
        c.fft_size = fft_size;
        c.fmin = fmin;
        c.fmax = fmax;
        return to_numpy(mel_filterbank_matrix(c));
      },
      py::arg("n_mels") = 80, py::arg("fft_size") = 512, py::arg("fmin") = 0.0, py::arg("fmax") = 8000.0);
  m.def(
      "logmel", [](py::array_t<double, py::array::c_style | py::array::forcecast> samples, bool trim) {
        FrontendConfig c;
        WaveForm w = from_numpy(samples);
        if (trim) w = trim_silence(w, c);
        return to_numpy(extract_logmel(w, c).values);
      },
      py::arg("samples"), py::arg("trim") = false, "Log-mel energies [frames, 80] of 16 kHz samples.");
  m.def("load_wav", [](const std::filesystem::path& p) {
    auto w = load_wav(p);
    return py::array_t<double>(static_cast<py::ssize_t>(w.samples.size()), w.samples.data());
  });

  m.def(
      "bayes_oracle_check",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> table) {
        if (table.ndim() != 3) throw ShapeError("joint table must be [S, T, C]");
        JointTable t{static_cast<std::size_t>(table.shape(0)), static_cast<std::size_t>(table.shape(1)),
                     static_cast<std::size_t>(table.shape(2)),
                     std::vector<double>(table.data(), table.data() + table.size())};
        auto rep = bayes_oracle_check(t);
        py::list cells;
        for (const auto& c : rep.cells) cells.append(py::make_tuple(c.s, c.t, c.posterior, c.likelihood, c.factored));
        return py::make_tuple(rep.all_agree(), cells);
      },
      "Returns (all_agree, [(s, t, posterior, likelihood, factored), ...]).");

  m.def("expected_parameter_count", [](const std::string& task, const std::string& modality) {
    ModelConfig c;
    c.task = parse_task(task);
    c.modality = parse_modality(modality);
    return expected_parameter_count(c);
  }, py::arg("task") = "detection", py::arg("modality") = "speech-text");

  m.def("ua_speech_layout_csv", [] { return manifest_csv(ua_speech_layout()); });
  m.def(
      "build_split",
      [](const std::string& manifest_csv_text, const std::string& plan, std::uint64_t seed) {
        std::istringstream in(manifest_csv_text);
        Manifest man = parse_manifest(in);
        const Protocol p = parse_protocol(plan);
        SplitPlan sp = p == Protocol::SD         ? build_sd_split(man, seed)
                       : p == Protocol::SEVERITY ? build_severity_split(man, Protocol::SID1, seed)
                                                 : build_sid_loso(man, p, seed);
        return plan_summary(sp, man);
      },
      py::arg("manifest_csv"), py::arg("plan"), py::arg("seed") = 0);
  m.def(
      "generate_synthetic_corpus",
      [](const std::string& task, const std::filesystem::path& out_dir, std::uint64_t seed, std::size_t speakers,
         std::size_t reps) {
        SyntheticConfig c;
        c.task = parse_synthetic_task(task);
        c.n_speakers = speakers;
        c.repetitions = reps;
        return generate_synthetic_corpus(c, seed, out_dir).size();
      },
      py::arg("task"), py::arg("out_dir"), py::arg("seed") = 0, py::arg("speakers") = 16, py::arg("repetitions") = 3);

  m.def("config_digest", [](const std::string& text) {
    std::istringstream in(text);
    return hex_digest(RunConfig::parse(in).digest());
  });
  m.def("config_keys", &RunConfig::keys);

  m.def(
      "verify",
      [](const std::string& suite) {
        verify::SuiteResult r;
        py::gil_scoped_release release;
        if (suite == "grad") r = verify::grad(10);
        else if (suite == "dsp") r = verify::dsp();
        else if (suite == "bayes") r = verify::bayes();
        else if (suite == "attention") r = verify::attention();
        else if (suite == "splits") r = verify::splits();
        else if (suite == "control") r = verify::control();
        else throw ConfigError("unknown or long-running suite '" + suite + "' (use the dysmm tool)");
        py::gil_scoped_acquire acquire;
        return py::make_tuple(r.passed, r.lines);
      },
      "Runs a quick self-check suite; returns (passed, lines).");
}
