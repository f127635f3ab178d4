#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "headlens/pipeline.hpp"
#include "headlens/rsa.hpp"
#include "headlens/steering.hpp"
#include "headlens/toy.hpp"
#include "headlens/vectors.hpp"

namespace py = pybind11;
using namespace headlens;

namespace {

SquareMatrix to_square(py::array_t<double, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 2 || a.shape(0) != a.shape(1)) throw Error("expected a square matrix");
  const int n = static_cast<int>(a.shape(0));
  SquareMatrix m(n);
  auto r = a.unchecked<2>();
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) m(i, k) = r(i, k);
  return m;
}

py::array_t<float> to_array(const std::vector<float>& v) { return py::array_t<float>(v.size(), v.data()); }

RunOptions quiet(int jobs, bool force) {
  RunOptions o;
  o.jobs = jobs;
  o.force = force;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the headlens C++ core";
  py::register_exception<Error>(m, "HeadlensError", PyExc_RuntimeError);

  py::class_<Model>(m, "Model")
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("config",
                             [](const Model& model) {
                               const auto& c = model.config();
                               py::dict d;
                               d["n_layers"] = c.n_layers;
                               d["n_heads"] = c.n_heads;
                               d["d_model"] = c.d_model;
                               d["d_head"] = c.d_head;
                               d["d_mlp"] = c.d_mlp;
                               d["vocab_size"] = c.vocab_size;
                               d["max_seq_len"] = c.max_seq_len;
                               return d;
                             })
      .def("encode", [](const Model& model, const std::string& text) { return model.tokenizer().encode(text); },
           py::arg("text"))
      .def("decode", [](const Model& model, int id) { return model.tokenizer().decode(id); }, py::arg("token"))
      .def(
          "next_token_probs",
          [](const Model& model, const std::vector<int>& tokens) { return to_array(model.forward(tokens).probs); },
          py::arg("tokens"))
      .def(
          "inject",
          [](const Model& model, const std::vector<int>& tokens, int layer, const std::vector<float>& v, float alpha) {
            HookSet hooks;
            hooks.injections.push_back(Injection{layer, v, alpha});
            return to_array(model.forward(tokens, hooks).probs);
          },
          py::arg("tokens"), py::arg("layer"), py::arg("vector"), py::arg("alpha"))
      .def(
          "head_outputs",
          [](const Model& model, const std::vector<int>& tokens) {
            auto r = model.forward(tokens, HookSet{.capture_heads = true});
            const auto& rec = *r.record;
            py::array_t<float> out({rec.n_layers(), rec.n_heads(), rec.d_model()});
            std::copy(rec.all_heads().begin(), rec.all_heads().end(), out.mutable_data());
            return out;
          },
          py::arg("tokens"));

  m.def(
      "build_toy",
      [](const std::filesystem::path& concepts_dir, const std::filesystem::path& translation,
         const std::filesystem::path& out, std::uint64_t seed) {
        std::vector<ConceptPairs> pairs;
        for (const auto& id : kConcepts) {
          const auto p = concepts_dir / (id + ".json");
          if (std::filesystem::exists(p)) pairs.push_back(load_concept_pairs(p));
        }
        auto planted = planted_model(pairs, load_translation_table(translation), seed);
        planted.model.save(out);
        return planted.layout.fv_head.str();
      },
      py::arg("concepts_dir"), py::arg("translation"), py::arg("out"), py::arg("seed") = 7,
      "Writes the planted model and returns its designated head, e.g. 'L2H0'.");

  m.def(
      "spearman",
      [](py::array_t<double> rsm, py::array_t<double> dm) {
        return spearman_lower_triangle(to_square(rsm), to_square(dm));
      },
      py::arg("rsm"), py::arg("dm"), "Tie-corrected Spearman of the strictly-lower triangles (None if undefined).");
  m.def("hypergeom_tail", &hypergeom_tail, py::arg("n"), py::arg("k"), py::arg("x"),
        "P(overlap >= x) for two random K-subsets of N items.");
  m.def(
      "kl_divergence",
      [](const std::vector<double>& p, const std::vector<double>& q) {
        return kl_divergence(std::span<const double>(p), std::span<const double>(q));
      },
      py::arg("p"), py::arg("q"));

  m.def(
      "validate_config",
      [](const std::filesystem::path& path) {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& d : validate_config_file(path)) out.emplace_back(d.pointer, d.message);
        return out;
      },
      py::arg("path"), "List of (json_pointer, message); empty when valid.");
  m.def(
      "config_hash",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        return config_hash(load_config(path, overrides));
      },
      py::arg("path"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "run_stage",
      [](const std::filesystem::path& path, const std::string& stage, const std::vector<std::string>& overrides,
         const std::vector<std::string>& exclude, int jobs, bool force) {
        const auto cfg = load_config(path, overrides, exclude);
        py::gil_scoped_release release;
        run_stage(cfg, parse_stage(stage), quiet(jobs, force));
        return stage_dir(cfg, parse_stage(stage));
      },
      py::arg("config"), py::arg("stage"), py::arg("overrides") = std::vector<std::string>{},
      py::arg("exclude") = std::vector<std::string>{}, py::arg("jobs") = 1, py::arg("force") = false,
      "Runs one stage and returns its output directory.");
  m.def(
      "run_pipeline",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides,
         const std::vector<std::string>& exclude, int jobs, bool force) {
        const auto cfg = load_config(path, overrides, exclude);
        py::gil_scoped_release release;
        run_pipeline(cfg, quiet(jobs, force));
        return run_dir(cfg);
      },
      py::arg("config"), py::arg("overrides") = std::vector<std::string>{},
      py::arg("exclude") = std::vector<std::string>{}, py::arg("jobs") = 1, py::arg("force") = false);
}
