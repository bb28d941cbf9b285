#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "selfcal/calibration.hpp"
#include "selfcal/compress.hpp"
#include "selfcal/harness.hpp"
#include "selfcal/text_metrics.hpp"

namespace py = pybind11;
using namespace selfcal;

namespace {

using Sequences = std::vector<lm::TokenSequence>;

struct Model {
    lm::ModelCheckpoint ckpt;
};

py::dict config_dict(const lm::ModelConfig& c) {
    py::dict d;
    d["layers"] = c.layers;
    d["heads"] = c.heads;
    d["model_dim"] = c.model_dim;
    d["ffn_dim"] = c.ffn_dim;
    d["context_len"] = c.context_len;
    d["vocab_size"] = c.vocab_size;
    d["tied_output"] = c.tied_output;
    return d;
}

Sequences build_set(const std::string& source, std::size_t n, std::size_t length, std::uint64_t seed,
                    double t_initial, double t_final, std::size_t ramp, bool stopword_constraint,
                    const Model* model, const std::string& corpus_text, std::size_t threads) {
    calib::CalibrationSpec spec;
    spec.source = calib::parse_source(source);
    spec.num_examples = n;
    spec.example_len = length;
    spec.seed = seed;
    spec.schedule = {t_initial, t_final, ramp};
    spec.stopword_constraint = stopword_constraint;
    const auto corpus = lm::tokenize_corpus(corpus_text);
    py::gil_scoped_release release;
    return calib::build_calibration_set(spec, model ? &model->ckpt : nullptr, corpus, threads).examples;
}

py::tuple compress_fn(const Model& model, const Sequences& examples, const std::string& method,
                      std::size_t threads) {
    calib::CalibrationSet set;
    set.spec.num_examples = examples.size();
    set.spec.example_len = examples.empty() ? 0 : examples.front().size();
    set.spec.source = calib::Source::corpus;
    set.examples = examples;
    auto cfg = compress::CompressionConfig::defaults(compress::parse_method(method));
    cfg.threads = threads;
    compress::CompressionOutput out;
    {
        py::gil_scoped_release release;
        out = compress::compress_model(model.ckpt, set, cfg);
    }
    return py::make_tuple(Model{std::move(out.model)}, out.report.to_json());
}

}  // namespace

PYBIND11_MODULE(_selfcal, m) {
    m.doc() = "Bindings for the selfcal C++ library";

    py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);

    m.def("encode", [](const std::string& text) { return lm::Tokenizer::encode(text); });
    m.def("decode", [](const lm::TokenSequence& ids) { return lm::Tokenizer::decode(ids); });

    py::class_<Model>(m, "Model")
        .def_static("load", [](const std::filesystem::path& p) { return Model{lm::load_checkpoint(p)}; })
        .def_static("random",
                    [](std::size_t layers, std::size_t dim, std::size_t heads, std::size_t context,
                       std::uint64_t seed) {
                        lm::ModelConfig c;
                        c.layers = layers;
                        c.model_dim = dim;
                        c.heads = heads;
                        c.ffn_dim = 4 * dim;
                        c.context_len = context;
                        return Model{lm::ModelCheckpoint::init_random(c, seed)};
                    },
                    py::arg("layers") = 1, py::arg("dim") = 16, py::arg("heads") = 2,
                    py::arg("context") = 32, py::arg("seed") = 0)
        .def("save", [](const Model& self, const std::filesystem::path& p) { lm::save_checkpoint(self.ckpt, p); })
        .def_property_readonly("config", [](const Model& self) { return config_dict(self.ckpt.config); })
        .def_property_readonly("parameter_count",
                               [](const Model& self) { return self.ckpt.weights.parameter_count(); })
        .def("next_token_logits",
             [](const Model& self, const lm::TokenSequence& context) {
                 return lm::forward_logits(self.ckpt, context);
             })
        .def("evaluate",
             [](const Model& self, const Sequences& data, std::size_t threads) {
                 lm::EvalResult r;
                 {
                     py::gil_scoped_release release;
                     r = lm::evaluate(self.ckpt, data, threads);
                 }
                 py::dict d;
                 d["ppl"] = r.perplexity;
                 d["next_token_acc"] = r.next_token_acc;
                 d["targets"] = r.targets;
                 return d;
             },
             py::arg("data"), py::arg("threads") = 1);

    m.def("schedule_temperature",
          [](std::size_t i, double t_initial, double t_final, std::size_t n) {
              return calib::schedule_temperature(i, {t_initial, t_final, n});
          },
          py::arg("i"), py::arg("t_initial"), py::arg("t_final"), py::arg("n"));

    m.def("build_calibration_set", &build_set, py::arg("source"), py::arg("n"), py::arg("length"),
          py::arg("seed") = 0, py::arg("t_initial") = 1.0, py::arg("t_final") = 1.0, py::arg("ramp") = 10,
          py::arg("stopword_constraint") = false, py::arg("model") = nullptr, py::arg("corpus_text") = "",
          py::arg("threads") = 1);

    m.def("compress", &compress_fn, py::arg("model"), py::arg("examples"), py::arg("method"),
          py::arg("threads") = 1, "Returns (compressed model, report JSON).");

    m.def("repetition_fraction", [](const Sequences& d) { return metrics::repetition_fraction(d); });
    m.def("vocabulary_coverage", [](const Sequences& d) { return metrics::vocabulary_coverage(d); });
    m.def("ngram_diversity", [](const Sequences& d, std::size_t max_n) { return metrics::ngram_diversity(d, max_n); },
          py::arg("data"), py::arg("max_n") = 4);
    m.def("zipf_coefficient", [](const Sequences& d) { return metrics::zipf_coefficient(d); });
    m.def("analyze",
          [](const Model& model, const Sequences& d) { return metrics::analyze(model.ckpt, d).to_json(); });

    m.def("run_experiment",
          [](const std::string& config_json) {
              const auto cfg = harness::ExperimentConfig::from_json(config_json);
              py::gil_scoped_release release;
              return harness::run(cfg).to_json();
          },
          py::arg("config_json"), "Runs an experiment or ablation; returns results JSON.");
}
