#include "msae/cli.hpp"
#include "msae/concepts.hpp"
#include "msae/embedset.hpp"
#include "msae/error.hpp"
#include "msae/metrics.hpp"
#include "msae/serialize.hpp"
#include "msae/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace msae;

namespace {

py::object to_python(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

SaeConfig make_config(int n, const std::string& arch, int latents, std::optional<int> k, std::optional<std::vector<int>> k_list,
                      const std::string& alpha, std::optional<double> lambda, std::optional<double> softcap) {
    SaeConfig c;
    c.n = n;
    c.d = latents;
    c.variant = variant_from_string(arch);
    switch (c.variant) {
    case Variant::relu: c.lambda = lambda.value_or(0.003); break;
    case Variant::topk:
    case Variant::batch_topk:
        if (!k) throw InvalidArgument(arch + " needs k");
        c.k = *k;
        break;
    case Variant::matryoshka:
        if (!k_list) throw InvalidArgument("matryoshka needs k_list");
        c.k_list = *k_list;
        c.alpha = make_alpha(alpha == "reverse" ? AlphaScheme::reverse : AlphaScheme::uniform, c.k_list.size());
        break;
    }
    c.softcap = softcap;
    c.validate();
    return c;
}

// Thin wrapper so Python sees one object per trained model.
struct Model {
    Checkpoint ckpt;

    Matrix normalize_raw(const Matrix& x) const { return normalize(x, ckpt.train_stats()); }
};

} // namespace

PYBIND11_MODULE(_msae, m) {
    m.doc() = "Sparse autoencoder core bindings";

    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<Error>(m, "MsaeError", PyExc_ValueError);

    m.def(
        "synthesize",
        [](int n, int atoms, int active, std::int64_t count, double noise, std::uint64_t seed) {
            auto [set, truth] = synthesize({n, atoms, active, count, noise, seed});
            return py::make_tuple(set.data, truth.atoms, truth.codes);
        },
        py::arg("n") = 32, py::arg("atoms") = 64, py::arg("active") = 4, py::arg("count") = 10000, py::arg("noise") = 0.01,
        py::arg("seed") = 0, "Returns (data, atoms, codes) with data = codes @ atoms + noise.");

    m.def(
        "load_embeddings",
        [](const std::string& path) {
            const EmbeddingSet set = load_embeddings(path);
            py::dict d;
            d["data"] = set.data;
            d["modality"] = std::string(to_string(set.modality));
            d["labels"] = set.class_labels;
            return d;
        },
        py::arg("path"));

    m.def(
        "save_embeddings",
        [](const std::string& path, const Matrix& data, const std::string& modality, std::vector<std::uint32_t> labels) {
            EmbeddingSet set;
            set.data = data;
            set.modality = modality_from_string(modality);
            set.class_labels = std::move(labels);
            save_embeddings(set, path);
        },
        py::arg("path"), py::arg("data"), py::arg("modality") = "synthetic", py::arg("labels") = std::vector<std::uint32_t>{});

    py::class_<Model>(m, "Model")
        .def_static("load", [](const std::string& path) { return Model{load_checkpoint(path)}; }, py::arg("path"))
        .def("save", [](const Model& self, const std::string& path) { save_checkpoint(self.ckpt, path); }, py::arg("path"))
        .def_property_readonly("config", [](const Model& self) { return to_python(Json(self.ckpt.config)); })
        .def_property_readonly("w_enc", [](const Model& self) { return self.ckpt.params.w_enc; })
        .def_property_readonly("b_enc", [](const Model& self) { return self.ckpt.params.b_enc; })
        .def_property_readonly("w_dec", [](const Model& self) { return self.ckpt.params.w_dec; })
        .def_property_readonly("b_pre", [](const Model& self) { return self.ckpt.params.b_pre; })
        .def_property_readonly("final_loss", [](const Model& self) { return self.ckpt.provenance.final_loss; })
        .def("normalize", &Model::normalize_raw, py::arg("x"), "Applies the training-set normalization to raw rows.")
        .def(
            "encode",
            [](const Model& self, const Matrix& x, bool normalized) {
                return encode(self.ckpt.params, self.ckpt.config, normalized ? x : self.normalize_raw(x));
            },
            py::arg("x"), py::arg("normalized") = false, "Infer-mode activations.")
        .def("decode", [](const Model& self, const Matrix& z) { return decode(self.ckpt.params, z); }, py::arg("z"),
             "Reconstruction in normalized space.")
        .def(
            "reconstruct",
            [](const Model& self, const Matrix& x) {
                const Matrix xn = self.normalize_raw(x);
                return denormalize(decode(self.ckpt.params, encode(self.ckpt.params, self.ckpt.config, xn)), self.ckpt.train_stats());
            },
            py::arg("x"), "Raw-space reconstruction of raw rows.");

    m.def(
        "train",
        [](const Matrix& data, const std::string& arch, int latents, std::optional<int> k, std::optional<std::vector<int>> k_list,
           const std::string& alpha, std::optional<double> lambda, std::optional<double> softcap, std::optional<double> lr,
           int batch_size, int epochs, double grad_clip, std::uint64_t seed) {
            EmbeddingSet set;
            set.data = data;
            const SaeConfig cfg = make_config(static_cast<int>(data.cols()), arch, latents, k, k_list, alpha, lambda, softcap);
            TrainConfig t;
            t.lr = lr.value_or(TrainConfig::default_lr(cfg.variant));
            t.batch_size = batch_size;
            t.epochs = epochs;
            t.grad_clip = grad_clip;
            t.seed = seed;
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train(set, cfg, t);
            }
            return py::make_tuple(Model{std::move(r.checkpoint)}, to_python(Json(r.history)));
        },
        py::arg("data"), py::arg("arch") = "matryoshka", py::arg("latents"), py::arg("k") = py::none(),
        py::arg("k_list") = py::none(), py::arg("alpha") = "uniform", py::arg("lam") = py::none(), py::arg("softcap") = py::none(),
        py::arg("lr") = py::none(), py::arg("batch_size") = 4096, py::arg("epochs") = 30, py::arg("grad_clip") = 1.0,
        py::arg("seed") = 0, "Trains on raw rows. Returns (model, history).");

    m.def("fvu", &fvu, py::arg("x"), py::arg("x_hat"));
    m.def("cosine_fidelity", &cosine_fidelity, py::arg("x"), py::arg("x_hat"));
    m.def("l0_sparsity", &l0_sparsity, py::arg("z"));
    m.def("decoder_orthogonality", &decoder_orthogonality, py::arg("w_dec"));
    m.def("cknna", &cknna, py::arg("phi"), py::arg("psi"), py::arg("k") = kDefaultCknnaK);

    m.def(
        "match_concepts",
        [](const Model& model, const Matrix& vocab, const std::vector<std::string>& names, double sim_threshold,
           double ratio_threshold) {
            ConceptVocab v{names, vocab};
            const Matrix prepared = prepare_vocab(v, model.ckpt.train_stats());
            const auto out =
                validate_assignments(match_concepts(model.ckpt.params, prepared, names), sim_threshold, ratio_threshold);
            return py::make_tuple(to_python(Json(out.assignments)), to_python(Json(out.summary)));
        },
        py::arg("model"), py::arg("vocab"), py::arg("names"), py::arg("sim_threshold") = kDefaultSimThreshold,
        py::arg("ratio_threshold") = kDefaultRatioThreshold, "Returns (assignments, summary) for raw vocabulary rows.");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli::run(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
