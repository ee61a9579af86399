#include "msae/serialize.hpp"

#include "msae/error.hpp"

#include <cmath>

namespace msae {

namespace {

Json optional_number(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

} // namespace

Json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from_json(const Json& j) {
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

void to_json(Json& j, const SaeConfig& c) {
    j = Json{{"n", c.n}, {"d", c.d}, {"variant", std::string(to_string(c.variant))}};
    switch (c.variant) {
    case Variant::relu: j["lambda"] = c.lambda; break;
    case Variant::topk:
    case Variant::batch_topk: j["k"] = c.k; break;
    case Variant::matryoshka:
        j["k_list"] = c.k_list;
        j["alpha"] = c.alpha;
        break;
    }
    j["softcap"] = optional_number(c.softcap);
}

void from_json(const Json& j, SaeConfig& c) {
    c = SaeConfig{};
    c.n = j.at("n").get<int>();
    c.d = j.at("d").get<int>();
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
    if (j.contains("k")) c.k = j.at("k").get<int>();
    if (j.contains("k_list")) c.k_list = j.at("k_list").get<std::vector<int>>();
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<std::vector<double>>();
    if (j.contains("softcap") && !j.at("softcap").is_null()) c.softcap = j.at("softcap").get<double>();
    c.validate();
}

void to_json(Json& j, const Provenance& p) {
    j = Json{{"seed", p.seed},
             {"epochs_completed", p.epochs_completed},
             {"final_loss", p.final_loss},
             {"train_modality", std::string(to_string(p.train_modality))}};
}

void from_json(const Json& j, Provenance& p) {
    p.seed = j.at("seed").get<std::uint64_t>();
    p.epochs_completed = j.at("epochs_completed").get<int>();
    p.final_loss = j.at("final_loss").get<double>();
    p.train_modality = modality_from_string(j.at("train_modality").get<std::string>());
}

void to_json(Json& j, const EpochRecord& r) {
    j = Json{{"epoch", r.epoch}, {"loss", r.mean_loss}, {"dead_neurons", r.dead_neurons}};
}

void to_json(Json& j, const MetricsReport& r) {
    j = Json{{"l0", r.l0},
             {"fvu", r.fvu},
             {"evr", r.evr},
             {"cs", r.cs},
             {"cknna", r.cknna},
             {"do", r.do_score},
             {"ndn", r.ndn},
             {"lp_kl", optional_number(r.lp_kl)},
             {"lp_acc", optional_number(r.lp_acc)},
             {"l0_std", r.l0_std},
             {"fvu_std", r.fvu_std},
             {"cs_std", r.cs_std}};
}

void to_json(Json& j, const RecoveryPoint& p) {
    j = Json{{"k", p.k}, {"fvu", p.fvu}, {"cs", p.cs}, {"cknna", optional_number(p.cknna)}};
}

void to_json(Json& j, const ActivationHistogram& h) {
    Json high = Json::array();
    for (const auto& e : h.high()) high.push_back({{"sample", e.sample}, {"neuron", e.neuron}, {"value", e.value}});
    j = Json{{"log10_edges", h.edges()},
             {"counts", h.counts()},
             {"max_counts", h.max_counts()},
             {"nonzero", h.nonzero()},
             {"high_threshold", h.config().high_threshold},
             {"high", std::move(high)}};
}

void to_json(Json& j, const ProbeModel& p) {
    Json rows = Json::array();
    for (Index r = 0; r < p.weights.rows(); ++r) rows.push_back(vector_to_json(p.weights.row(r).transpose()));
    j = Json{{"weights", std::move(rows)}, {"bias", vector_to_json(p.bias)}};
}

void from_json(const Json& j, ProbeModel& p) {
    if (j.contains("w")) {
        p = ProbeModel::binary(vector_from_json(j.at("w")), j.at("b").get<double>());
        return;
    }
    const auto& rows = j.at("weights");
    p.bias = vector_from_json(j.at("bias"));
    if (rows.size() != static_cast<std::size_t>(p.bias.size()) || rows.empty())
        throw FormatError(FormatError::Code::validation, "probe weights and bias disagree in class count");
    const Index n = static_cast<Index>(rows.at(0).size());
    p.weights.resize(p.bias.size(), n);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const Vector row = vector_from_json(rows[r]);
        if (row.size() != n) throw FormatError(FormatError::Code::validation, "ragged probe weight matrix");
        p.weights.row(static_cast<Index>(r)) = row.transpose();
    }
}

void to_json(Json& j, const ConceptAssignment& a) {
    j = Json{{"neuron", a.neuron},
             {"concept", a.concept_name},
             {"similarity", a.similarity},
             {"second_concept", a.second_concept},
             {"second_similarity", a.second_similarity},
             {"ratio", finite_or_null(a.ratio)},
             {"passes_sim", a.passes_sim},
             {"passes_ratio", a.passes_ratio},
             {"is_best_for_concept", a.is_best_for_concept},
             {"valid", a.valid}};
}

void from_json(const Json& j, ConceptAssignment& a) {
    a.neuron = j.at("neuron").get<Index>();
    a.concept_name = j.at("concept").get<std::string>();
    a.similarity = j.at("similarity").get<double>();
    a.second_concept = j.value("second_concept", std::string());
    a.second_similarity = j.at("second_similarity").get<double>();
    a.ratio = j.at("ratio").is_null() ? std::nan("") : j.at("ratio").get<double>();
    a.passes_sim = j.value("passes_sim", false);
    a.passes_ratio = j.value("passes_ratio", false);
    a.is_best_for_concept = j.value("is_best_for_concept", false);
    a.valid = j.value("valid", false);
}

void to_json(Json& j, const ValidationSummary& s) {
    j = Json{{"above_threshold", s.above_threshold},
             {"best_vector", s.best_vector},
             {"above_and_best", s.above_and_best},
             {"ratio", s.ratio},
             {"all", s.all}};
}

void to_json(Json& j, const SearchHit& h) { j = Json{{"sample", h.sample}, {"id", h.id}, {"score", h.score}}; }

void to_json(Json& j, const NamedActivation& a) {
    j = Json{{"neuron", a.neuron}, {"concept", a.concept_name}, {"value", a.value}};
}

void to_json(Json& j, const MatchExplanation& m) {
    j = Json{{"top_a", m.top_a}, {"top_b", m.top_b}, {"shared", m.shared}};
}

void to_json(Json& j, const BiasSweep& s) {
    Json curves = Json::array();
    for (Index r = 0; r < s.probabilities.rows(); ++r) {
        Json onset = s.plateau_onset[static_cast<std::size_t>(r)] ? Json(*s.plateau_onset[static_cast<std::size_t>(r)]) : Json(nullptr);
        curves.push_back({{"probabilities", vector_to_json(s.probabilities.row(r).transpose())},
                          {"plateau", static_cast<bool>(s.plateau[static_cast<std::size_t>(r)])},
                          {"plateau_onset", std::move(onset)}});
    }
    j = Json{{"neuron", s.neuron}, {"target_class", s.target_class}, {"magnitudes", s.magnitudes}, {"curves", std::move(curves)}};
}

void to_json(Json& j, const DistributionSummary& s) {
    j = Json{{"count", s.count}, {"min", s.min},       {"q1", s.q1},  {"median", s.median},
             {"q3", s.q3},       {"max", s.max},       {"mean", s.mean}};
}

void to_json(Json& j, const AssociationStats& s) {
    Json classes = Json::object();
    for (const auto& [cls, summary] : s.by_class) classes[std::to_string(cls)] = summary;
    j = Json{{"neuron", s.neuron}, {"by_class", std::move(classes)}, {"auc", s.auc}};
}

} // namespace msae
