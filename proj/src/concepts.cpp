#include "msae/concepts.hpp"

#include "msae/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace msae {

void ConceptVocab::validate() const {
    if (static_cast<Index>(names.size()) != embeddings.rows())
        throw InvalidArgument("vocabulary names and embeddings disagree in count");
    std::set<std::string> seen;
    for (const auto& name : names)
        if (!seen.insert(name).second) throw InvalidArgument("duplicate vocabulary concept '" + name + "'");
    if (!embeddings.allFinite()) throw FormatError(FormatError::Code::non_finite, "vocabulary has non-finite rows");
}

ConceptVocab load_vocab(const std::filesystem::path& tsv, const std::filesystem::path& embeddings) {
    const EmbeddingSet rows = load_embeddings(embeddings);
    std::ifstream in(tsv);
    if (!in) throw FormatError(FormatError::Code::io, "cannot open: " + tsv.string());

    ConceptVocab vocab;
    std::vector<Index> picks;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw FormatError(FormatError::Code::bad_header, "vocab line " + std::to_string(line_no) + " lacks a tab");
        Index row = -1;
        try {
            std::size_t used = 0;
            row = std::stoll(line.substr(tab + 1), &used);
            if (used != line.size() - tab - 1) row = -1;
        } catch (const std::exception&) {
            row = -1;
        }
        if (row < 0 || row >= rows.rows())
            throw FormatError(FormatError::Code::bad_header, "vocab line " + std::to_string(line_no) + " has a bad row index");
        vocab.names.push_back(line.substr(0, tab));
        picks.push_back(row);
    }
    vocab.embeddings.resize(static_cast<Index>(picks.size()), rows.cols());
    for (std::size_t i = 0; i < picks.size(); ++i) vocab.embeddings.row(static_cast<Index>(i)) = rows.data.row(picks[i]);
    vocab.validate();
    return vocab;
}

Matrix prepare_vocab(const ConceptVocab& vocab, const NormStats& stats) {
    vocab.validate();
    return normalize(vocab.embeddings, stats);
}

std::vector<ConceptAssignment> match_concepts(const SaeParams& params, const Matrix& prepared_vocab,
                                              const std::vector<std::string>& names) {
    const Index v = prepared_vocab.rows();
    if (v < 2) throw InvalidArgument("match_concepts needs at least two vocabulary concepts");
    if (static_cast<Index>(names.size()) != v) throw InvalidArgument("vocabulary names and rows disagree in count");
    if (prepared_vocab.cols() != params.n()) throw DimensionMismatch("vocabulary dimension does not match the model");

    Matrix vocab_unit = prepared_vocab;
    for (Index r = 0; r < v; ++r) {
        const double norm = vocab_unit.row(r).norm();
        if (norm > 0.0) vocab_unit.row(r) /= norm;
    }
    Matrix dec_unit = params.w_dec;
    for (Index c = 0; c < dec_unit.cols(); ++c) {
        const double norm = dec_unit.col(c).norm();
        if (norm > 0.0) dec_unit.col(c) /= norm;
    }
    // sims(neuron, concept)
    const Matrix sims = dec_unit.transpose() * vocab_unit.transpose();

    std::vector<Index> best_neuron(static_cast<std::size_t>(v), 0);
    for (Index c = 0; c < v; ++c) {
        Index best = 0;
        for (Index neuron = 1; neuron < sims.rows(); ++neuron)
            if (sims(neuron, c) > sims(best, c)) best = neuron;
        best_neuron[static_cast<std::size_t>(c)] = best;
    }

    std::vector<ConceptAssignment> out;
    out.reserve(static_cast<std::size_t>(sims.rows()));
    for (Index neuron = 0; neuron < sims.rows(); ++neuron) {
        Index first = 0, second = -1;
        for (Index c = 1; c < v; ++c) {
            if (sims(neuron, c) > sims(neuron, first)) {
                second = first;
                first = c;
            } else if (second < 0 || sims(neuron, c) > sims(neuron, second)) {
                second = c;
            }
        }
        if (second < 0) second = first == 0 ? 1 : 0;
        ConceptAssignment a;
        a.neuron = neuron;
        a.concept_index = first;
        a.concept_name = names[static_cast<std::size_t>(first)];
        a.similarity = sims(neuron, first);
        a.second_concept = names[static_cast<std::size_t>(second)];
        a.second_similarity = sims(neuron, second);
        a.ratio = a.ratio_defined() ? a.similarity / a.second_similarity : std::numeric_limits<double>::quiet_NaN();
        a.is_best_for_concept = best_neuron[static_cast<std::size_t>(first)] == neuron;
        out.push_back(std::move(a));
    }
    return out;
}

ValidatedAssignments validate_assignments(std::vector<ConceptAssignment> assignments, double sim_threshold,
                                          double ratio_threshold) {
    // Highest similarity per concept among these assignments; lowest neuron wins ties.
    std::map<std::string, std::size_t> leader;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        const auto& a = assignments[i];
        auto [it, inserted] = leader.emplace(a.concept_name, i);
        if (inserted) continue;
        const auto& cur = assignments[it->second];
        if (a.similarity > cur.similarity || (a.similarity == cur.similarity && a.neuron < cur.neuron)) it->second = i;
    }

    ValidatedAssignments out;
    auto& sum = out.summary;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        auto& a = assignments[i];
        a.passes_sim = a.similarity > sim_threshold;
        a.passes_ratio = !a.ratio_defined() || a.ratio > ratio_threshold;
        a.is_best_for_concept = a.is_best_for_concept && leader.at(a.concept_name) == i;
        a.valid = a.passes_sim && a.passes_ratio && a.is_best_for_concept;
        sum.above_threshold += a.passes_sim;
        sum.best_vector += a.is_best_for_concept;
        sum.above_and_best += a.passes_sim && a.is_best_for_concept;
        sum.ratio += a.passes_ratio;
        sum.all += a.valid;
    }
    out.assignments = std::move(assignments);
    return out;
}

TopSamples top_activating_samples(const Checkpoint& checkpoint, const EmbeddingSet& set, Index neuron, Index t) {
    set.validate();
    if (neuron < 0 || neuron >= checkpoint.params.d())
        throw NotFound("neuron " + std::to_string(neuron) + " out of range");
    if (t < 0) throw InvalidArgument("t must be non-negative");
    const Matrix x = normalize(set.data, checkpoint.stats_for(set.modality));
    const Matrix z = encode(checkpoint.params, checkpoint.config, x);

    std::vector<Index> order(static_cast<std::size_t>(z.rows()));
    std::iota(order.begin(), order.end(), Index{0});
    const auto col = z.col(neuron);
    const auto take = static_cast<std::size_t>(std::min(t, z.rows()));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](Index a, Index b) { return col[a] != col[b] ? col[a] > col[b] : a < b; });

    TopSamples out;
    out.all_zero = !(col.array() > 0.0).any();
    for (std::size_t i = 0; i < take; ++i) out.samples.push_back({order[i], set.id_of(order[i]), col[order[i]]});
    return out;
}

} // namespace msae
