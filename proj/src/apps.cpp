#include "msae/apps.hpp"

#include "msae/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace msae {

namespace {

void check_neuron(const Checkpoint& checkpoint, Index neuron) {
    if (neuron < 0 || neuron >= checkpoint.params.d())
        throw NotFound("neuron " + std::to_string(neuron) + " out of range [0, " +
                       std::to_string(checkpoint.params.d()) + ")");
}

double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

} // namespace

Index SearchIndex::find(const std::string& id) const {
    if (!ids.empty()) {
        const auto it = std::find(ids.begin(), ids.end(), id);
        if (it != ids.end()) return static_cast<Index>(it - ids.begin());
    }
    Index row = -1;
    const auto [ptr, ec] = std::from_chars(id.data(), id.data() + id.size(), row);
    if (ec != std::errc() || ptr != id.data() + id.size() || row < 0 || row >= size())
        throw NotFound("unknown sample id '" + id + "'");
    return row;
}

SearchIndex build_index(const Checkpoint& checkpoint, const EmbeddingSet& set) {
    set.validate();
    SearchIndex index;
    index.raw = set.data;
    index.activations = encode(checkpoint.params, checkpoint.config, normalize(set.data, checkpoint.stats_for(set.modality)));
    index.modality = set.modality;
    index.ids.reserve(static_cast<std::size_t>(set.rows()));
    for (Index i = 0; i < set.rows(); ++i) index.ids.push_back(set.id_of(i));
    return index;
}

std::string_view to_string(SearchSpace space) {
    return space == SearchSpace::embedding ? "embedding" : "activation";
}

SearchSpace search_space_from_string(std::string_view name) {
    if (name == "embedding") return SearchSpace::embedding;
    if (name == "activation") return SearchSpace::activation;
    throw InvalidArgument("unknown search space '" + std::string(name) + "'");
}

Query query_from_sample(const SearchIndex& index, Index row) {
    if (row < 0 || row >= index.size()) throw NotFound("sample " + std::to_string(row) + " out of range");
    return {index.raw.row(row).transpose(), index.activations.row(row).transpose()};
}

Query query_from_vector(const Checkpoint& checkpoint, Modality modality, const Vector& raw) {
    if (raw.size() != checkpoint.params.n())
        throw DimensionMismatch("query has dimension " + std::to_string(raw.size()) + ", model expects " +
                                std::to_string(checkpoint.params.n()));
    const Matrix x = normalize(Matrix(raw.transpose()), checkpoint.stats_for(modality));
    return {raw, encode(checkpoint.params, checkpoint.config, x).row(0).transpose()};
}

std::vector<SearchHit> search(const SearchIndex& index, const Query& query, SearchSpace space, Index t) {
    if (t < 0) throw InvalidArgument("t must be non-negative");
    Vector scores;
    if (space == SearchSpace::embedding) {
        if (query.raw.size() != index.raw.cols()) throw DimensionMismatch("query dimension does not match the index");
        const double qn = query.raw.norm();
        const Vector norms = index.raw.rowwise().norm();
        scores = index.raw * query.raw;
        for (Index i = 0; i < scores.size(); ++i) {
            const double denom = qn * norms[i];
            scores[i] = denom > 0.0 ? scores[i] / denom : 0.0;
        }
    } else {
        if (query.activation.size() != index.activations.cols())
            throw DimensionMismatch("query activation width does not match the index");
        scores = (index.activations.rowwise() - query.activation.transpose()).cwiseAbs().rowwise().sum();
    }

    std::vector<Index> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), Index{0});
    const bool descending = space == SearchSpace::embedding;
    const auto take = static_cast<std::size_t>(std::min(t, index.size()));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), [&](Index a, Index b) {
        if (scores[a] != scores[b]) return descending ? scores[a] > scores[b] : scores[a] < scores[b];
        return a < b;
    });

    std::vector<SearchHit> hits;
    for (std::size_t i = 0; i < take; ++i) hits.push_back({order[i], index.ids[static_cast<std::size_t>(order[i])], scores[order[i]]});
    return hits;
}

std::vector<NamedActivation> top_named_activations(const Vector& activation,
                                                   const std::vector<ConceptAssignment>& assignments, Index c) {
    std::vector<NamedActivation> named;
    for (const auto& a : assignments) {
        if (!a.valid || a.neuron < 0 || a.neuron >= activation.size()) continue;
        const double v = activation[a.neuron];
        if (v > 0.0) named.push_back({a.neuron, a.concept_name, v});
    }
    std::sort(named.begin(), named.end(), [](const NamedActivation& a, const NamedActivation& b) {
        return a.value != b.value ? a.value > b.value : a.neuron < b.neuron;
    });
    if (static_cast<Index>(named.size()) > c) named.resize(static_cast<std::size_t>(std::max<Index>(c, 0)));
    return named;
}

MatchExplanation explain_match(const SearchIndex& index, const std::vector<ConceptAssignment>& assignments,
                               Index sample_a, Index sample_b, Index top_c) {
    MatchExplanation out;
    out.top_a = top_named_activations(query_from_sample(index, sample_a).activation, assignments, top_c);
    out.top_b = top_named_activations(query_from_sample(index, sample_b).activation, assignments, top_c);
    for (const auto& a : out.top_a)
        if (std::any_of(out.top_b.begin(), out.top_b.end(), [&](const NamedActivation& b) { return b.neuron == a.neuron; }))
            out.shared.push_back(a.neuron);
    return out;
}

ManipulationResult manipulate(const Checkpoint& checkpoint, const ManipulationRequest& request) {
    const auto& params = checkpoint.params;
    if (request.raw.size() != params.n())
        throw DimensionMismatch("vector has dimension " + std::to_string(request.raw.size()) + ", model expects " +
                                std::to_string(params.n()));
    for (const auto& e : request.edits) {
        check_neuron(checkpoint, e.neuron);
        if (!(e.magnitude >= 0.0) || !std::isfinite(e.magnitude))
            throw InvalidArgument("edit magnitudes must be finite and non-negative");
    }
    const NormStats& stats = checkpoint.stats_for(request.modality);
    const Matrix x = normalize(Matrix(request.raw.transpose()), stats);

    ManipulationResult out;
    const Matrix z = encode(params, checkpoint.config, x);
    Matrix edited = z;
    for (const auto& e : request.edits) edited(0, e.neuron) = e.magnitude;

    out.original_activation = z.row(0).transpose();
    out.edited_activation = edited.row(0).transpose();
    out.plain_recon_raw = denormalize(decode(params, z), stats).row(0).transpose();
    out.edited_raw = denormalize(decode(params, edited), stats).row(0).transpose();
    out.displacement = (out.edited_raw - out.plain_recon_raw).norm();
    out.distance_to_input = (out.edited_raw - request.raw).norm();
    return out;
}

bool flat_window(std::span<const double> curve, std::size_t start, double tolerance) {
    if (start + 3 > curve.size()) return false;
    for (std::size_t i = start; i < start + 3; ++i)
        for (std::size_t j = i + 1; j < start + 3; ++j)
            if (!(std::abs(curve[i] - curve[j]) < tolerance)) return false;
    return true;
}

BiasSweep bias_sweep(const Checkpoint& checkpoint, const ProbeModel& classifier, const Matrix& raw_inputs,
                     Modality modality, Index neuron, std::vector<double> magnitudes, int target_class) {
    check_neuron(checkpoint, neuron);
    classifier.validate(checkpoint.params.n());
    if (target_class < 0 || target_class >= classifier.classes()) throw InvalidArgument("target class out of range");
    if (magnitudes.empty()) throw InvalidArgument("bias sweep needs at least one magnitude");
    for (std::size_t i = 1; i < magnitudes.size(); ++i)
        if (!(magnitudes[i] > magnitudes[i - 1])) throw InvalidArgument("magnitude grid must be strictly ascending");
    if (raw_inputs.rows() == 0) throw InvalidArgument("bias sweep needs at least one input");

    BiasSweep sweep;
    sweep.neuron = neuron;
    sweep.target_class = target_class;
    sweep.probabilities.resize(raw_inputs.rows(), static_cast<Index>(magnitudes.size()));
    for (Index r = 0; r < raw_inputs.rows(); ++r) {
        Matrix edited(static_cast<Index>(magnitudes.size()), raw_inputs.cols());
        for (std::size_t g = 0; g < magnitudes.size(); ++g) {
            const ManipulationRequest req{raw_inputs.row(r).transpose(), modality, {{neuron, magnitudes[g]}}};
            edited.row(static_cast<Index>(g)) = manipulate(checkpoint, req).edited_raw.transpose();
        }
        sweep.probabilities.row(r) = classifier.probabilities(edited).col(target_class).transpose();

        const RowVector curve = sweep.probabilities.row(r);
        const std::span<const double> values(curve.data(), static_cast<std::size_t>(curve.size()));
        sweep.plateau.push_back(values.size() >= 3 && flat_window(values, values.size() - 3));
        std::optional<int> onset;
        for (std::size_t s = 0; s + 3 <= values.size(); ++s)
            if (flat_window(values, s)) {
                onset = static_cast<int>(s);
                break;
            }
        sweep.plateau_onset.push_back(onset);
    }
    sweep.magnitudes = std::move(magnitudes);
    return sweep;
}

DistributionSummary summarize(std::vector<double> values) {
    DistributionSummary s;
    s.count = static_cast<Index>(values.size());
    if (values.empty()) return s;
    std::sort(values.begin(), values.end());
    s.min = values.front();
    s.max = values.back();
    s.q1 = quantile(values, 0.25);
    s.median = quantile(values, 0.5);
    s.q3 = quantile(values, 0.75);
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    return s;
}

double rank_auc(std::span<const double> scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw DimensionMismatch("rank_auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Mann-Whitney U with midranks for ties.
    double pos_rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
        for (std::size_t t = i; t < j; ++t)
            if (positive[order[t]]) {
                pos_rank_sum += midrank;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw InvalidArgument("rank_auc: one class partition is empty");
    const double u = pos_rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<AssociationStats> concept_association_stats(const Checkpoint& checkpoint, const ProbeModel& classifier,
                                                        const EmbeddingSet& set, const std::vector<Index>& neurons,
                                                        int positive_class) {
    set.validate();
    classifier.validate(set.cols());
    for (Index neuron : neurons) check_neuron(checkpoint, neuron);

    const std::vector<int> predicted = classifier.predict(set.data);
    std::vector<bool> positive(predicted.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) positive[i] = predicted[i] == positive_class;
    const auto n_pos = std::count(positive.begin(), positive.end(), true);
    if (n_pos == 0 || n_pos == static_cast<std::ptrdiff_t>(predicted.size()))
        throw InvalidArgument("concept association needs both predicted partitions to be non-empty");

    const Matrix z = encode(checkpoint.params, checkpoint.config, normalize(set.data, checkpoint.stats_for(set.modality)));
    std::vector<AssociationStats> out;
    for (Index neuron : neurons) {
        AssociationStats stats;
        stats.neuron = neuron;
        std::map<int, std::vector<double>> groups;
        std::vector<double> scores(predicted.size());
        for (std::size_t i = 0; i < predicted.size(); ++i) {
            scores[i] = z(static_cast<Index>(i), neuron);
            groups[predicted[i]].push_back(scores[i]);
        }
        for (auto& [cls, values] : groups) stats.by_class.emplace(cls, summarize(std::move(values)));
        stats.auc = rank_auc(scores, positive);
        out.push_back(std::move(stats));
    }
    return out;
}

} // namespace msae
