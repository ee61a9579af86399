#pragma once

#include "msae/concepts.hpp"
#include "msae/metrics.hpp"
#include "msae/trainer.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace msae {

// Raw embeddings and their cached infer-mode activations. Immutable once built.
struct SearchIndex {
    Matrix raw;         // m x n
    Matrix activations; // m x d
    std::vector<std::string> ids;
    Modality modality = Modality::image;

    Index size() const { return raw.rows(); }
    // Row for an id label, or for a decimal row index when labels are absent.
    Index find(const std::string& id) const;
};

SearchIndex build_index(const Checkpoint& checkpoint, const EmbeddingSet& set);

enum class SearchSpace { embedding, activation };

std::string_view to_string(SearchSpace space);
SearchSpace search_space_from_string(std::string_view name);

struct Query {
    Vector raw;
    Vector activation;
};

Query query_from_sample(const SearchIndex& index, Index row);
Query query_from_vector(const Checkpoint& checkpoint, Modality modality, const Vector& raw);

struct SearchHit {
    Index sample = 0;
    std::string id;
    double score = 0.0; // cosine (embedding space) or L1 distance (activation space)
};

// Embedding space: descending cosine of raw vectors. Activation space: ascending
// Manhattan distance. Ties go to the lower sample index.
std::vector<SearchHit> search(const SearchIndex& index, const Query& query, SearchSpace space, Index t);

struct NamedActivation {
    Index neuron = 0;
    std::string concept_name;
    double value = 0.0;
};

// Top-c positive activations of a row restricted to valid named neurons.
std::vector<NamedActivation> top_named_activations(const Vector& activation,
                                                   const std::vector<ConceptAssignment>& assignments, Index c);

struct MatchExplanation {
    std::vector<NamedActivation> top_a;
    std::vector<NamedActivation> top_b;
    std::vector<Index> shared; // neurons present in both lists, in top_a order
};

MatchExplanation explain_match(const SearchIndex& index, const std::vector<ConceptAssignment>& assignments,
                               Index sample_a, Index sample_b, Index top_c);

struct Edit {
    Index neuron = 0;
    double magnitude = 0.0;
};

struct ManipulationRequest {
    Vector raw;
    Modality modality = Modality::image;
    std::vector<Edit> edits;
};

struct ManipulationResult {
    Vector original_activation;
    Vector edited_activation;
    Vector plain_recon_raw;  // decode of the unedited activations
    Vector edited_raw;
    double displacement = 0.0;      // ‖edited_raw - plain_recon_raw‖
    double distance_to_input = 0.0; // ‖edited_raw - raw input‖
};

// Infer-mode encode, overwrite the edited activations, decode, map back to raw space.
ManipulationResult manipulate(const Checkpoint& checkpoint, const ManipulationRequest& request);

struct BiasSweep {
    Index neuron = 0;
    int target_class = 1;
    std::vector<double> magnitudes;
    Matrix probabilities;                    // inputs x magnitudes
    std::vector<bool> plateau;               // last three points flat
    std::vector<std::optional<int>> plateau_onset; // first flat three-point window
};

inline constexpr double kPlateauTolerance = 0.01;

// Three consecutive probabilities differing pairwise by less than the tolerance.
bool flat_window(std::span<const double> curve, std::size_t start, double tolerance = kPlateauTolerance);

BiasSweep bias_sweep(const Checkpoint& checkpoint, const ProbeModel& classifier, const Matrix& raw_inputs,
                     Modality modality, Index neuron, std::vector<double> magnitudes, int target_class = 1);

struct DistributionSummary {
    Index count = 0;
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
    double mean = 0.0;
};

DistributionSummary summarize(std::vector<double> values);

// Probability that a random positive scores above a random negative; ties count half.
double rank_auc(std::span<const double> scores, const std::vector<bool>& positive);

struct AssociationStats {
    Index neuron = 0;
    std::map<int, DistributionSummary> by_class;
    double auc = 0.5; // activation vs (predicted == positive_class)
};

std::vector<AssociationStats> concept_association_stats(const Checkpoint& checkpoint, const ProbeModel& classifier,
                                                        const EmbeddingSet& set, const std::vector<Index>& neurons,
                                                        int positive_class = 1);

} // namespace msae
