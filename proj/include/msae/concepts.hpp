#pragma once

#include "msae/embedset.hpp"
#include "msae/sae.hpp"
#include "msae/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace msae {

struct ConceptVocab {
    std::vector<std::string> names;
    Matrix embeddings; // |V| x n, raw space of the training modality

    Index size() const { return embeddings.rows(); }
    void validate() const;
};

// TSV `name<TAB>row-index` lines paired with an EMB1 file of vocabulary embeddings.
ConceptVocab load_vocab(const std::filesystem::path& tsv, const std::filesystem::path& embeddings);

struct ConceptAssignment {
    Index neuron = 0;
    std::string concept_name;
    Index concept_index = 0;
    double similarity = 0.0;
    std::string second_concept;
    double second_similarity = 0.0;
    // similarity / second_similarity; undefined (NaN) when second_similarity <= 0.
    double ratio = 0.0;
    bool passes_sim = false;
    bool passes_ratio = false;
    bool is_best_for_concept = false;
    bool valid = false;

    bool ratio_defined() const { return second_similarity > 0.0; }
};

inline constexpr double kDefaultSimThreshold = 0.42;
inline constexpr double kDefaultRatioThreshold = 2.0;

// Centers and scales like the training data. b_pre is deliberately kept.
Matrix prepare_vocab(const ConceptVocab& vocab, const NormStats& stats);

// One assignment per neuron: best and runner-up concept by cosine to the decoder column.
// is_best_for_concept is set when the neuron is the argmax over all neurons for its concept.
std::vector<ConceptAssignment> match_concepts(const SaeParams& params, const Matrix& prepared_vocab,
                                              const std::vector<std::string>& names);

struct ValidationSummary {
    int above_threshold = 0;
    int best_vector = 0;
    int above_and_best = 0;
    int ratio = 0;
    int all = 0;
};

struct ValidatedAssignments {
    std::vector<ConceptAssignment> assignments;
    ValidationSummary summary;
};

// Applies the similarity, ratio and best-vector gates. Among assignments sharing a concept
// only the highest similarity (lowest neuron on ties) keeps is_best_for_concept.
ValidatedAssignments validate_assignments(std::vector<ConceptAssignment> assignments,
                                          double sim_threshold = kDefaultSimThreshold,
                                          double ratio_threshold = kDefaultRatioThreshold);

struct SampleActivation {
    Index sample = 0;
    std::string id;
    double activation = 0.0;
};

struct TopSamples {
    std::vector<SampleActivation> samples;
    bool all_zero = false; // the neuron never fires on this set
};

// Infer-mode activations of one neuron, descending, ties to the lower sample index.
TopSamples top_activating_samples(const Checkpoint& checkpoint, const EmbeddingSet& set, Index neuron, Index t);

} // namespace msae
