#pragma once

#include "msae/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace msae {

enum class Modality : std::uint8_t { image = 0, text = 1, synthetic = 2 };

std::string_view to_string(Modality modality);
Modality modality_from_string(std::string_view name);

// Row-major sample matrix plus optional per-row metadata.
struct EmbeddingSet {
    Matrix data;
    Modality modality = Modality::synthetic;
    std::vector<std::string> id_labels;
    std::vector<std::uint32_t> class_labels;

    Index rows() const { return data.rows(); }
    Index cols() const { return data.cols(); }
    bool has_class_labels() const { return !class_labels.empty(); }

    // Label for row i, falling back to its index.
    std::string id_of(Index i) const;

    // Throws InvalidArgument / FormatError when the invariants do not hold.
    void validate() const;
};

// Per-modality centering vector and a single scalar scale.
struct NormStats {
    Vector mean;
    double scale = 1.0;
    Modality modality = Modality::synthetic;

    Index dim() const { return mean.size(); }
};

struct SyntheticSpec {
    int n = 32;
    int d_true = 64;
    int s = 4;
    std::int64_t m = 10000;
    double noise_sigma = 0.01;
    std::uint64_t seed = 0;

    void validate() const;
};

struct GroundTruth {
    Matrix atoms; // d_true x n, unit rows
    Matrix codes; // m x d_true, exactly s positive entries per row
};

// Mean row norm of the centered data below this is treated as degenerate.
inline constexpr double kDegenerateScaleThreshold = 1e-12;

NormStats fit_norm_stats(const EmbeddingSet& set);

Matrix normalize(const Matrix& rows, const NormStats& stats);
Matrix denormalize(const Matrix& rows, const NormStats& stats);
EmbeddingSet normalize(const EmbeddingSet& set, const NormStats& stats);
EmbeddingSet denormalize(const EmbeddingSet& set, const NormStats& stats);

std::pair<EmbeddingSet, GroundTruth> synthesize(const SyntheticSpec& spec);

// EMB1 binary container.
EmbeddingSet load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);

// `<stem>.stats.json` next to an embedding file.
std::filesystem::path stats_sidecar_path(const std::filesystem::path& embeddings);
NormStats load_norm_stats(const std::filesystem::path& path);
void save_norm_stats(const NormStats& stats, const std::filesystem::path& path);

} // namespace msae
