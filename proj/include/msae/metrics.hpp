#pragma once

#include "msae/sae.hpp"
#include "msae/trainer.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace msae {

// Mean fraction of zero entries per row (higher is sparser).
double l0_sparsity(const Matrix& z);

// mean ‖x - x̂‖² / mean ‖x - mean(X)‖²
double fvu(const Matrix& x, const Matrix& x_hat);
inline double evr(const Matrix& x, const Matrix& x_hat) { return 1.0 - fvu(x, x_hat); }

// Mean per-row cosine. A zero row against a zero row counts as 1, against anything else as 0.
double cosine_fidelity(const Matrix& x, const Matrix& x_hat);

// Mean signed cosine over the strict lower triangle of the column Gram matrix.
double decoder_orthogonality(const Matrix& w_dec);

// Counts latents that never fire (> 0) across every observed batch.
class DeadNeuronTracker {
public:
    explicit DeadNeuronTracker(Index d) : fired_(static_cast<std::size_t>(d), false) {}

    void observe(const Matrix& z);
    int count() const;
    const std::vector<bool>& fired() const { return fired_; }

private:
    std::vector<bool> fired_;
};

int dead_neurons(std::span<const Matrix> stream);

inline constexpr int kDefaultCknnaK = 10;

// Mutual-kNN restricted kernel alignment between paired rows of two representations.
double cknna(const Matrix& phi, const Matrix& psi, int k = kDefaultCknnaK);

// Seeded row subsample without replacement; returns all rows in order when count >= rows.
std::vector<Index> sample_rows(Index rows, Index count, std::uint64_t seed);

struct ProbeModel {
    Matrix weights; // classes x n
    Vector bias;    // classes

    Index classes() const { return bias.size(); }
    Matrix logits(const Matrix& x) const;
    std::vector<int> predict(const Matrix& x) const; // argmax, ties to the lowest class
    Matrix probabilities(const Matrix& x) const;     // row-wise softmax

    // Logistic classifier sigmoid(w·x + b) as a two-class probe; class 1 is positive.
    static ProbeModel binary(const Vector& w, double b);

    void validate(Index n) const;
};

struct ProbeConfig {
    int epochs = 20;
    int batch_size = 256;
    double lr = 1e-3;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
    // Plateau scheduler: halve lr after `patience` epochs without improving by `min_delta`.
    int patience = 2;
    double factor = 0.5;
    double min_delta = 1e-4;
};

ProbeModel train_probe(const Matrix& x, std::span<const std::uint32_t> labels, const ProbeConfig& config);

struct LpMetrics {
    double kl = 0.0;
    double acc = 0.0;
};

// KL(softmax(probe(x)) ‖ softmax(probe(x̂))) and argmax agreement, row-averaged.
LpMetrics lp_metrics(const ProbeModel& probe, const Matrix& x, const Matrix& x_hat);

// Keeps the k largest activations of each row (ties to the lowest index); k = 0 zeroes the row.
Matrix keep_top_activations(const Matrix& z, int k);

struct RecoveryPoint {
    int k = 0;
    double fvu = 0.0;
    double cs = 0.0;
    std::optional<double> cknna; // empty when undefined (e.g. k = 0)
};

struct RecoveryOptions {
    int cknna_k = kDefaultCknnaK;
    Index cknna_samples = 2000;
    std::uint64_t seed = 0;
    bool with_cknna = true;
};

// x is already normalized. Uses infer-mode activations.
std::vector<RecoveryPoint> progressive_recovery(const SaeParams& params, const SaeConfig& config, const Matrix& x,
                                                std::span<const int> k_grid, const RecoveryOptions& options = {});

struct HistogramConfig {
    double log10_min = -4.0;
    double log10_max = 3.0;
    int bins = 70;
    double high_threshold = 15.0;
};

struct HighActivation {
    std::int64_t sample = 0;
    Index neuron = 0;
    double value = 0.0;
};

// Log10-binned histogram of strictly positive activations and of per-sample maxima.
// Values outside the edge range fall into the first or last bin.
class ActivationHistogram {
public:
    explicit ActivationHistogram(HistogramConfig config = {});

    // `first_sample` is the stream index of z's first row.
    void observe(const Matrix& z, std::int64_t first_sample);

    const HistogramConfig& config() const { return config_; }
    std::vector<double> edges() const;
    const std::vector<std::int64_t>& counts() const { return counts_; }
    const std::vector<std::int64_t>& max_counts() const { return max_counts_; }
    const std::vector<HighActivation>& high() const { return high_; }
    std::int64_t nonzero() const { return nonzero_; }

    int bin_of(double value) const;

private:
    HistogramConfig config_;
    std::vector<std::int64_t> counts_;
    std::vector<std::int64_t> max_counts_;
    std::vector<HighActivation> high_;
    std::int64_t nonzero_ = 0;
};

struct MetricsReport {
    double l0 = 0.0;
    double fvu = 0.0;
    double evr = 0.0;
    double cs = 0.0;
    double cknna = 0.0;
    double do_score = 0.0;
    int ndn = 0;
    std::optional<double> lp_kl;
    std::optional<double> lp_acc;
    // Per-sample spread.
    double l0_std = 0.0;
    double fvu_std = 0.0;
    double cs_std = 0.0;
};

struct EvalOptions {
    int cknna_k = kDefaultCknnaK;
    Index cknna_samples = 2000;
    std::uint64_t seed = 0;
    // Forces a per-row TopK on infer-mode activations when set.
    std::optional<int> force_topk;
    // Probe for LP metrics; trained on the raw set when the set has class labels and no probe is given.
    std::optional<ProbeModel> probe;
    ProbeConfig probe_config;
};

struct Evaluation {
    MetricsReport report;
    Matrix x;      // normalized inputs
    Matrix z;      // activations used
    Matrix x_hat;  // reconstruction in normalized space
};

// Normalizes with the checkpoint's stats for the set's modality and evaluates in infer mode.
Evaluation evaluate(const Checkpoint& checkpoint, const EmbeddingSet& set, const EvalOptions& options = {});

} // namespace msae
