#pragma once

#include "msae/embedset.hpp"
#include "msae/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <vector>

namespace msae {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 4096;
    int epochs = 30;
    double grad_clip = 1.0;
    AdamWConfig adamw;
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate() const;

    // relu 5e-5, topk/batch_topk 5e-4, matryoshka 1e-4.
    static double default_lr(Variant variant);
};

// Decoder columns drawn uniform-Kaiming and scaled to L2 norm 0.1, encoder set to
// the decoder transpose, biases zero. Not yet unit-norm; see TrainState::start.
SaeParams init_params(const SaeConfig& config, std::uint64_t seed);

struct TrainState {
    SaeParams params;
    SaeParams m1;
    SaeParams m2;
    std::int64_t step = 0;
    std::vector<std::int64_t> fire_counts; // since the last reset, per latent
    std::mt19937_64 rng;

    // Renormalizes the decoder to unit columns before any update.
    static TrainState start(SaeParams params, std::uint64_t seed);

    int dead_neurons() const;
    void reset_fire_counts();
};

struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;    // after decoder projection, before clipping
    double clipped_norm = 0.0; // what the optimizer saw
};

// One optimizer step on an already-normalized batch.
StepStats train_step(TrainState& state, const Matrix& batch, const SaeConfig& sae, const TrainConfig& train);

struct Provenance {
    std::uint64_t seed = 0;
    int epochs_completed = 0;
    double final_loss = 0.0;
    Modality train_modality = Modality::image;
};

struct Checkpoint {
    SaeConfig config;
    SaeParams params;
    std::map<Modality, NormStats> stats;
    Provenance provenance;

    // Stats for the given modality; throws FormatError when absent.
    const NormStats& stats_for(Modality modality) const;
    const NormStats& train_stats() const { return stats_for(provenance.train_modality); }

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double mean_loss = 0.0;
    int dead_neurons = 0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochRecord> history;
};

using EpochObserver = std::function<void(const EpochRecord&)>;

// Fits normalization stats on `dataset`, trains, and returns a checkpoint whose
// tensors are float32-representable.
TrainResult train(const EmbeddingSet& dataset, const SaeConfig& sae, const TrainConfig& train,
                  const EpochObserver& observer = {});

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace msae
