#pragma once

#include "msae/linalg.hpp"

#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace msae {

enum class Variant { relu, topk, batch_topk, matryoshka };

std::string_view to_string(Variant variant);
Variant variant_from_string(std::string_view name);

// Matryoshka level weights.
enum class AlphaScheme { uniform, reverse };

// 1 for every level (uniform) or h - i + 1 for level i = 1..h (reverse).
std::vector<double> make_alpha(AlphaScheme scheme, std::size_t levels);

struct SaeConfig {
    int n = 0;
    int d = 0;
    Variant variant = Variant::relu;
    double lambda = 0.0;          // relu
    int k = 0;                    // topk, batch_topk
    std::vector<int> k_list;      // matryoshka, strictly ascending
    std::vector<double> alpha;    // matryoshka, one per k_list entry
    std::optional<double> softcap;

    // Number of sparsification levels in train mode.
    std::size_t levels() const { return variant == Variant::matryoshka ? k_list.size() : 1; }

    void validate() const;
};

struct SaeParams {
    Matrix w_enc; // d x n
    Vector b_enc; // d
    Matrix w_dec; // n x d, unit columns
    Vector b_pre; // n

    Index n() const { return b_pre.size(); }
    Index d() const { return b_enc.size(); }

    static SaeParams zeros(Index n, Index d);

    bool all_finite() const;
    // max over columns of |‖column‖ - 1|
    double max_decoder_norm_error() const;
    void renormalize_decoder();

    SaeParams& operator+=(const SaeParams& other);
    SaeParams& operator*=(double factor);
    double squared_norm() const;
};

// Gradients share the parameter layout.
using SaeGradients = SaeParams;

enum class Mode { train, infer };

struct ForwardTrace {
    Mode mode = Mode::train;
    Matrix preact;                    // batch x d
    std::vector<Matrix> z;            // per level, batch x d
    std::vector<Matrix> recon;        // per level, batch x n
    std::vector<Mask> active;         // z > 0, per level

    const Matrix& last_z() const { return z.back(); }
    const Matrix& last_recon() const { return recon.back(); }
};

// k largest entries by value; ties go to the lowest index.
std::vector<bool> topk_mask(std::span<const double> values, int k);

// k largest entries of each row.
Mask row_topk_mask(const Matrix& values, int k);

// k * rows largest entries of the flattened matrix; ties go to the lowest flat index.
Mask batch_topk_mask(const Matrix& values, int k);

// Nested per-row masks for ascending ks: level i keeps the ks[i] largest entries.
std::vector<Mask> nested_topk_masks(const Matrix& values, std::span<const int> ks);

Matrix softcap_apply(const Matrix& z, double softcap);

Matrix encode_preact(const SaeParams& params, const Matrix& x);
Matrix decode(const SaeParams& params, const Matrix& z);

// Infer-mode activations: ReLU only, softcap if configured.
Matrix encode(const SaeParams& params, const SaeConfig& config, const Matrix& x);

ForwardTrace forward(const SaeParams& params, const SaeConfig& config, const Matrix& x, Mode mode);

// Batch-mean objective of the configured variant.
double loss(const ForwardTrace& trace, const SaeConfig& config, const Matrix& x);

// Sparsification masks are treated as constants of the forward pass.
SaeGradients backward(const ForwardTrace& trace, const SaeConfig& config, const SaeParams& params, const Matrix& x);

// Removes the radial component of each decoder-column gradient.
SaeGradients project_decoder_gradient(const SaeParams& params, SaeGradients grads);

} // namespace msae
