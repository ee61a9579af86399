#include "msae/sae.hpp"

#include "msae/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace msae {

namespace {

// Strict total order: larger value first, then lower index.
struct ByValueThenIndex {
    const double* values;
    bool operator()(Index a, Index b) const {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    }
};

void check_input(const SaeParams& params, const Matrix& x) {
    if (x.cols() != params.n())
        throw DimensionMismatch("input has " + std::to_string(x.cols()) + " columns, model expects " +
                                std::to_string(params.n()));
    if (!x.allFinite()) throw NumericError("non-finite input to forward pass");
}

Mask positive(const Matrix& z) { return (z.array() > 0.0).matrix(); }

// Zero outside the mask, then ReLU, then optional softcap.
Matrix sparsify(const Matrix& preact, const Mask& mask, const std::optional<double>& softcap) {
    Matrix z = mask.select(preact.cwiseMax(0.0), Matrix::Zero(preact.rows(), preact.cols()));
    if (softcap) z = softcap_apply(z, *softcap);
    return z;
}

} // namespace

std::string_view to_string(Variant variant) {
    switch (variant) {
    case Variant::relu: return "relu";
    case Variant::topk: return "topk";
    case Variant::batch_topk: return "batch_topk";
    case Variant::matryoshka: return "matryoshka";
    }
    return "unknown";
}

Variant variant_from_string(std::string_view name) {
    if (name == "relu") return Variant::relu;
    if (name == "topk") return Variant::topk;
    if (name == "batch_topk" || name == "batchtopk") return Variant::batch_topk;
    if (name == "matryoshka") return Variant::matryoshka;
    throw InvalidArgument("unknown architecture '" + std::string(name) + "'");
}

std::vector<double> make_alpha(AlphaScheme scheme, std::size_t levels) {
    std::vector<double> alpha(levels, 1.0);
    if (scheme == AlphaScheme::reverse)
        for (std::size_t i = 0; i < levels; ++i) alpha[i] = static_cast<double>(levels - i);
    return alpha;
}

void SaeConfig::validate() const {
    if (n < 1 || d < 1) throw InvalidArgument("SAE dimensions must be positive");
    if (softcap && !(*softcap > 0.0)) throw InvalidArgument("softcap must be positive");
    switch (variant) {
    case Variant::relu:
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be non-negative");
        break;
    case Variant::topk:
    case Variant::batch_topk:
        if (k < 1 || k > d) throw InvalidArgument("k must lie in [1, d]");
        break;
    case Variant::matryoshka:
        if (k_list.empty()) throw InvalidArgument("matryoshka needs a non-empty k_list");
        if (k_list.front() < 1) throw InvalidArgument("k_list entries must be positive");
        for (std::size_t i = 1; i < k_list.size(); ++i)
            if (k_list[i] <= k_list[i - 1]) throw InvalidArgument("k_list must be strictly ascending");
        if (k_list.back() > d) throw InvalidArgument("last k_list entry exceeds d");
        if (alpha.size() != k_list.size()) throw InvalidArgument("alpha must have one weight per k_list entry");
        for (double a : alpha)
            if (!(a > 0.0) || !std::isfinite(a)) throw InvalidArgument("alpha weights must be positive");
        break;
    }
}

SaeParams SaeParams::zeros(Index n, Index d) {
    return {Matrix::Zero(d, n), Vector::Zero(d), Matrix::Zero(n, d), Vector::Zero(n)};
}

bool SaeParams::all_finite() const {
    return w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_pre.allFinite();
}

double SaeParams::max_decoder_norm_error() const {
    if (w_dec.cols() == 0) return 0.0;
    return (w_dec.colwise().norm().array() - 1.0).abs().maxCoeff();
}

void SaeParams::renormalize_decoder() {
    for (Index c = 0; c < w_dec.cols(); ++c) {
        const double norm = w_dec.col(c).norm();
        if (norm > 0.0) w_dec.col(c) /= norm;
    }
}

SaeParams& SaeParams::operator+=(const SaeParams& other) {
    w_enc += other.w_enc;
    b_enc += other.b_enc;
    w_dec += other.w_dec;
    b_pre += other.b_pre;
    return *this;
}

SaeParams& SaeParams::operator*=(double factor) {
    w_enc *= factor;
    b_enc *= factor;
    w_dec *= factor;
    b_pre *= factor;
    return *this;
}

double SaeParams::squared_norm() const {
    return w_enc.squaredNorm() + b_enc.squaredNorm() + w_dec.squaredNorm() + b_pre.squaredNorm();
}

std::vector<bool> topk_mask(std::span<const double> values, int k) {
    const auto d = static_cast<Index>(values.size());
    if (k < 1 || k > d) throw InvalidArgument("topk: k must lie in [1, d]");
    std::vector<Index> order(values.size());
    std::iota(order.begin(), order.end(), Index{0});
    std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), ByValueThenIndex{values.data()});
    std::vector<bool> mask(values.size(), false);
    for (int i = 0; i < k; ++i) mask[static_cast<std::size_t>(order[i])] = true;
    return mask;
}

Mask row_topk_mask(const Matrix& values, int k) {
    const int ks[] = {k};
    return nested_topk_masks(values, ks).front();
}

std::vector<Mask> nested_topk_masks(const Matrix& values, std::span<const int> ks) {
    const Index d = values.cols();
    if (ks.empty()) throw InvalidArgument("nested_topk_masks: no levels");
    for (std::size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] < 1 || ks[i] > d) throw InvalidArgument("topk: k must lie in [1, d]");
        if (i > 0 && ks[i] <= ks[i - 1]) throw InvalidArgument("topk levels must be strictly ascending");
    }
    const int k_max = ks.back();
    std::vector<Mask> masks(ks.size(), Mask::Constant(values.rows(), d, false));
    std::vector<Index> order(static_cast<std::size_t>(d));
    for (Index r = 0; r < values.rows(); ++r) {
        const double* row = values.data() + r * d;
        std::iota(order.begin(), order.end(), Index{0});
        std::partial_sort(order.begin(), order.begin() + k_max, order.end(), ByValueThenIndex{row});
        // Level i takes a prefix of one shared ordering, so supports nest exactly.
        for (std::size_t level = 0; level < ks.size(); ++level)
            for (int i = 0; i < ks[level]; ++i) masks[level](r, order[i]) = true;
    }
    return masks;
}

Mask batch_topk_mask(const Matrix& values, int k) {
    const Index total = values.size();
    const Index keep = static_cast<Index>(k) * values.rows();
    if (k < 1 || keep > total) throw InvalidArgument("batch_topk: k must lie in [1, d]");
    std::vector<Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), Index{0});
    std::nth_element(order.begin(), order.begin() + (keep - 1), order.end(), ByValueThenIndex{values.data()});
    Mask mask = Mask::Constant(values.rows(), values.cols(), false);
    bool* flat = mask.data();
    for (Index i = 0; i < keep; ++i) flat[order[i]] = true;
    return mask;
}

Matrix softcap_apply(const Matrix& z, double softcap) {
    return ((z.array() / softcap).tanh() * softcap).matrix();
}

Matrix encode_preact(const SaeParams& params, const Matrix& x) {
    return ((x.rowwise() - params.b_pre.transpose()) * params.w_enc.transpose()).rowwise() + params.b_enc.transpose();
}

Matrix decode(const SaeParams& params, const Matrix& z) {
    if (z.cols() != params.d())
        throw DimensionMismatch("activations have " + std::to_string(z.cols()) + " columns, model has " +
                                std::to_string(params.d()) + " latents");
    return (z * params.w_dec.transpose()).rowwise() + params.b_pre.transpose();
}

Matrix encode(const SaeParams& params, const SaeConfig& config, const Matrix& x) {
    check_input(params, x);
    Matrix z = encode_preact(params, x).cwiseMax(0.0);
    if (config.softcap) z = softcap_apply(z, *config.softcap);
    return z;
}

ForwardTrace forward(const SaeParams& params, const SaeConfig& config, const Matrix& x, Mode mode) {
    check_input(params, x);
    if (config.n != params.n() || config.d != params.d())
        throw DimensionMismatch("config dimensions do not match the parameters");

    ForwardTrace trace;
    trace.mode = mode;
    trace.preact = encode_preact(params, x);
    const Index rows = trace.preact.rows();
    const Index d = trace.preact.cols();

    std::vector<Mask> masks;
    if (mode == Mode::infer || config.variant == Variant::relu) {
        masks.push_back(Mask::Constant(rows, d, true));
    } else if (config.variant == Variant::topk) {
        masks.push_back(row_topk_mask(trace.preact, config.k));
    } else if (config.variant == Variant::batch_topk) {
        masks.push_back(batch_topk_mask(trace.preact, config.k));
    } else {
        masks = nested_topk_masks(trace.preact, config.k_list);
    }

    for (const auto& mask : masks) {
        Matrix z = sparsify(trace.preact, mask, config.softcap);
        trace.recon.push_back(decode(params, z));
        trace.active.push_back(positive(z));
        trace.z.push_back(std::move(z));
    }
    return trace;
}

double loss(const ForwardTrace& trace, const SaeConfig& config, const Matrix& x) {
    if (trace.mode != Mode::train) throw InvalidArgument("loss requires a train-mode trace");
    if (trace.z.size() != config.levels()) throw InvalidArgument("trace does not match the config's level count");
    const double batch = static_cast<double>(x.rows());
    double total = 0.0;
    for (std::size_t level = 0; level < trace.recon.size(); ++level) {
        const double weight = config.variant == Variant::matryoshka ? config.alpha[level] : 1.0;
        total += weight * (x - trace.recon[level]).squaredNorm() / batch;
    }
    if (config.variant == Variant::relu) total += config.lambda * trace.z.front().lpNorm<1>() / batch;
    return total;
}

SaeGradients backward(const ForwardTrace& trace, const SaeConfig& config, const SaeParams& params, const Matrix& x) {
    if (trace.mode != Mode::train) throw InvalidArgument("backward requires a train-mode trace");
    const double batch = static_cast<double>(x.rows());
    const Index d = params.d();

    SaeGradients grads = SaeParams::zeros(params.n(), d);
    Matrix d_preact = Matrix::Zero(x.rows(), d);

    for (std::size_t level = 0; level < trace.z.size(); ++level) {
        const double weight = config.variant == Variant::matryoshka ? config.alpha[level] : 1.0;
        const Matrix d_recon = (2.0 * weight / batch) * (trace.recon[level] - x);
        grads.w_dec.noalias() += d_recon.transpose() * trace.z[level];
        grads.b_pre.noalias() += d_recon.colwise().sum().transpose();

        Matrix d_z = d_recon * params.w_dec;
        if (config.variant == Variant::relu && config.lambda > 0.0) {
            // z >= 0, so the L1 subgradient is lambda on the support.
            d_z += (config.lambda / batch) * trace.active[level].cast<double>();
        }
        if (config.softcap) {
            // z = c * tanh(u / c) with u the masked ReLU output; dz/du = 1 - (z / c)^2.
            const double cap = *config.softcap;
            d_z.array() *= 1.0 - (trace.z[level].array() / cap).square();
        }
        d_preact += trace.active[level].select(d_z, Matrix::Zero(x.rows(), d));
    }

    const Matrix centered = x.rowwise() - params.b_pre.transpose();
    grads.w_enc.noalias() = d_preact.transpose() * centered;
    grads.b_enc = d_preact.colwise().sum().transpose();
    grads.b_pre.noalias() -= (d_preact * params.w_enc).colwise().sum().transpose();
    return grads;
}

SaeGradients project_decoder_gradient(const SaeParams& params, SaeGradients grads) {
    for (Index c = 0; c < params.w_dec.cols(); ++c) {
        const auto u = params.w_dec.col(c);
        grads.w_dec.col(c) -= grads.w_dec.col(c).dot(u) * u;
    }
    return grads;
}

} // namespace msae
