#include "msae/metrics.hpp"

#include "msae/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace msae {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionMismatch(std::string(what) + ": shapes differ");
    if (a.rows() == 0) throw InvalidArgument(std::string(what) + ": empty batch");
}

double row_cosine(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double population_std(const Vector& v) {
    if (v.size() == 0) return 0.0;
    return std::sqrt((v.array() - v.mean()).square().mean());
}

Vector row_zero_fraction(const Matrix& z) {
    Vector out(z.rows());
    for (Index r = 0; r < z.rows(); ++r)
        out[r] = static_cast<double>((z.row(r).array() == 0.0).count()) / static_cast<double>(z.cols());
    return out;
}

Vector row_cosines(const Matrix& x, const Matrix& x_hat) {
    Vector out(x.rows());
    for (Index r = 0; r < x.rows(); ++r) out[r] = row_cosine(x.row(r), x_hat.row(r));
    return out;
}

double total_variance(const Matrix& x) {
    const RowVector mean = x.colwise().mean();
    return (x.rowwise() - mean).rowwise().squaredNorm().mean();
}

// Inner-product kernel with each entry minus its row mean.
Matrix row_centered_kernel(const Matrix& feats) {
    Matrix kernel = feats * feats.transpose();
    const Vector row_mean = kernel.rowwise().mean();
    kernel.colwise() -= row_mean;
    return kernel;
}

// kNN by raw kernel value (self excluded), ties to the lowest index.
Mask knn_mask(const Matrix& feats, int k) {
    Matrix kernel = feats * feats.transpose();
    kernel.diagonal().setConstant(-std::numeric_limits<double>::infinity());
    return row_topk_mask(kernel, k);
}

double masked_alignment(const Mask& mask, const Matrix& a, const Matrix& b) {
    double sum = 0.0;
    for (Index i = 0; i < mask.rows(); ++i)
        for (Index j = 0; j < mask.cols(); ++j)
            if (mask(i, j)) sum += a(i, j) * b(i, j);
    const double denom = static_cast<double>(mask.rows() - 1);
    return sum / (denom * denom);
}

std::vector<double> log_softmax(const Eigen::Ref<const RowVector>& logits) {
    const double mx = logits.maxCoeff();
    double sum = 0.0;
    for (Index c = 0; c < logits.size(); ++c) sum += std::exp(logits[c] - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(static_cast<std::size_t>(logits.size()));
    for (Index c = 0; c < logits.size(); ++c) out[static_cast<std::size_t>(c)] = logits[c] - lse;
    return out;
}

int argmax(const Eigen::Ref<const RowVector>& row) {
    Index best = 0;
    for (Index c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
    return static_cast<int>(best);
}

} // namespace

double l0_sparsity(const Matrix& z) {
    if (z.rows() == 0 || z.cols() == 0) throw InvalidArgument("l0_sparsity: empty batch");
    return row_zero_fraction(z).mean();
}

double fvu(const Matrix& x, const Matrix& x_hat) {
    check_same_shape(x, x_hat, "fvu");
    const double variance = total_variance(x);
    if (!(variance > 0.0)) throw DegenerateError("fvu: inputs have zero variance");
    return (x - x_hat).rowwise().squaredNorm().mean() / variance;
}

double cosine_fidelity(const Matrix& x, const Matrix& x_hat) {
    check_same_shape(x, x_hat, "cosine_fidelity");
    return row_cosines(x, x_hat).mean();
}

double decoder_orthogonality(const Matrix& w_dec) {
    const Index d = w_dec.cols();
    if (d < 2) throw InvalidArgument("decoder_orthogonality needs at least two columns");
    Matrix unit = w_dec;
    for (Index c = 0; c < d; ++c) {
        const double norm = unit.col(c).norm();
        if (norm > 0.0) unit.col(c) /= norm;
    }
    const Matrix gram = unit.transpose() * unit;
    double sum = 0.0;
    for (Index i = 1; i < d; ++i)
        for (Index j = 0; j < i; ++j) sum += gram(i, j);
    return sum / (static_cast<double>(d) * static_cast<double>(d - 1) / 2.0);
}

void DeadNeuronTracker::observe(const Matrix& z) {
    if (z.cols() != static_cast<Index>(fired_.size())) throw DimensionMismatch("dead-neuron stream width changed");
    for (Index c = 0; c < z.cols(); ++c)
        if (!fired_[static_cast<std::size_t>(c)] && (z.col(c).array() > 0.0).any()) fired_[static_cast<std::size_t>(c)] = true;
}

int DeadNeuronTracker::count() const { return static_cast<int>(std::count(fired_.begin(), fired_.end(), false)); }

int dead_neurons(std::span<const Matrix> stream) {
    if (stream.empty()) throw InvalidArgument("dead_neurons: empty stream");
    DeadNeuronTracker tracker(stream.front().cols());
    for (const auto& z : stream) tracker.observe(z);
    return tracker.count();
}

double cknna(const Matrix& phi, const Matrix& psi, int k) {
    if (phi.rows() != psi.rows()) throw DimensionMismatch("cknna: representations must pair the same rows");
    const Index s = phi.rows();
    if (k < 1 || static_cast<Index>(k) >= s) throw InvalidArgument("cknna: need 1 <= k < sample count");

    const Matrix k_centered = row_centered_kernel(phi);
    const Matrix l_centered = row_centered_kernel(psi);
    const Mask knn_phi = knn_mask(phi, k);
    const Mask knn_psi = knn_mask(psi, k);
    const Mask mutual = knn_phi.array() && knn_psi.array();

    const double align_kl = masked_alignment(mutual, k_centered, l_centered);
    const double align_kk = masked_alignment(knn_phi, k_centered, k_centered);
    const double align_ll = masked_alignment(knn_psi, l_centered, l_centered);
    if (!(align_kk > 0.0) || !(align_ll > 0.0)) throw DegenerateError("cknna: zero self-alignment");
    return align_kl / std::sqrt(align_kk * align_ll);
}

std::vector<Index> sample_rows(Index rows, Index count, std::uint64_t seed) {
    std::vector<Index> idx(static_cast<std::size_t>(rows));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (count >= rows) return idx;
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < count; ++i) {
        std::uniform_int_distribution<Index> pick(i, rows - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    return idx;
}

Matrix ProbeModel::logits(const Matrix& x) const {
    if (x.cols() != weights.cols()) throw DimensionMismatch("probe input dimension mismatch");
    return (x * weights.transpose()).rowwise() + bias.transpose();
}

std::vector<int> ProbeModel::predict(const Matrix& x) const {
    const Matrix l = logits(x);
    std::vector<int> out(static_cast<std::size_t>(l.rows()));
    for (Index r = 0; r < l.rows(); ++r) out[static_cast<std::size_t>(r)] = argmax(l.row(r));
    return out;
}

Matrix ProbeModel::probabilities(const Matrix& x) const {
    const Matrix l = logits(x);
    Matrix p(l.rows(), l.cols());
    for (Index r = 0; r < l.rows(); ++r) {
        const auto lp = log_softmax(l.row(r));
        for (Index c = 0; c < l.cols(); ++c) p(r, c) = std::exp(lp[static_cast<std::size_t>(c)]);
    }
    return p;
}

ProbeModel ProbeModel::binary(const Vector& w, double b) {
    ProbeModel probe;
    probe.weights = Matrix::Zero(2, w.size());
    probe.weights.row(1) = w.transpose();
    probe.bias = Vector::Zero(2);
    probe.bias[1] = b;
    return probe;
}

void ProbeModel::validate(Index n) const {
    if (weights.rows() < 2 || weights.rows() != bias.size()) throw InvalidArgument("probe needs at least two classes");
    if (weights.cols() != n) throw DimensionMismatch("probe dimension does not match the embeddings");
    if (!weights.allFinite() || !bias.allFinite()) throw NumericError("probe has non-finite weights");
}

ProbeModel train_probe(const Matrix& x, std::span<const std::uint32_t> labels, const ProbeConfig& config) {
    if (x.rows() == 0 || static_cast<std::size_t>(x.rows()) != labels.size())
        throw InvalidArgument("train_probe: need one label per row");
    if (!x.allFinite()) throw NumericError("train_probe: non-finite inputs");
    const auto [lo, hi] = std::minmax_element(labels.begin(), labels.end());
    if (*lo == *hi) throw InvalidArgument("train_probe: data has a single class");
    if (config.epochs < 1 || config.batch_size < 1 || !(config.lr > 0.0))
        throw InvalidArgument("train_probe: invalid optimizer settings");

    const Index classes = static_cast<Index>(*hi) + 1;
    const Index n = x.cols();
    ProbeModel probe{Matrix::Zero(classes, n), Vector::Zero(classes)};
    Matrix m_w = Matrix::Zero(classes, n), v_w = Matrix::Zero(classes, n);
    Vector m_b = Vector::Zero(classes), v_b = Vector::Zero(classes);
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    std::mt19937_64 rng(config.seed);
    std::vector<Index> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), Index{0});

    double lr = config.lr;
    double best = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;
    std::int64_t step = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
            const Index b = static_cast<Index>(end - begin);
            Matrix xb(b, n);
            for (Index i = 0; i < b; ++i) xb.row(i) = x.row(order[begin + static_cast<std::size_t>(i)]);

            // Softmax cross-entropy gradient: (p - onehot) / b.
            Matrix grad_logits = probe.probabilities(xb);
            for (Index i = 0; i < b; ++i) {
                const auto label = static_cast<Index>(labels[static_cast<std::size_t>(order[begin + static_cast<std::size_t>(i)])]);
                epoch_loss -= std::log(std::max(grad_logits(i, label), 1e-300));
                grad_logits(i, label) -= 1.0;
            }
            grad_logits /= static_cast<double>(b);
            const Matrix g_w = grad_logits.transpose() * xb;
            const Vector g_b = grad_logits.colwise().sum().transpose();

            ++step;
            const double bias1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bias2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            m_w = beta1 * m_w + (1.0 - beta1) * g_w;
            v_w = beta2 * v_w.array() + (1.0 - beta2) * g_w.array().square();
            m_b = beta1 * m_b + (1.0 - beta1) * g_b;
            v_b = beta2 * v_b.array() + (1.0 - beta2) * g_b.array().square();
            probe.weights.array() -= lr * ((m_w.array() / bias1) / ((v_w.array() / bias2).sqrt() + eps) +
                                           config.weight_decay * probe.weights.array());
            probe.bias.array() -= lr * ((m_b.array() / bias1) / ((v_b.array() / bias2).sqrt() + eps) +
                                        config.weight_decay * probe.bias.array());
        }
        epoch_loss /= static_cast<double>(x.rows());
        if (epoch_loss < best - config.min_delta) {
            best = epoch_loss;
            bad_epochs = 0;
        } else if (++bad_epochs >= config.patience) {
            lr *= config.factor;
            bad_epochs = 0;
        }
    }
    return probe;
}

LpMetrics lp_metrics(const ProbeModel& probe, const Matrix& x, const Matrix& x_hat) {
    check_same_shape(x, x_hat, "lp_metrics");
    const Matrix lx = probe.logits(x);
    const Matrix lh = probe.logits(x_hat);
    double kl = 0.0;
    Index agree = 0;
    for (Index r = 0; r < x.rows(); ++r) {
        const auto lp = log_softmax(lx.row(r));
        const auto lq = log_softmax(lh.row(r));
        double row_kl = 0.0;
        for (std::size_t c = 0; c < lp.size(); ++c) row_kl += std::exp(lp[c]) * (lp[c] - lq[c]);
        kl += std::max(row_kl, 0.0);
        if (argmax(lx.row(r)) == argmax(lh.row(r))) ++agree;
    }
    const double rows = static_cast<double>(x.rows());
    return {kl / rows, static_cast<double>(agree) / rows};
}

Matrix keep_top_activations(const Matrix& z, int k) {
    if (k < 0) throw InvalidArgument("keep_top_activations: k must be non-negative");
    if (k == 0) return Matrix::Zero(z.rows(), z.cols());
    if (k >= z.cols()) return z;
    const Mask mask = row_topk_mask(z, k);
    return mask.select(z, Matrix::Zero(z.rows(), z.cols()));
}

std::vector<RecoveryPoint> progressive_recovery(const SaeParams& params, const SaeConfig& config, const Matrix& x,
                                                std::span<const int> k_grid, const RecoveryOptions& options) {
    const Matrix z = encode(params, config, x);
    const auto rows = sample_rows(x.rows(), options.cknna_samples, options.seed);
    Matrix phi(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) phi.row(static_cast<Index>(i)) = x.row(rows[i]);

    std::vector<RecoveryPoint> curve;
    for (int k : k_grid) {
        const Matrix zk = keep_top_activations(z, std::min<Index>(k, z.cols()));
        const Matrix x_hat = decode(params, zk);
        RecoveryPoint point{k, fvu(x, x_hat), cosine_fidelity(x, x_hat), std::nullopt};
        if (options.with_cknna) {
            Matrix psi(phi.rows(), zk.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) psi.row(static_cast<Index>(i)) = zk.row(rows[i]);
            try {
                point.cknna = cknna(phi, psi, options.cknna_k);
            } catch (const DegenerateError&) {
            }
        }
        curve.push_back(point);
    }
    return curve;
}

ActivationHistogram::ActivationHistogram(HistogramConfig config) : config_(config) {
    if (config_.bins < 1 || !(config_.log10_max > config_.log10_min))
        throw InvalidArgument("histogram needs at least one bin and an increasing range");
    counts_.assign(static_cast<std::size_t>(config_.bins), 0);
    max_counts_.assign(static_cast<std::size_t>(config_.bins), 0);
}

std::vector<double> ActivationHistogram::edges() const {
    std::vector<double> out(static_cast<std::size_t>(config_.bins) + 1);
    for (int i = 0; i <= config_.bins; ++i)
        out[static_cast<std::size_t>(i)] =
            config_.log10_min + (config_.log10_max - config_.log10_min) * i / config_.bins;
    return out;
}

int ActivationHistogram::bin_of(double value) const {
    const double pos = (std::log10(value) - config_.log10_min) * config_.bins / (config_.log10_max - config_.log10_min);
    const double clamped = std::clamp(std::floor(pos), 0.0, static_cast<double>(config_.bins - 1));
    return static_cast<int>(clamped);
}

void ActivationHistogram::observe(const Matrix& z, std::int64_t first_sample) {
    for (Index r = 0; r < z.rows(); ++r) {
        double row_max = 0.0;
        for (Index c = 0; c < z.cols(); ++c) {
            const double v = z(r, c);
            if (!(v > 0.0)) continue;
            ++counts_[static_cast<std::size_t>(bin_of(v))];
            ++nonzero_;
            row_max = std::max(row_max, v);
            if (v > config_.high_threshold) high_.push_back({first_sample + r, c, v});
        }
        if (row_max > 0.0) ++max_counts_[static_cast<std::size_t>(bin_of(row_max))];
    }
}

Evaluation evaluate(const Checkpoint& checkpoint, const EmbeddingSet& set, const EvalOptions& options) {
    set.validate();
    const NormStats& stats = checkpoint.stats_for(set.modality);
    const auto& params = checkpoint.params;

    Evaluation ev;
    ev.x = normalize(set.data, stats);
    ev.z = encode(params, checkpoint.config, ev.x);
    if (options.force_topk) ev.z = keep_top_activations(ev.z, *options.force_topk);
    ev.x_hat = decode(params, ev.z);

    MetricsReport& rep = ev.report;
    const Vector zero_frac = row_zero_fraction(ev.z);
    rep.l0 = zero_frac.mean();
    rep.l0_std = population_std(zero_frac);

    const double variance = total_variance(ev.x);
    if (!(variance > 0.0)) throw DegenerateError("evaluate: inputs have zero variance");
    const Vector per_row_fvu = (ev.x - ev.x_hat).rowwise().squaredNorm() / variance;
    rep.fvu = per_row_fvu.mean();
    rep.fvu_std = population_std(per_row_fvu);
    rep.evr = 1.0 - rep.fvu;

    const Vector cos = row_cosines(ev.x, ev.x_hat);
    rep.cs = cos.mean();
    rep.cs_std = population_std(cos);

    const auto rows = sample_rows(ev.x.rows(), options.cknna_samples, options.seed);
    Matrix phi(static_cast<Index>(rows.size()), ev.x.cols());
    Matrix psi(static_cast<Index>(rows.size()), ev.z.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        phi.row(static_cast<Index>(i)) = ev.x.row(rows[i]);
        psi.row(static_cast<Index>(i)) = ev.z.row(rows[i]);
    }
    rep.cknna = cknna(phi, psi, options.cknna_k);
    rep.do_score = decoder_orthogonality(params.w_dec);

    DeadNeuronTracker tracker(ev.z.cols());
    tracker.observe(ev.z);
    rep.ndn = tracker.count();

    std::optional<ProbeModel> probe = options.probe;
    if (!probe && set.has_class_labels()) probe = train_probe(set.data, set.class_labels, options.probe_config);
    if (probe) {
        probe->validate(set.cols());
        const LpMetrics lp = lp_metrics(*probe, set.data, denormalize(ev.x_hat, stats));
        rep.lp_kl = lp.kl;
        rep.lp_acc = lp.acc;
    }
    return ev;
}

} // namespace msae
