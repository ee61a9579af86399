#include "msae/trainer.hpp"

#include "binary_io.hpp"
#include "msae/error.hpp"
#include "msae/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace msae {

namespace {

constexpr char kSaeMagic[4] = {'S', 'A', 'E', '1'};
constexpr std::uint32_t kSaeVersion = 1;
constexpr double kDecoderNormTolerance = 1e-6;

template <typename Fn>
void for_each_tensor(SaeParams& a, const SaeParams& b, Fn&& fn) {
    fn(a.w_enc.array(), b.w_enc.array());
    fn(a.b_enc.array(), b.b_enc.array());
    fn(a.w_dec.array(), b.w_dec.array());
    fn(a.b_pre.array(), b.b_pre.array());
}

Matrix gather_rows(const Matrix& data, std::span<const Index> rows) {
    Matrix out(static_cast<Index>(rows.size()), data.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = data.row(rows[i]);
    return out;
}

void write_matrix(detail::ByteWriter& w, const Matrix& m) {
    for (Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
}

void write_vector(detail::ByteWriter& w, const Vector& v) {
    for (Index i = 0; i < v.size(); ++i) w.f32(static_cast<float>(v[i]));
}

void read_into(detail::ByteReader& r, double* out, Index count, const char* what) {
    for (Index i = 0; i < count; ++i) {
        const float v = r.f32(what);
        if (!std::isfinite(v)) throw FormatError(FormatError::Code::non_finite, std::string("non-finite value in ") + what);
        out[i] = v;
    }
}

} // namespace

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be non-negative");
    if (batch_size < 1) throw InvalidArgument("batch size must be positive");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (!(grad_clip > 0.0)) throw InvalidArgument("gradient clip must be positive");
    if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0) || !(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0))
        throw InvalidArgument("AdamW betas must lie in [0, 1)");
    if (!(adamw.eps > 0.0)) throw InvalidArgument("AdamW eps must be positive");
    if (!(adamw.weight_decay >= 0.0)) throw InvalidArgument("weight decay must be non-negative");
}

double TrainConfig::default_lr(Variant variant) {
    switch (variant) {
    case Variant::relu: return 5e-5;
    case Variant::topk:
    case Variant::batch_topk: return 5e-4;
    case Variant::matryoshka: return 1e-4;
    }
    return 1e-4;
}

SaeParams init_params(const SaeConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const double bound = std::sqrt(6.0 / config.d);
    std::uniform_real_distribution<double> uniform(-bound, bound);

    SaeParams params = SaeParams::zeros(config.n, config.d);
    for (Index i = 0; i < params.w_dec.size(); ++i) params.w_dec.data()[i] = uniform(rng);
    for (Index c = 0; c < params.w_dec.cols(); ++c) {
        const double norm = params.w_dec.col(c).norm();
        if (norm > 0.0) params.w_dec.col(c) *= 0.1 / norm;
    }
    params.w_enc = params.w_dec.transpose();
    return params;
}

TrainState TrainState::start(SaeParams params, std::uint64_t seed) {
    TrainState state;
    params.renormalize_decoder();
    state.m1 = SaeParams::zeros(params.n(), params.d());
    state.m2 = SaeParams::zeros(params.n(), params.d());
    state.fire_counts.assign(static_cast<std::size_t>(params.d()), 0);
    state.params = std::move(params);
    state.rng.seed(seed);
    return state;
}

int TrainState::dead_neurons() const {
    return static_cast<int>(std::count(fire_counts.begin(), fire_counts.end(), 0));
}

void TrainState::reset_fire_counts() { std::fill(fire_counts.begin(), fire_counts.end(), 0); }

StepStats train_step(TrainState& state, const Matrix& batch, const SaeConfig& sae, const TrainConfig& train) {
    const ForwardTrace trace = forward(state.params, sae, batch, Mode::train);
    StepStats stats;
    stats.loss = loss(trace, sae, batch);
    if (!std::isfinite(stats.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << state.step << " (batch " << batch.rows() << " rows, max |preact| "
            << trace.preact.cwiseAbs().maxCoeff() << ")";
        throw NumericError(msg.str());
    }

    SaeGradients grads = project_decoder_gradient(state.params, backward(trace, sae, state.params, batch));
    stats.grad_norm = std::sqrt(grads.squared_norm());
    if (stats.grad_norm > train.grad_clip) grads *= train.grad_clip / stats.grad_norm;
    stats.clipped_norm = std::sqrt(grads.squared_norm());

    ++state.step;
    const auto& opt = train.adamw;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(opt.beta1, t);
    const double bias2 = 1.0 - std::pow(opt.beta2, t);

    for_each_tensor(state.m1, grads, [&](auto m, auto g) { m = opt.beta1 * m + (1.0 - opt.beta1) * g; });
    for_each_tensor(state.m2, grads, [&](auto v, auto g) { v = opt.beta2 * v + (1.0 - opt.beta2) * g.square(); });

    SaeParams& p = state.params;
    auto update = [&](auto param, const auto& m, const auto& v) {
        param -= train.lr * ((m / bias1) / ((v / bias2).sqrt() + opt.eps) + opt.weight_decay * param);
    };
    update(p.w_enc.array(), state.m1.w_enc.array(), state.m2.w_enc.array());
    update(p.b_enc.array(), state.m1.b_enc.array(), state.m2.b_enc.array());
    update(p.w_dec.array(), state.m1.w_dec.array(), state.m2.w_dec.array());
    update(p.b_pre.array(), state.m1.b_pre.array(), state.m2.b_pre.array());
    p.renormalize_decoder();

    const Mask& fired = trace.active.back();
    for (Index c = 0; c < fired.cols(); ++c) state.fire_counts[static_cast<std::size_t>(c)] += fired.col(c).count();
    return stats;
}

const NormStats& Checkpoint::stats_for(Modality modality) const {
    const auto it = stats.find(modality);
    if (it == stats.end())
        throw FormatError(FormatError::Code::validation,
                          "checkpoint has no normalization stats for modality '" + std::string(to_string(modality)) + "'");
    return it->second;
}

void Checkpoint::validate() const {
    config.validate();
    if (params.n() != config.n || params.d() != config.d || params.w_enc.rows() != config.d ||
        params.w_enc.cols() != config.n || params.w_dec.rows() != config.n || params.w_dec.cols() != config.d)
        throw FormatError(FormatError::Code::validation, "checkpoint tensor shapes disagree with its config");
    if (!params.all_finite()) throw FormatError(FormatError::Code::non_finite, "checkpoint has non-finite parameters");
    if (params.max_decoder_norm_error() > kDecoderNormTolerance)
        throw FormatError(FormatError::Code::validation, "checkpoint decoder columns are not unit norm");
    for (const auto& [modality, s] : stats) {
        if (s.mean.size() != config.n)
            throw FormatError(FormatError::Code::validation, "normalization stats dimension disagrees with the model");
        if (s.modality != modality) throw FormatError(FormatError::Code::validation, "stats modality tag mismatch");
    }
    if (!stats.contains(provenance.train_modality))
        throw FormatError(FormatError::Code::validation, "checkpoint lacks stats for its training modality");
}

TrainResult train(const EmbeddingSet& dataset, const SaeConfig& sae, const TrainConfig& train,
                  const EpochObserver& observer) {
    sae.validate();
    train.validate();
    dataset.validate();
    if (dataset.cols() != sae.n)
        throw DimensionMismatch("dataset has " + std::to_string(dataset.cols()) + " columns, config expects " +
                                std::to_string(sae.n));

    const NormStats stats = fit_norm_stats(dataset);
    const Matrix x = normalize(dataset.data, stats);

    TrainState state = TrainState::start(init_params(sae, train.seed), train.seed);
    std::vector<Index> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), Index{0});

    TrainResult result;
    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        if (train.shuffle) std::shuffle(order.begin(), order.end(), state.rng);
        state.reset_fire_counts();
        double loss_sum = 0.0;
        int steps = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(train.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(train.batch_size));
            const Matrix batch = gather_rows(x, std::span<const Index>(order).subspan(begin, end - begin));
            loss_sum += train_step(state, batch, sae, train).loss;
            ++steps;
        }
        EpochRecord record{epoch + 1, loss_sum / steps, state.dead_neurons()};
        result.history.push_back(record);
        if (observer) observer(record);
    }

    Checkpoint& ckpt = result.checkpoint;
    ckpt.config = sae;
    ckpt.params = state.params;
    ckpt.params.w_enc = round_to_float(ckpt.params.w_enc);
    ckpt.params.b_enc = round_to_float(ckpt.params.b_enc);
    ckpt.params.w_dec = round_to_float(ckpt.params.w_dec);
    ckpt.params.b_pre = round_to_float(ckpt.params.b_pre);
    NormStats stored = stats;
    stored.mean = round_to_float(stats.mean);
    stored.scale = static_cast<double>(static_cast<float>(stats.scale));
    ckpt.stats.emplace(dataset.modality, std::move(stored));
    ckpt.provenance = {train.seed, train.epochs, result.history.back().mean_loss, dataset.modality};
    return result;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    checkpoint.validate();
    const auto& p = checkpoint.params;
    nlohmann::json header = {
        {"config", checkpoint.config},
        {"provenance", checkpoint.provenance},
        {"tensors",
         nlohmann::json::array({
             {{"name", "w_enc"}, {"shape", {p.w_enc.rows(), p.w_enc.cols()}}},
             {{"name", "b_enc"}, {"shape", {p.b_enc.size()}}},
             {{"name", "w_dec"}, {"shape", {p.w_dec.rows(), p.w_dec.cols()}}},
             {{"name", "b_pre"}, {"shape", {p.b_pre.size()}}},
         })},
    };
    header["stats"] = nlohmann::json::array();
    for (const auto& [modality, s] : checkpoint.stats) header["stats"].push_back(s);

    const std::string text = header.dump();
    detail::ByteWriter w;
    w.bytes(kSaeMagic);
    w.u32(kSaeVersion);
    w.u64(text.size());
    w.bytes(text);
    write_matrix(w, p.w_enc);
    write_vector(w, p.b_enc);
    write_matrix(w, p.w_dec);
    write_vector(w, p.b_pre);
    w.write_file(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    auto r = detail::ByteReader::from_file(path);
    if (r.size() < 4 || r.bytes(4, "magic") != std::string(kSaeMagic, 4))
        throw FormatError(FormatError::Code::bad_magic, "not an SAE1 checkpoint: " + path.string());
    const auto version = r.u32("version");
    if (version != kSaeVersion)
        throw FormatError(FormatError::Code::bad_version, "unsupported SAE1 version " + std::to_string(version));
    const auto header_len = r.u64("header length");
    r.need(header_len, "header");
    const std::string text = r.bytes(header_len, "header");

    Checkpoint ckpt;
    try {
        const auto header = nlohmann::json::parse(text);
        ckpt.config = header.at("config").get<SaeConfig>();
        ckpt.provenance = header.at("provenance").get<Provenance>();
        for (const auto& s : header.at("stats")) {
            auto stats = s.get<NormStats>();
            ckpt.stats.emplace(stats.modality, std::move(stats));
        }
        const auto& tensors = header.at("tensors");
        const std::vector<std::vector<Index>> expected = {
            {ckpt.config.d, ckpt.config.n}, {ckpt.config.d}, {ckpt.config.n, ckpt.config.d}, {ckpt.config.n}};
        if (tensors.size() != expected.size())
            throw FormatError(FormatError::Code::validation, "checkpoint declares an unexpected tensor list");
        for (std::size_t i = 0; i < expected.size(); ++i)
            if (tensors[i].at("shape").get<std::vector<Index>>() != expected[i])
                throw FormatError(FormatError::Code::validation,
                                  "tensor " + tensors[i].at("name").get<std::string>() + " has an inconsistent shape");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Code::bad_header, std::string("malformed checkpoint header: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError(FormatError::Code::validation, std::string("invalid checkpoint config: ") + e.what());
    }

    const Index n = ckpt.config.n;
    const Index d = ckpt.config.d;
    const std::uint64_t payload = 4 * static_cast<std::uint64_t>(2 * n * d + n + d);
    if (r.remaining() < payload) throw FormatError(FormatError::Code::truncated, "checkpoint tensor payload truncated");
    if (r.remaining() > payload)
        throw FormatError(FormatError::Code::length_mismatch, "checkpoint has trailing bytes beyond its tensors");

    ckpt.params = SaeParams::zeros(n, d);
    read_into(r, ckpt.params.w_enc.data(), ckpt.params.w_enc.size(), "w_enc");
    read_into(r, ckpt.params.b_enc.data(), d, "b_enc");
    read_into(r, ckpt.params.w_dec.data(), ckpt.params.w_dec.size(), "w_dec");
    read_into(r, ckpt.params.b_pre.data(), n, "b_pre");
    ckpt.validate();
    return ckpt;
}

} // namespace msae
