#include "msae/embedset.hpp"

#include "binary_io.hpp"
#include "msae/error.hpp"
#include "msae/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace msae {

namespace {

constexpr char kEmbMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::uint32_t kEmbVersion = 1;
constexpr std::uint8_t kFlagClassLabels = 0x1;

void check_stats_dim(Index cols, const NormStats& stats) {
    if (stats.mean.size() != cols)
        throw DimensionMismatch("normalization stats have dimension " + std::to_string(stats.mean.size()) +
                                " but data has " + std::to_string(cols) + " columns");
}

} // namespace

std::string_view to_string(Modality modality) {
    switch (modality) {
    case Modality::image: return "image";
    case Modality::text: return "text";
    case Modality::synthetic: return "synthetic";
    }
    return "unknown";
}

Modality modality_from_string(std::string_view name) {
    if (name == "image") return Modality::image;
    if (name == "text") return Modality::text;
    if (name == "synthetic") return Modality::synthetic;
    throw InvalidArgument("unknown modality '" + std::string(name) + "'");
}

std::string EmbeddingSet::id_of(Index i) const {
    if (!id_labels.empty()) return id_labels.at(static_cast<std::size_t>(i));
    return std::to_string(i);
}

void EmbeddingSet::validate() const {
    if (data.rows() < 1 || data.cols() < 1) throw InvalidArgument("embedding set must have at least one row and column");
    if (!data.allFinite()) throw FormatError(FormatError::Code::non_finite, "embedding set contains non-finite values");
    const auto m = static_cast<std::size_t>(data.rows());
    if (!id_labels.empty() && id_labels.size() != m)
        throw InvalidArgument("id_labels has " + std::to_string(id_labels.size()) + " entries for " + std::to_string(m) + " rows");
    if (!class_labels.empty() && class_labels.size() != m)
        throw InvalidArgument("class_labels has " + std::to_string(class_labels.size()) + " entries for " + std::to_string(m) + " rows");
}

void SyntheticSpec::validate() const {
    if (n < 2) throw InvalidArgument("synthetic spec: n must be >= 2");
    if (d_true < 1) throw InvalidArgument("synthetic spec: d_true must be >= 1");
    if (s < 1 || s > d_true) throw InvalidArgument("synthetic spec: need 1 <= s <= d_true");
    if (m < 1) throw InvalidArgument("synthetic spec: m must be >= 1");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw InvalidArgument("synthetic spec: noise_sigma must be >= 0");
}

NormStats fit_norm_stats(const EmbeddingSet& set) {
    set.validate();
    if (set.rows() < 2) throw InvalidArgument("fit_norm_stats needs at least two rows");

    NormStats stats;
    stats.modality = set.modality;
    stats.mean = set.data.colwise().mean().transpose();
    const Matrix centered = set.data.rowwise() - stats.mean.transpose();
    const double mean_norm = centered.rowwise().norm().mean();
    if (mean_norm < kDegenerateScaleThreshold)
        throw DegenerateError("degenerate scale: every row equals the mean");
    stats.scale = std::sqrt(static_cast<double>(set.cols())) / mean_norm;
    return stats;
}

Matrix normalize(const Matrix& rows, const NormStats& stats) {
    check_stats_dim(rows.cols(), stats);
    return (rows.rowwise() - stats.mean.transpose()) * stats.scale;
}

Matrix denormalize(const Matrix& rows, const NormStats& stats) {
    check_stats_dim(rows.cols(), stats);
    return (rows / stats.scale).rowwise() + stats.mean.transpose();
}

EmbeddingSet normalize(const EmbeddingSet& set, const NormStats& stats) {
    EmbeddingSet out = set;
    out.data = normalize(set.data, stats);
    return out;
}

EmbeddingSet denormalize(const EmbeddingSet& set, const NormStats& stats) {
    EmbeddingSet out = set;
    out.data = denormalize(set.data, stats);
    return out;
}

std::pair<EmbeddingSet, GroundTruth> synthesize(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> coeff(0.5, 2.0);

    GroundTruth truth;
    truth.atoms.resize(spec.d_true, spec.n);
    for (int a = 0; a < spec.d_true; ++a) {
        double norm = 0.0;
        do {
            for (int j = 0; j < spec.n; ++j) truth.atoms(a, j) = gauss(rng);
            norm = truth.atoms.row(a).norm();
        } while (norm < 1e-6);
        truth.atoms.row(a) /= norm;
    }

    truth.codes = Matrix::Zero(spec.m, spec.d_true);
    std::vector<int> pool(static_cast<std::size_t>(spec.d_true));
    for (std::int64_t r = 0; r < spec.m; ++r) {
        std::iota(pool.begin(), pool.end(), 0);
        // Partial Fisher-Yates: the first s slots become a uniform s-subset.
        for (int i = 0; i < spec.s; ++i) {
            std::uniform_int_distribution<int> pick(i, spec.d_true - 1);
            std::swap(pool[i], pool[pick(rng)]);
            truth.codes(r, pool[i]) = coeff(rng);
        }
    }

    EmbeddingSet set;
    set.modality = Modality::synthetic;
    set.data = truth.codes * truth.atoms;
    if (spec.noise_sigma > 0.0) {
        for (Index r = 0; r < set.data.rows(); ++r)
            for (Index c = 0; c < set.data.cols(); ++c) set.data(r, c) += spec.noise_sigma * gauss(rng);
    }
    return {std::move(set), std::move(truth)};
}

void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
    set.validate();
    detail::ByteWriter w;
    w.bytes(kEmbMagic);
    w.u32(kEmbVersion);
    w.u32(static_cast<std::uint32_t>(set.cols()));
    w.u64(static_cast<std::uint64_t>(set.rows()));
    w.u8(static_cast<std::uint8_t>(set.modality));
    w.u8(set.has_class_labels() ? kFlagClassLabels : 0);
    for (Index r = 0; r < set.rows(); ++r)
        for (Index c = 0; c < set.cols(); ++c) {
            const float v = static_cast<float>(set.data(r, c));
            if (!std::isfinite(v))
                throw FormatError(FormatError::Code::non_finite, "value overflows float32 at row " + std::to_string(r));
            w.f32(v);
        }
    for (std::uint32_t label : set.class_labels) w.u32(label);
    w.write_file(path);
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
    auto r = detail::ByteReader::from_file(path);
    if (r.size() < 4 || r.bytes(4, "magic") != std::string(kEmbMagic, 4))
        throw FormatError(FormatError::Code::bad_magic, "not an EMB1 file: " + path.string());
    const auto version = r.u32("version");
    if (version != kEmbVersion)
        throw FormatError(FormatError::Code::bad_version, "unsupported EMB1 version " + std::to_string(version));
    const auto n = r.u32("n");
    const auto m = r.u64("m");
    const auto modality_code = r.u8("modality");
    const auto flags = r.u8("flags");
    if (n == 0 || m == 0) throw FormatError(FormatError::Code::bad_header, "EMB1 header declares an empty matrix");
    if (modality_code > 2)
        throw FormatError(FormatError::Code::bad_header, "unknown modality code " + std::to_string(modality_code));
    if ((flags & ~kFlagClassLabels) != 0) throw FormatError(FormatError::Code::bad_header, "unknown EMB1 flags");

    const bool has_labels = (flags & kFlagClassLabels) != 0;
    const std::uint64_t payload = m * n * 4 + (has_labels ? m * 4 : 0);
    if (m > (std::uint64_t(1) << 40) || r.remaining() < payload)
        throw FormatError(FormatError::Code::truncated,
                          "EMB1 payload truncated: header declares " + std::to_string(m) + " rows");
    if (r.remaining() > payload)
        throw FormatError(FormatError::Code::length_mismatch, "EMB1 file has trailing bytes beyond the declared payload");

    EmbeddingSet set;
    set.modality = static_cast<Modality>(modality_code);
    set.data.resize(static_cast<Index>(m), static_cast<Index>(n));
    for (Index i = 0; i < set.data.rows(); ++i)
        for (Index j = 0; j < set.data.cols(); ++j) {
            const float v = r.f32("payload");
            if (!std::isfinite(v))
                throw FormatError(FormatError::Code::non_finite, "non-finite value at row " + std::to_string(i));
            set.data(i, j) = v;
        }
    if (has_labels) {
        set.class_labels.resize(static_cast<std::size_t>(m));
        for (auto& label : set.class_labels) label = r.u32("class labels");
    }
    return set;
}

std::filesystem::path stats_sidecar_path(const std::filesystem::path& embeddings) {
    auto out = embeddings;
    out.replace_extension(".stats.json");
    return out;
}

void to_json(nlohmann::json& j, const NormStats& stats) {
    j = nlohmann::json{{"modality", std::string(to_string(stats.modality))},
                       {"mean", std::vector<double>(stats.mean.data(), stats.mean.data() + stats.mean.size())},
                       {"scale", stats.scale}};
}

void from_json(const nlohmann::json& j, NormStats& stats) {
    stats.modality = modality_from_string(j.at("modality").get<std::string>());
    const auto mean = j.at("mean").get<std::vector<double>>();
    stats.mean = Eigen::Map<const Vector>(mean.data(), static_cast<Index>(mean.size()));
    stats.scale = j.at("scale").get<double>();
    if (!(stats.scale > 0.0) || !std::isfinite(stats.scale) || !stats.mean.allFinite())
        throw FormatError(FormatError::Code::validation, "normalization stats must have finite mean and positive scale");
}

NormStats load_norm_stats(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatError::Code::io, "cannot open: " + path.string());
    try {
        return nlohmann::json::parse(in).get<NormStats>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Code::bad_header, "malformed stats file " + path.string() + ": " + e.what());
    }
}

void save_norm_stats(const NormStats& stats, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError(FormatError::Code::io, "cannot open for writing: " + path.string());
    out << nlohmann::json(stats).dump(2) << '\n';
}

} // namespace msae
