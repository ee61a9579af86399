#include "msae/cli.hpp"

#include "msae/apps.hpp"
#include "msae/concepts.hpp"
#include "msae/embedset.hpp"
#include "msae/error.hpp"
#include "msae/metrics.hpp"
#include "msae/serialize.hpp"
#include "msae/service.hpp"
#include "msae/trainer.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <pthread.h>

namespace msae::cli {

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    bool quiet = false;

    std::ostream& log() {
        static std::ostream null(nullptr);
        return quiet ? null : err;
    }
};

void emit(Context& ctx, const Json& result, const std::string& path) {
    const std::string text = result.dump(2) + "\n";
    if (path.empty()) {
        ctx.out << text;
        ctx.out.flush();
        return;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(FormatError::Code::io, "cannot write: " + path);
    f << text;
    if (!f) throw FormatError(FormatError::Code::io, "write failed: " + path);
}

Json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError(FormatError::Code::io, "cannot open: " + path);
    try {
        return Json::parse(f);
    } catch (const Json::parse_error& e) {
        throw FormatError(FormatError::Code::bad_header, "malformed JSON in " + path + ": " + e.what());
    }
}

ProbeModel load_probe(const std::string& path) {
    const Json j = read_json_file(path);
    try {
        return j.get<ProbeModel>();
    } catch (const Json::exception& e) {
        throw FormatError(FormatError::Code::bad_header, "malformed classifier in " + path + ": " + e.what());
    }
}

std::vector<ConceptAssignment> load_assignments(const std::string& path) {
    const Json j = read_json_file(path);
    const Json& list = j.is_object() && j.contains("assignments") ? j.at("assignments") : j;
    try {
        return list.get<std::vector<ConceptAssignment>>();
    } catch (const Json::exception& e) {
        throw FormatError(FormatError::Code::bad_header, "malformed assignments in " + path + ": " + e.what());
    }
}

// Adds stats for the set's modality from an explicit file or the set's sidecar.
void attach_stats(Checkpoint& ckpt, const EmbeddingSet& set, const std::string& embeddings, const std::string& explicit_stats) {
    if (!explicit_stats.empty()) {
        NormStats s = load_norm_stats(explicit_stats);
        if (s.modality != set.modality)
            throw FormatError(FormatError::Code::validation, "stats file modality does not match the embeddings");
        ckpt.stats.insert_or_assign(s.modality, std::move(s));
    } else if (!ckpt.stats.contains(set.modality)) {
        const auto sidecar = stats_sidecar_path(embeddings);
        if (std::filesystem::exists(sidecar)) {
            NormStats s = load_norm_stats(sidecar);
            if (s.modality == set.modality) ckpt.stats.emplace(s.modality, std::move(s));
        }
    }
    ckpt.validate();
    ckpt.stats_for(set.modality);
}

std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> parts;
    std::string part;
    std::istringstream in(text);
    while (std::getline(in, part, sep)) parts.push_back(part);
    return parts;
}

int parse_int(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(text, &used);
        if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    throw InvalidArgument("bad integer '" + text + "' in " + what);
}

double parse_double(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    throw InvalidArgument("bad number '" + text + "' in " + what);
}

std::vector<double> parse_alpha(const std::string& spec, std::size_t levels) {
    if (spec == "uniform") return make_alpha(AlphaScheme::uniform, levels);
    if (spec == "reverse") return make_alpha(AlphaScheme::reverse, levels);
    std::vector<double> alpha;
    for (const auto& part : split(spec, ',')) alpha.push_back(parse_double(part, "--alpha"));
    if (alpha.size() != levels)
        throw InvalidArgument("--alpha lists " + std::to_string(alpha.size()) + " weights for " + std::to_string(levels) + " levels");
    return alpha;
}

// One registered subcommand.
struct Command {
    CLI::App* app = nullptr;
    std::string config;
    std::vector<std::string> required;
    std::function<void(Context&)> run;
};

void add_config_option(Command& c) {
    c.app->add_option("--config", c.config, "JSON object of option values; command-line flags take precedence");
}

// Fills options not given on the command line from the --config JSON object.
void apply_config(const Command& c) {
    if (c.config.empty()) return;
    const Json j = read_json_file(c.config);
    if (!j.is_object()) throw InvalidArgument("--config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
        std::string name = key;
        std::replace(name.begin(), name.end(), '_', '-');
        CLI::Option* opt = c.app->get_option_no_throw("--" + name);
        if (opt == nullptr || name == "config" || name == "help")
            throw InvalidArgument("unknown key '" + key + "' in --config file");
        if (opt->count() > 0) continue;
        auto as_text = [&](const Json& v) -> std::string {
            if (v.is_string()) return v.get<std::string>();
            if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
            if (v.is_number()) return v.dump();
            throw InvalidArgument("config key '" + key + "' must hold scalars");
        };
        try {
            if (value.is_array()) {
                for (const auto& v : value) opt->add_result(as_text(v));
            } else {
                opt->add_result(as_text(value));
            }
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw InvalidArgument("config key '" + key + "': " + e.what());
        }
    }
}

void check_required(const Command& c) {
    for (const auto& name : c.required)
        if (c.app->get_option(name)->count() == 0) throw InvalidArgument(name + " is required");
}

bool given(const CLI::App* app, const std::string& name) { return app->get_option(name)->count() > 0; }

// ---------------------------------------------------------------- synth

struct SynthArgs {
    SyntheticSpec spec;
    std::string out;
    std::string truth;
    int label_atom = -1;
    std::string report;
};

void run_synth(Context& ctx, const SynthArgs& a) {
    auto [set, truth] = synthesize(a.spec);
    if (a.label_atom >= 0) {
        if (a.label_atom >= a.spec.d_true) throw InvalidArgument("--label-atom out of range");
        set.class_labels.resize(static_cast<std::size_t>(set.rows()));
        for (Index r = 0; r < set.rows(); ++r)
            set.class_labels[static_cast<std::size_t>(r)] = truth.codes(r, a.label_atom) > 0.0 ? 1u : 0u;
    }
    save_embeddings(set, a.out);
    if (!a.truth.empty()) {
        EmbeddingSet atoms;
        atoms.data = truth.atoms;
        atoms.modality = Modality::synthetic;
        save_embeddings(atoms, a.truth);
    }
    const double residual = (set.data - truth.codes * truth.atoms).norm() / set.data.norm();
    ctx.log() << "synth: " << set.rows() << " x " << set.cols() << " from " << a.spec.d_true << " atoms, relative noise "
              << residual << "\n";
    emit(ctx,
         {{"command", "synth"},
          {"rows", set.rows()},
          {"dims", set.cols()},
          {"atoms", a.spec.d_true},
          {"active", a.spec.s},
          {"noise", a.spec.noise_sigma},
          {"seed", a.spec.seed},
          {"labels", set.has_class_labels()},
          {"relative_noise", residual}},
         a.report);
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string embeddings;
    std::string arch = "matryoshka";
    int expansion = 8;
    int latents = 0;
    int k = 0;
    std::string k_list;
    std::string alpha = "uniform";
    double lambda = 0.003;
    double softcap = 0.0;
    double lr = 0.0;
    int batch_size = 4096;
    int epochs = 30;
    double grad_clip = 1.0;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    bool no_shuffle = false;
    std::vector<std::string> stats_for;
    std::string out;
    std::string report;
};

SaeConfig build_config(const CLI::App* app, const TrainArgs& a, int n) {
    SaeConfig c;
    c.n = n;
    c.variant = variant_from_string(a.arch);
    if (given(app, "--latents") && given(app, "--expansion"))
        throw InvalidArgument("--latents and --expansion are mutually exclusive");
    if (a.expansion < 1) throw InvalidArgument("--expansion must be >= 1");
    c.d = given(app, "--latents") ? a.latents : n * a.expansion;

    const bool uses_k = c.variant == Variant::topk || c.variant == Variant::batch_topk;
    const bool nested = c.variant == Variant::matryoshka;
    if (given(app, "--k") && !uses_k) throw InvalidArgument("--k applies only to --arch topk or batch_topk");
    if (given(app, "--k-list") && !nested) throw InvalidArgument("--k-list applies only to --arch matryoshka");
    if (given(app, "--alpha") && !nested) throw InvalidArgument("--alpha applies only to --arch matryoshka");
    if (given(app, "--lambda") && c.variant != Variant::relu) throw InvalidArgument("--lambda applies only to --arch relu");

    if (uses_k) {
        if (!given(app, "--k")) throw InvalidArgument("--arch " + a.arch + " requires --k");
        c.k = a.k;
    }
    if (nested) {
        if (!given(app, "--k-list")) throw InvalidArgument("--arch matryoshka requires --k-list");
        c.k_list = parse_k_list(a.k_list, c.d);
        c.alpha = parse_alpha(a.alpha, c.k_list.size());
    }
    if (c.variant == Variant::relu) c.lambda = a.lambda;
    if (given(app, "--softcap")) c.softcap = a.softcap;
    c.validate();
    return c;
}

void run_train(Context& ctx, const CLI::App* app, const TrainArgs& a) {
    const EmbeddingSet set = load_embeddings(a.embeddings);
    const SaeConfig sae = build_config(app, a, static_cast<int>(set.cols()));

    TrainConfig t;
    t.lr = given(app, "--lr") ? a.lr : TrainConfig::default_lr(sae.variant);
    t.batch_size = a.batch_size;
    t.epochs = a.epochs;
    t.grad_clip = a.grad_clip;
    t.adamw.weight_decay = a.weight_decay;
    t.seed = a.seed;
    t.shuffle = !a.no_shuffle;

    std::vector<EmbeddingSet> extra;
    for (const auto& path : a.stats_for) {
        extra.push_back(load_embeddings(path));
        if (extra.back().cols() != set.cols()) throw DimensionMismatch(path + " has a different dimension");
    }

    ctx.log() << "train: " << to_string(sae.variant) << " n=" << sae.n << " d=" << sae.d << " lr=" << t.lr
              << " batch=" << t.batch_size << " epochs=" << t.epochs << "\n"
              << std::setw(6) << "epoch" << std::setw(14) << "loss" << std::setw(8) << "dead" << "\n";
    TrainResult result = train(set, sae, t, [&](const EpochRecord& r) {
        ctx.log() << std::setw(6) << r.epoch << std::setw(14) << std::setprecision(6) << r.mean_loss << std::setw(8)
                  << r.dead_neurons << "\n";
    });

    Checkpoint& ckpt = result.checkpoint;
    for (const auto& other : extra) {
        if (ckpt.stats.contains(other.modality)) continue;
        NormStats s = fit_norm_stats(other);
        s.mean = round_to_float(s.mean);
        s.scale = static_cast<double>(static_cast<float>(s.scale));
        ckpt.stats.emplace(other.modality, std::move(s));
    }
    save_checkpoint(ckpt, a.out);
    save_norm_stats(ckpt.train_stats(), stats_sidecar_path(a.out));

    Json stats = Json::array();
    for (const auto& [m, s] : ckpt.stats) stats.push_back({{"modality", std::string(to_string(m))}, {"scale", s.scale}});
    emit(ctx,
         {{"command", "train"},
          {"config", sae},
          {"train",
           {{"lr", t.lr},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"grad_clip", t.grad_clip},
            {"weight_decay", t.adamw.weight_decay},
            {"seed", t.seed},
            {"shuffle", t.shuffle}}},
          {"history", result.history},
          {"final_loss", ckpt.provenance.final_loss},
          {"dead_neurons", result.history.back().dead_neurons},
          {"stats", std::move(stats)}},
         a.report);
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    std::string model;
    std::string embeddings;
    int cknna_k = kDefaultCknnaK;
    long long cknna_samples = 2000;
    std::uint64_t seed = 0;
    int force_topk = 0;
    std::string probe;
    std::string stats;
    std::string progressive;
    bool histogram = false;
    std::string out;
};

void run_eval(Context& ctx, const CLI::App* app, const EvalArgs& a) {
    Checkpoint ckpt = load_checkpoint(a.model);
    const EmbeddingSet set = load_embeddings(a.embeddings);
    attach_stats(ckpt, set, a.embeddings, a.stats);

    EvalOptions opt;
    opt.cknna_k = a.cknna_k;
    opt.cknna_samples = static_cast<Index>(a.cknna_samples);
    opt.seed = a.seed;
    if (given(app, "--force-topk")) {
        if (a.force_topk < 1 || a.force_topk > ckpt.config.d) throw InvalidArgument("--force-topk must be in [1, d]");
        opt.force_topk = a.force_topk;
    }
    if (!a.probe.empty()) opt.probe = load_probe(a.probe);
    opt.probe_config.seed = a.seed;
    const Evaluation ev = evaluate(ckpt, set, opt);

    Json result = ev.report;
    result["command"] = "eval";
    result["samples"] = set.rows();
    result["modality"] = std::string(to_string(set.modality));
    result["cknna_k"] = a.cknna_k;
    if (opt.force_topk) result["force_topk"] = *opt.force_topk;
    if (!a.progressive.empty()) {
        const std::vector<int> grid = parse_k_list(a.progressive, ckpt.config.d);
        RecoveryOptions ro{a.cknna_k, opt.cknna_samples, a.seed, true};
        result["progressive"] = progressive_recovery(ckpt.params, ckpt.config, ev.x, grid, ro);
    }
    if (a.histogram) {
        ActivationHistogram h;
        h.observe(ev.z, 0);
        result["histogram"] = h;
    }

    const auto& r = ev.report;
    auto& log = ctx.log();
    log << std::fixed << std::setprecision(4) << "eval: " << set.rows() << " samples (" << to_string(set.modality) << ")\n"
        << "  L0    " << r.l0 << " +- " << r.l0_std << "\n"
        << "  FVU   " << r.fvu << " +- " << r.fvu_std << "\n"
        << "  EVR   " << r.evr << "\n"
        << "  CS    " << r.cs << " +- " << r.cs_std << "\n"
        << "  CKNNA " << r.cknna << "\n"
        << "  DO    " << r.do_score << "\n"
        << "  NDN   " << r.ndn << "\n";
    if (r.lp_kl) log << "  LP KL (x1e6) " << *r.lp_kl * 1e6 << "  LP Acc " << *r.lp_acc << "\n";
    log << std::defaultfloat;
    emit(ctx, result, a.out);
}

// ---------------------------------------------------------------- concepts

struct ConceptsArgs {
    std::string model;
    std::string vocab;
    std::string vocab_embeddings;
    double sim_threshold = kDefaultSimThreshold;
    double ratio_threshold = kDefaultRatioThreshold;
    bool valid_only = false;
    std::string embeddings;
    long long top_samples = 0;
    std::string out;
};

void run_concepts(Context& ctx, const ConceptsArgs& a) {
    Checkpoint ckpt = load_checkpoint(a.model);
    const ConceptVocab vocab = load_vocab(a.vocab, a.vocab_embeddings);
    const Matrix prepared = prepare_vocab(vocab, ckpt.train_stats());
    auto validated = validate_assignments(match_concepts(ckpt.params, prepared, vocab.names), a.sim_threshold, a.ratio_threshold);

    std::optional<EmbeddingSet> set;
    if (a.top_samples > 0) {
        if (a.embeddings.empty()) throw InvalidArgument("--top-samples needs --embeddings");
        set = load_embeddings(a.embeddings);
        attach_stats(ckpt, *set, a.embeddings, "");
    }

    Json list = Json::array();
    for (const auto& assignment : validated.assignments) {
        if (a.valid_only && !assignment.valid) continue;
        Json j = assignment;
        if (set && assignment.valid) {
            const TopSamples top = top_activating_samples(ckpt, *set, assignment.neuron, static_cast<Index>(a.top_samples));
            Json samples = Json::array();
            for (const auto& s : top.samples) samples.push_back({{"id", s.id}, {"activation", s.activation}});
            j["top_samples"] = std::move(samples);
        }
        list.push_back(std::move(j));
    }
    const auto& s = validated.summary;
    ctx.log() << "concepts: " << validated.assignments.size() << " neurons, " << vocab.size() << " vocabulary entries\n"
              << "  above threshold " << s.above_threshold << "\n  best vector     " << s.best_vector
              << "\n  above and best  " << s.above_and_best << "\n  ratio           " << s.ratio
              << "\n  all gates       " << s.all << "\n";
    emit(ctx,
         {{"command", "concepts"},
          {"sim_threshold", a.sim_threshold},
          {"ratio_threshold", a.ratio_threshold},
          {"summary", s},
          {"assignments", std::move(list)}},
         a.out);
}

// ---------------------------------------------------------------- search

struct SearchArgs {
    std::string model;
    std::string embeddings;
    std::string query;
    std::string space = "embedding";
    long long top = 10;
    std::string assignments;
    long long explain = 0;
    std::string out;
};

void run_search(Context& ctx, const SearchArgs& a) {
    Checkpoint ckpt = load_checkpoint(a.model);
    const EmbeddingSet set = load_embeddings(a.embeddings);
    attach_stats(ckpt, set, a.embeddings, "");
    const SearchIndex index = build_index(ckpt, set);
    const SearchSpace space = search_space_from_string(a.space);
    const Index row = index.find(a.query);
    const auto hits = search(index, query_from_sample(index, row), space, static_cast<Index>(a.top));

    Json result = {{"command", "search"}, {"query", index.ids[static_cast<std::size_t>(row)]}, {"space", a.space}, {"results", hits}};
    if (a.explain > 0) {
        if (a.assignments.empty()) throw InvalidArgument("--explain needs --assignments");
        const auto assignments = load_assignments(a.assignments);
        const auto other = std::find_if(hits.begin(), hits.end(), [&](const SearchHit& h) { return h.sample != row; });
        if (other != hits.end()) {
            Json e = explain_match(index, assignments, row, other->sample, static_cast<Index>(a.explain));
            e["match"] = other->id;
            result["explanation"] = std::move(e);
        }
    }
    ctx.log() << "search (" << a.space << ") for " << a.query << "\n";
    for (const auto& h : hits) ctx.log() << "  " << std::setw(8) << h.id << "  " << h.score << "\n";
    emit(ctx, result, a.out);
}

// ---------------------------------------------------------------- manipulate

struct ManipulateArgs {
    std::string model;
    std::string embeddings;
    std::string query;
    std::vector<std::string> edits;
    std::string assignments;
    long long top = 8;
    long long search_top = 0;
    std::string space = "embedding";
    std::string out;
};

void run_manipulate(Context& ctx, const ManipulateArgs& a) {
    Checkpoint ckpt = load_checkpoint(a.model);
    const EmbeddingSet set = load_embeddings(a.embeddings);
    attach_stats(ckpt, set, a.embeddings, "");
    const SearchIndex index = build_index(ckpt, set);
    const Index row = index.find(a.query);

    ManipulationRequest req{index.raw.row(row).transpose(), set.modality, {}};
    for (const auto& e : a.edits) {
        const auto parts = split(e, '=');
        if (parts.size() != 2) throw InvalidArgument("--edit expects NEURON=MAGNITUDE, got '" + e + "'");
        req.edits.push_back({parse_int(parts[0], "--edit"), parse_double(parts[1], "--edit")});
    }
    const ManipulationResult r = manipulate(ckpt, req);
    const auto assignments = a.assignments.empty() ? std::vector<ConceptAssignment>{} : load_assignments(a.assignments);

    Json edits = Json::array();
    for (const auto& e : req.edits) edits.push_back({{"neuron", e.neuron}, {"magnitude", e.magnitude}});
    Json result = {{"command", "manipulate"},
                   {"query", index.ids[static_cast<std::size_t>(row)]},
                   {"edits", std::move(edits)},
                   {"displacement", r.displacement},
                   {"distance_to_input", r.distance_to_input},
                   {"edited_vector", vector_to_json(r.edited_raw)},
                   {"top_original", top_named_activations(r.original_activation, assignments, static_cast<Index>(a.top))},
                   {"top_edited", top_named_activations(r.edited_activation, assignments, static_cast<Index>(a.top))}};
    if (a.search_top > 0) {
        const SearchSpace space = search_space_from_string(a.space);
        result["neighbors"] = search(index, {r.edited_raw, r.edited_activation}, space, static_cast<Index>(a.search_top));
    }
    ctx.log() << "manipulate " << a.query << ": displacement " << r.displacement << ", distance to input "
              << r.distance_to_input << "\n";
    emit(ctx, result, a.out);
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
    std::string model;
    std::string embeddings;
    std::string classifier;
    long long neuron = 0;
    std::vector<double> magnitudes;
    std::vector<std::string> samples;
    int target_class = 1;
    bool associate = false;
    std::string out;
};

void run_sweep(Context& ctx, const SweepArgs& a) {
    Checkpoint ckpt = load_checkpoint(a.model);
    const EmbeddingSet set = load_embeddings(a.embeddings);
    attach_stats(ckpt, set, a.embeddings, "");
    const ProbeModel clf = load_probe(a.classifier);
    const SearchIndex index = build_index(ckpt, set);

    std::vector<Index> rows;
    for (const auto& id : a.samples) rows.push_back(index.find(id));
    if (rows.empty())
        for (Index r = 0; r < index.size(); ++r) rows.push_back(r);
    Matrix inputs(static_cast<Index>(rows.size()), set.cols());
    Json ids = Json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        inputs.row(static_cast<Index>(i)) = set.data.row(rows[i]);
        ids.push_back(index.ids[static_cast<std::size_t>(rows[i])]);
    }

    Json result = bias_sweep(ckpt, clf, inputs, set.modality, static_cast<Index>(a.neuron), a.magnitudes, a.target_class);
    result["command"] = "sweep";
    result["samples"] = std::move(ids);
    if (a.associate)
        result["association"] =
            concept_association_stats(ckpt, clf, set, {static_cast<Index>(a.neuron)}, a.target_class).front();

    const auto& curves = result.at("curves");
    const auto plateaus = std::count_if(curves.begin(), curves.end(), [](const Json& c) { return c.at("plateau").get<bool>(); });
    ctx.log() << "sweep neuron " << a.neuron << " over " << a.magnitudes.size() << " magnitudes, " << rows.size()
              << " inputs, " << plateaus << " plateaued\n";
    emit(ctx, result, a.out);
}

// ---------------------------------------------------------------- probe

struct ProbeArgs {
    std::string embeddings;
    ProbeConfig config;
    std::string out;
    std::string report;
};

void run_probe(Context& ctx, const ProbeArgs& a) {
    const EmbeddingSet set = load_embeddings(a.embeddings);
    if (!set.has_class_labels()) throw InvalidArgument(a.embeddings + " carries no class labels");
    const ProbeModel probe = train_probe(set.data, set.class_labels, a.config);
    const auto pred = probe.predict(set.data);
    Index correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == static_cast<int>(set.class_labels[i]);
    const double acc = static_cast<double>(correct) / static_cast<double>(pred.size());

    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw FormatError(FormatError::Code::io, "cannot write: " + a.out);
    f << Json(probe).dump(2) << "\n";
    ctx.log() << "probe: " << probe.classes() << " classes, train accuracy " << acc << "\n";
    emit(ctx, {{"command", "probe"}, {"classes", probe.classes()}, {"train_accuracy", acc}}, a.report);
}

// ---------------------------------------------------------------- serve

struct ServeArgs {
    std::string model;
    std::string embeddings;
    std::string assignments;
    std::string vocab;
    std::string vocab_embeddings;
    std::string classifier;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::vector<std::string> cors;
    int threads = 0;
};

void run_serve(Context& ctx, const ServeArgs& a) {
    auto state = std::make_shared<ServiceState>();
    state->checkpoint = load_checkpoint(a.model);
    const EmbeddingSet set = load_embeddings(a.embeddings);
    attach_stats(state->checkpoint, set, a.embeddings, "");
    state->index = build_index(state->checkpoint, set);
    if (!a.assignments.empty()) {
        state->assignments = load_assignments(a.assignments);
    } else if (!a.vocab.empty()) {
        const ConceptVocab vocab = load_vocab(a.vocab, a.vocab_embeddings);
        const Matrix prepared = prepare_vocab(vocab, state->checkpoint.train_stats());
        state->assignments = validate_assignments(match_concepts(state->checkpoint.params, prepared, vocab.names)).assignments;
    }
    if (!a.classifier.empty()) state->classifier = load_probe(a.classifier);

    // Route SIGINT/SIGTERM to a watcher thread so shutdown happens outside a signal handler.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    Service service(state, {a.host, a.port, a.cors, a.threads});
    const int port = service.bind();
    emit(ctx, {{"command", "serve"}, {"host", a.host}, {"port", port}, {"threads", service_threads(a.threads)}}, "");
    ctx.log() << "serving on http://" << a.host << ":" << port << "\n";

    std::atomic<bool> done{false};
    std::thread watcher([&] {
        const timespec tick{0, 200'000'000};
        while (!done) {
            if (sigtimedwait(&signals, nullptr, &tick) > 0) {
                service.stop();
                return;
            }
        }
    });
    service.run();
    done = true;
    watcher.join();
}

// Builds the parser. Keeps every subcommand's storage alive in `storage`.
struct Parser {
    CLI::App app{"Sparse autoencoder toolkit: train, evaluate and interrogate SAEs over embeddings.", "msae"};
    bool quiet = false;
    SynthArgs synth;
    TrainArgs train;
    EvalArgs eval;
    ConceptsArgs concepts;
    SearchArgs search;
    ManipulateArgs manipulate;
    SweepArgs sweep;
    ProbeArgs probe;
    ServeArgs serve;
    std::vector<Command> commands;

    Parser() {
        app.require_subcommand(1);
        app.fallthrough();
        app.add_flag("--quiet,-q", quiet, "Suppress human-readable output on stderr");
        commands.reserve(9);

        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("synth", "Generate a synthetic sparse-dictionary embedding set");
            c.app->add_option("--n", synth.spec.n, "Embedding dimension")->capture_default_str();
            c.app->add_option("--atoms", synth.spec.d_true, "Number of ground-truth dictionary atoms")->capture_default_str();
            c.app->add_option("--active", synth.spec.s, "Active atoms per sample")->capture_default_str();
            c.app->add_option("--count", synth.spec.m, "Number of samples")->capture_default_str();
            c.app->add_option("--noise", synth.spec.noise_sigma, "Gaussian noise standard deviation")->capture_default_str();
            c.app->add_option("--seed", synth.spec.seed, "Random seed")->capture_default_str();
            c.app->add_option("--out", synth.out, "Output EMB1 file");
            c.app->add_option("--truth", synth.truth, "Also write the ground-truth atoms as an EMB1 file");
            c.app->add_option("--label-atom", synth.label_atom, "Attach class labels: 1 where this atom is active");
            c.app->add_option("--report", synth.report, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--out"};
            c.run = [this](Context& ctx) { run_synth(ctx, synth); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("train", "Train a sparse autoencoder");
            c.app->add_option("--embeddings", train.embeddings, "Training set (EMB1)");
            c.app->add_option("--arch", train.arch, "relu | topk | batch_topk | matryoshka")->capture_default_str();
            c.app->add_option("--expansion", train.expansion, "Latent width as a multiple of the input dimension")->capture_default_str();
            c.app->add_option("--latents", train.latents, "Latent width (exclusive with --expansion)");
            c.app->add_option("--k", train.k, "Active latents per sample (topk, batch_topk)");
            c.app->add_option("--k-list", train.k_list, "Nested k values: 4,8,16 or pow2:4.. (matryoshka)");
            c.app->add_option("--alpha", train.alpha, "Level weights: uniform | reverse | comma list (matryoshka)")->capture_default_str();
            c.app->add_option("--lambda", train.lambda, "L1 penalty (relu)")->capture_default_str();
            c.app->add_option("--softcap", train.softcap, "Soft-cap activations at this value");
            c.app->add_option("--lr", train.lr, "Learning rate (default depends on --arch)");
            c.app->add_option("--batch-size", train.batch_size, "Batch size")->capture_default_str();
            c.app->add_option("--epochs", train.epochs, "Epochs")->capture_default_str();
            c.app->add_option("--grad-clip", train.grad_clip, "Global gradient-norm clip")->capture_default_str();
            c.app->add_option("--weight-decay", train.weight_decay, "AdamW weight decay")->capture_default_str();
            c.app->add_option("--seed", train.seed, "Random seed")->capture_default_str();
            c.app->add_flag("--no-shuffle", train.no_shuffle, "Keep the sample order fixed");
            c.app->add_option("--stats-for", train.stats_for, "Also store normalization stats fitted on this set (other modality)");
            c.app->add_option("--out", train.out, "Output checkpoint (SAE1)");
            c.app->add_option("--report", train.report, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--embeddings", "--out"};
            c.run = [this, sub = c.app](Context& ctx) { run_train(ctx, sub, train); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("eval", "Compute the metric suite for a model on an embedding set");
            c.app->add_option("--model", eval.model, "Checkpoint (SAE1)");
            c.app->add_option("--embeddings", eval.embeddings, "Evaluation set (EMB1)");
            c.app->add_option("--cknna-k", eval.cknna_k, "Neighbors for CKNNA")->capture_default_str();
            c.app->add_option("--cknna-samples", eval.cknna_samples, "Rows subsampled for CKNNA")->capture_default_str();
            c.app->add_option("--seed", eval.seed, "Seed for subsampling and the probe")->capture_default_str();
            c.app->add_option("--force-topk", eval.force_topk, "Keep only the top k activations per sample");
            c.app->add_option("--probe", eval.probe, "Classifier JSON for LP metrics (trained on labels otherwise)");
            c.app->add_option("--stats", eval.stats, "Normalization stats JSON for the set's modality");
            c.app->add_option("--progressive", eval.progressive, "Progressive recovery k grid: 4,8,16 or pow2:1..");
            c.app->add_flag("--histogram", eval.histogram, "Include the activation histogram");
            c.app->add_option("--out", eval.out, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--model", "--embeddings"};
            c.run = [this, sub = c.app](Context& ctx) { run_eval(ctx, sub, eval); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("concepts", "Name latents by matching decoder directions to a vocabulary");
            c.app->add_option("--model", concepts.model, "Checkpoint (SAE1)");
            c.app->add_option("--vocab", concepts.vocab, "TSV of name<TAB>row lines");
            c.app->add_option("--vocab-embeddings", concepts.vocab_embeddings, "EMB1 file the vocabulary rows index");
            c.app->add_option("--sim-threshold", concepts.sim_threshold, "Minimum cosine similarity")->capture_default_str();
            c.app->add_option("--ratio-threshold", concepts.ratio_threshold, "Minimum best/second similarity ratio")->capture_default_str();
            c.app->add_flag("--valid-only", concepts.valid_only, "Only list assignments passing every gate");
            c.app->add_option("--embeddings", concepts.embeddings, "Set used for --top-samples");
            c.app->add_option("--top-samples", concepts.top_samples, "Export the top activating samples per valid neuron")->capture_default_str();
            c.app->add_option("--out", concepts.out, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--model", "--vocab", "--vocab-embeddings"};
            c.run = [this](Context& ctx) { run_concepts(ctx, concepts); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("search", "Nearest neighbors in embedding or activation space");
            c.app->add_option("--model", search.model, "Checkpoint (SAE1)");
            c.app->add_option("--embeddings", search.embeddings, "Indexed set (EMB1)");
            c.app->add_option("--query", search.query, "Query sample id");
            c.app->add_option("--space", search.space, "embedding (cosine) | activation (L1)")->capture_default_str();
            c.app->add_option("--top", search.top, "Results to return")->capture_default_str();
            c.app->add_option("--assignments", search.assignments, "Concept assignments JSON for --explain");
            c.app->add_option("--explain", search.explain, "Shared top-c named concepts with the best match")->capture_default_str();
            c.app->add_option("--out", search.out, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--model", "--embeddings", "--query"};
            c.run = [this](Context& ctx) { run_search(ctx, search); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("manipulate", "Set concept magnitudes and decode back to embedding space");
            c.app->add_option("--model", manipulate.model, "Checkpoint (SAE1)");
            c.app->add_option("--embeddings", manipulate.embeddings, "Indexed set (EMB1)");
            c.app->add_option("--query", manipulate.query, "Sample id to edit");
            c.app->add_option("--edit", manipulate.edits, "NEURON=MAGNITUDE, repeatable");
            c.app->add_option("--assignments", manipulate.assignments, "Concept assignments JSON for naming");
            c.app->add_option("--top", manipulate.top, "Named activations to report")->capture_default_str();
            c.app->add_option("--search-top", manipulate.search_top, "Also search with the edited vector")->capture_default_str();
            c.app->add_option("--space", manipulate.space, "Search space for --search-top")->capture_default_str();
            c.app->add_option("--out", manipulate.out, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--model", "--embeddings", "--query"};
            c.run = [this](Context& ctx) { run_manipulate(ctx, manipulate); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("sweep", "Classifier response across a concept magnitude grid");
            c.app->add_option("--model", sweep.model, "Checkpoint (SAE1)");
            c.app->add_option("--embeddings", sweep.embeddings, "Input set (EMB1)");
            c.app->add_option("--classifier", sweep.classifier, "Classifier JSON");
            c.app->add_option("--neuron", sweep.neuron, "Latent to sweep");
            c.app->add_option("--magnitudes", sweep.magnitudes, "Ascending grid, comma separated")->delimiter(',');
            c.app->add_option("--samples", sweep.samples, "Sample ids (default: all)")->delimiter(',');
            c.app->add_option("--target-class", sweep.target_class, "Class whose probability is reported")->capture_default_str();
            c.app->add_flag("--associate", sweep.associate, "Add activation-vs-prediction association stats");
            c.app->add_option("--out", sweep.out, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--model", "--embeddings", "--classifier", "--neuron", "--magnitudes"};
            c.run = [this](Context& ctx) { run_sweep(ctx, sweep); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("probe", "Train a linear probe on a labeled embedding set");
            c.app->add_option("--embeddings", probe.embeddings, "Labeled set (EMB1)");
            c.app->add_option("--epochs", probe.config.epochs, "Epochs")->capture_default_str();
            c.app->add_option("--batch-size", probe.config.batch_size, "Batch size")->capture_default_str();
            c.app->add_option("--lr", probe.config.lr, "AdamW learning rate")->capture_default_str();
            c.app->add_option("--weight-decay", probe.config.weight_decay, "AdamW weight decay")->capture_default_str();
            c.app->add_option("--seed", probe.config.seed, "Random seed")->capture_default_str();
            c.app->add_option("--out", probe.out, "Output classifier JSON");
            c.app->add_option("--report", probe.report, "Write the JSON result here instead of stdout");
            add_config_option(c);
            c.required = {"--embeddings", "--out"};
            c.run = [this](Context& ctx) { run_probe(ctx, probe); };
        }
        {
            Command& c = commands.emplace_back();
            c.app = app.add_subcommand("serve", "Serve the HTTP API over a model and an indexed set");
            c.app->add_option("--model", serve.model, "Checkpoint (SAE1)");
            c.app->add_option("--embeddings", serve.embeddings, "Indexed set (EMB1)");
            c.app->add_option("--assignments", serve.assignments, "Concept assignments JSON");
            c.app->add_option("--vocab", serve.vocab, "Vocabulary TSV (instead of --assignments)");
            c.app->add_option("--vocab-embeddings", serve.vocab_embeddings, "EMB1 file the vocabulary rows index");
            c.app->add_option("--classifier", serve.classifier, "Default classifier JSON for /sweep");
            c.app->add_option("--host", serve.host, "Bind address")->capture_default_str();
            c.app->add_option("--port", serve.port, "Port (0 picks a free one)")->capture_default_str();
            c.app->add_option("--cors-origin", serve.cors, "Allowed browser origin, repeatable ('*' for any)");
            c.app->add_option("--threads", serve.threads, "Worker threads (capped by MSAE_THREADS)")->capture_default_str();
            add_config_option(c);
            c.required = {"--model", "--embeddings"};
            c.run = [this](Context& ctx) { run_serve(ctx, serve); };
        }
    }
};

int exit_code(ErrorKind kind) { return static_cast<int>(kind); }

} // namespace

std::vector<int> parse_k_list(const std::string& spec, int d) {
    std::vector<int> ks;
    if (spec.rfind("pow2:", 0) == 0) {
        const std::string range = spec.substr(5);
        const auto dots = range.find("..");
        if (dots == std::string::npos) throw InvalidArgument("k-list shorthand must look like pow2:A.. or pow2:A..B");
        const int lo = parse_int(range.substr(0, dots), "k-list");
        const std::string hi_text = range.substr(dots + 2);
        const bool open = hi_text.empty();
        const int hi = open ? d : parse_int(hi_text, "k-list");
        if (lo < 1 || (lo & (lo - 1)) != 0) throw InvalidArgument("k-list start must be a power of two");
        if (hi < lo) throw InvalidArgument("k-list range is empty");
        for (long long k = lo; k <= hi; k *= 2) ks.push_back(static_cast<int>(k));
        if (open && ks.back() != d) ks.push_back(d);
    } else {
        for (const auto& part : split(spec, ',')) ks.push_back(parse_int(part, "k-list"));
    }
    if (ks.empty()) throw InvalidArgument("empty k-list");
    return ks;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    Parser parser;
    Context ctx{out, err};
    try {
        parser.app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return parser.app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }
    ctx.quiet = parser.quiet;
    try {
        for (auto& c : parser.commands) {
            if (!c.app->parsed()) continue;
            apply_config(c);
            check_required(c);
            c.run(ctx);
            return kExitOk;
        }
        return kExitUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const CLI::Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"msae"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace msae::cli
