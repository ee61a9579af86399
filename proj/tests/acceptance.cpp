// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include "oracles.hpp"
#include "test_util.hpp"

#include "msae/cli.hpp"
#include "msae/concepts.hpp"
#include "msae/embedset.hpp"
#include "msae/error.hpp"
#include "msae/metrics.hpp"
#include "msae/sae.hpp"
#include "msae/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

using namespace msae;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
    std::printf("%s  %-34s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

SaeConfig config(Variant v, int n, int d) {
    SaeConfig c;
    c.n = n;
    c.d = d;
    c.variant = v;
    if (v == Variant::relu) c.lambda = 0.003;
    if (v == Variant::topk || v == Variant::batch_topk) c.k = 3;
    if (v == Variant::matryoshka) {
        c.k_list = {1, 2, 4};
        c.alpha = make_alpha(AlphaScheme::uniform, 3);
    }
    return c;
}

// ------------------------------------------------------------------ gradients

void gradient_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    int cases = 0;
    struct Case {
        Variant v;
        AlphaScheme alpha;
    };
    const Case list[] = {{Variant::relu, AlphaScheme::uniform},
                         {Variant::topk, AlphaScheme::uniform},
                         {Variant::batch_topk, AlphaScheme::uniform},
                         {Variant::matryoshka, AlphaScheme::uniform},
                         {Variant::matryoshka, AlphaScheme::reverse}};
    for (const auto& cs : list)
        for (std::optional<double> cap : {std::optional<double>{}, std::optional<double>{30.0}}) {
            SaeConfig c = config(cs.v, 5, 8);
            if (cs.v == Variant::matryoshka) c.alpha = make_alpha(cs.alpha, 3);
            c.softcap = cap;
            const SaeParams p = oracle::random_params(5, 8, 100 + cases);
            const Matrix x = oracle::random_matrix(3, 5, 200 + cases);
            const SaeGradients analytic = backward(forward(p, c, x, Mode::train), c, p, x);
            const SaeGradients numeric = oracle::finite_difference_gradients(p, c, x, 1e-5);
            worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
            ++cases;
        }
    const double secs = seconds_since(t0);
    report(worst < 1e-4 && secs < 10.0, "gradient correctness",
           fmt("%d configs, max rel err %.2e (< 1e-4), %.2f s (< 10 s)", cases, worst, secs));
}

// ------------------------------------------------------------------ nesting

void nesting_invariant() {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0.0, 1.0);
    long violations = 0;
    SaeConfig c = config(Variant::matryoshka, 6, 32);
    c.k_list = {1, 2, 4, 8, 16, 32};
    c.alpha = make_alpha(AlphaScheme::uniform, c.k_list.size());
    for (int batch = 0; batch < 1000; ++batch) {
        const SaeParams p = oracle::random_params(6, 32, 5000 + static_cast<std::uint64_t>(batch));
        Matrix x(16, 6);
        for (Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
        if (batch % 4 == 0) x = (x * 2.0).array().round() / 2.0; // coarse values produce tied pre-activations
        const ForwardTrace t = forward(p, c, x, Mode::train);
        const auto masks = nested_topk_masks(t.preact, c.k_list);
        for (std::size_t l = 0; l + 1 < c.k_list.size(); ++l) {
            violations += (masks[l].array() && !masks[l + 1].array()).count();
            violations += (t.active[l].array() && !t.active[l + 1].array()).count();
        }
        for (std::size_t l = 0; l < c.k_list.size(); ++l)
            for (Index r = 0; r < masks[l].rows(); ++r) violations += masks[l].row(r).count() != c.k_list[l];
    }
    report(violations == 0, "nesting invariant", fmt("1000 batches, %ld violations", violations));
}

// ------------------------------------------------------------------ topk oracle

void topk_oracle() {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<int> dim(1, 8), rows_d(1, 4), tie_level(0, 3);
    long mismatches = 0, tied = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const int d = dim(rng);
        const int k = std::uniform_int_distribution<int>(1, d)(rng);
        const int rows = rows_d(rng);
        const bool ties = trial % 2 == 0;
        Matrix m(rows, d);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = ties ? tie_level(rng) * 0.5 - 0.5 : g(rng);
        if (ties) ++tied;

        for (Index r = 0; r < rows; ++r) {
            const std::vector<double> v(m.row(r).data(), m.row(r).data() + d);
            const auto expect = oracle::brute_topk(v, k);
            mismatches += topk_mask(v, k) != expect;
            const Mask rm = row_topk_mask(m, k);
            for (int j = 0; j < d; ++j) mismatches += rm(r, j) != expect[static_cast<std::size_t>(j)];
        }
        const auto flat = oracle::brute_batch_topk(m, k);
        const Mask bm = batch_topk_mask(m, k);
        for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < d; ++j) mismatches += bm(r, j) != flat[static_cast<std::size_t>(r * d + j)];
    }
    report(mismatches == 0, "topk/batch-topk oracle equivalence",
           fmt("10000 cases (%ld with ties), %ld mismatches", tied, mismatches));
}

// ------------------------------------------------------------------ constraints

void constraint_maintenance() {
    const auto [set, truth] = synthesize({16, 32, 4, 4000, 0.01, 3});
    const NormStats stats = fit_norm_stats(set);
    const Matrix x = normalize(set.data, stats);
    SaeConfig c = config(Variant::matryoshka, 16, 64);
    c.k_list = {4, 8, 16, 32, 64};
    c.alpha = make_alpha(AlphaScheme::uniform, 5);
    TrainConfig t;
    t.lr = 3e-3;
    t.grad_clip = 1.0;
    TrainState state = TrainState::start(init_params(c, 1), 1);
    double worst_norm = 0.0, worst_clip = 0.0;
    int clipped = 0;
    const Index b = 64;
    for (int step = 0; step < 500; ++step) {
        const Index start = (step * b) % (x.rows() - b);
        const StepStats s = train_step(state, x.middleRows(start, b), c, t);
        worst_norm = std::max(worst_norm, state.params.max_decoder_norm_error());
        worst_clip = std::max(worst_clip, s.clipped_norm);
        clipped += s.grad_norm > 1.0;
    }
    report(worst_norm <= 1e-6 && worst_clip <= 1.0 + 1e-9, "constraint maintenance",
           fmt("500 steps, max |norm-1| %.1e (<= 1e-6), max clipped norm %.12f (<= 1+1e-9), clip active on %d steps",
               worst_norm, worst_clip, clipped));
}

// ------------------------------------------------------------------ recovery

struct Trained {
    EmbeddingSet set;
    GroundTruth truth;
    Checkpoint msae;
    Checkpoint topk;
    Matrix x; // normalized training set
};

double mean_max_cosine(const Matrix& atoms, const Matrix& w_dec) {
    const auto matches = oracle::best_column_match(atoms, w_dec);
    double sum = 0.0;
    for (const auto& m : matches) sum += m.second;
    return sum / static_cast<double>(matches.size());
}

double fvu_at(const Checkpoint& ckpt, const Matrix& x, std::optional<int> k) {
    Matrix z = encode(ckpt.params, ckpt.config, x);
    if (k) z = keep_top_activations(z, *k);
    return fvu(x, decode(ckpt.params, z));
}

Trained dictionary_recovery() {
    Trained out;
    std::tie(out.set, out.truth) = synthesize({32, 64, 4, 10000, 0.01, 7});

    SaeConfig m;
    m.n = 32;
    m.d = 256;
    m.variant = Variant::matryoshka;
    m.k_list = {4, 8, 16, 32, 64, 128, 256};
    m.alpha = make_alpha(AlphaScheme::uniform, m.k_list.size());
    SaeConfig tk;
    tk.n = 32;
    tk.d = 256;
    tk.variant = Variant::topk;
    tk.k = 8;
    TrainConfig t;
    t.lr = 3e-3;
    t.batch_size = 512;
    t.epochs = 30;
    t.seed = 1;

    auto t0 = std::chrono::steady_clock::now();
    out.msae = train(out.set, m, t).checkpoint;
    const double msae_secs = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    out.topk = train(out.set, tk, t).checkpoint;
    const double topk_secs = seconds_since(t0);
    out.x = normalize(out.set.data, out.msae.train_stats());

    const double recovery = mean_max_cosine(out.truth.atoms, out.msae.params.w_dec);
    const double fvu_msae = fvu_at(out.msae, out.x, std::nullopt);
    const double fvu_topk = fvu_at(out.topk, out.x, 8);
    report(recovery > 0.9 && fvu_msae < 0.05, "dictionary recovery (matryoshka)",
           fmt("mean max-cosine %.4f (> 0.9), train FVU %.4f (< 0.05), %.1f s", recovery, fvu_msae, msae_secs));
    const double fvu_topk_relu = fvu_at(out.topk, out.x, std::nullopt);
    report(fvu_topk < 0.15, "dictionary recovery (topk k=8)",
           fmt("train FVU at k=8 %.4f (< 0.15), ReLU-only inference %.4f, %.1f s", fvu_topk, fvu_topk_relu, topk_secs));
    report(fvu_msae < fvu_topk, "fidelity ordering", fmt("FVU matryoshka %.4f < topk %.4f", fvu_msae, fvu_topk));
    return out;
}

void progressive_trend(const Trained& tr) {
    RecoveryOptions ro;
    ro.with_cknna = false;
    const std::vector<int> grid{8, 16, 256};
    const auto m = progressive_recovery(tr.msae.params, tr.msae.config, tr.x, grid, ro);
    const auto t = progressive_recovery(tr.topk.params, tr.topk.config, tr.x, grid, ro);
    const double msae_gain = m[0].fvu - m[2].fvu;
    const double topk_gain = t[0].fvu - t[2].fvu;
    report(m[2].fvu < m[1].fvu && topk_gain < msae_gain, "progressive recovery trend",
           fmt("matryoshka FVU k=16 %.4f -> k=256 %.4f; gain k=8->256 matryoshka %.4f > topk %.4f", m[1].fvu, m[2].fvu,
               msae_gain, topk_gain));
}

// ------------------------------------------------------------------ metric identities

void metric_identities() {
    const Matrix x = oracle::random_matrix(200, 12, 31);
    const Matrix psi = oracle::random_matrix(200, 20, 32).cwiseMax(0.0);
    std::vector<std::string> bad;

    const double f = fvu(x, x);
    if (f != 0.0) bad.push_back(fmt("fvu(X,X)=%g", f));
    const double self = cknna(x, x, 10);
    if (std::abs(self - 1.0) > 1e-9) bad.push_back(fmt("cknna self %.12f", self));
    const double base = cknna(x, psi, 10);
    const double scaled = cknna(3.0 * x, psi, 10);
    if (std::abs(base - scaled) >= 1e-9) bad.push_back(fmt("cknna scale diff %.2e", std::abs(base - scaled)));

    const Eigen::HouseholderQR<Matrix> qr(oracle::random_matrix(12, 8, 33));
    const Matrix q = qr.householderQ() * Matrix::Identity(12, 8);
    const double dor = decoder_orthogonality(q);
    if (std::abs(dor) > 1e-12) bad.push_back(fmt("DO orthonormal %.2e", dor));
    const double l0 = l0_sparsity(Matrix::Zero(5, 9));
    if (l0 != 1.0) bad.push_back(fmt("l0 zeros %g", l0));

    std::vector<std::uint32_t> labels;
    for (Index r = 0; r < x.rows(); ++r) labels.push_back(x(r, 0) > 0.0 ? 1u : 0u);
    ProbeConfig pc;
    pc.epochs = 5;
    const ProbeModel probe = train_probe(x, labels, pc);
    const LpMetrics lp = lp_metrics(probe, x, x);
    if (lp.kl != 0.0 || lp.acc != 1.0) bad.push_back(fmt("lp (%g, %g)", lp.kl, lp.acc));

    // Gate boundaries on crafted assignments.
    auto make = [](double sim, double second, bool best) {
        ConceptAssignment a;
        a.concept_name = "c";
        a.similarity = sim;
        a.second_similarity = second;
        a.ratio = second > 0.0 ? sim / second : std::nan("");
        a.is_best_for_concept = best;
        return a;
    };
    struct Gate {
        double sim, second;
        bool best, valid;
    };
    const Gate gates[] = {{0.42, 0.1, true, false},  {0.4201, 0.1, true, true}, {0.41, 0.1, true, false},
                          {0.8, 0.4, true, false},   {0.8, 0.39, true, true},   {0.9, -0.2, true, true},
                          {0.9, 0.1, false, false}};
    for (const auto& gcase : gates) {
        const auto v = validate_assignments({make(gcase.sim, gcase.second, gcase.best)});
        if (v.assignments[0].valid != gcase.valid) bad.push_back(fmt("gate sim=%g second=%g", gcase.sim, gcase.second));
    }

    std::string detail = "fvu, cknna self/scale, DO, l0, lp, 0.42/2.0 gates";
    for (const auto& b : bad) detail += "; " + b;
    report(bad.empty(), "metric identities", detail);
}

// ------------------------------------------------------------------ concept matching

void concept_matching(const Trained& tr) {
    ConceptVocab vocab;
    vocab.embeddings = tr.truth.atoms;
    for (Index j = 0; j < vocab.embeddings.rows(); ++j) vocab.names.push_back("atom" + std::to_string(j));
    const Matrix prepared = prepare_vocab(vocab, tr.msae.train_stats());
    const auto v = validate_assignments(match_concepts(tr.msae.params, prepared, vocab.names));

    // Exhaustive cosine between each decoder column and every true atom.
    const auto& w = tr.msae.params.w_dec;
    int valid = 0, agree = 0;
    for (const auto& a : v.assignments) {
        if (!a.valid) continue;
        ++valid;
        Index best = 0;
        double best_cos = -2.0;
        for (Index j = 0; j < tr.truth.atoms.rows(); ++j) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (Index i = 0; i < w.rows(); ++i) {
                dot += w(i, a.neuron) * tr.truth.atoms(j, i);
                na += w(i, a.neuron) * w(i, a.neuron);
                nb += tr.truth.atoms(j, i) * tr.truth.atoms(j, i);
            }
            const double cos = dot / std::sqrt(na * nb);
            if (cos > best_cos) {
                best_cos = cos;
                best = j;
            }
        }
        agree += a.concept_index == best;
    }
    const double rate = valid > 0 ? static_cast<double>(agree) / valid : 0.0;
    report(valid > 0 && rate > 0.9, "concept matching oracle",
           fmt("%d/%d valid neurons match the nearest true atom (%.1f%%, > 90%%)", agree, valid, 100.0 * rate));
}

// ------------------------------------------------------------------ CLI determinism

void cli_determinism() {
    testutil::TempDir dir;
    auto run = [&](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return std::make_pair(code, out.str());
    };
    bool ok = true;
    std::string detail;
    for (const char* cmd : {"synth", "train", "eval"}) {
        std::string outputs[2];
        for (int rep = 0; rep < 2; ++rep) {
            const std::string tag = std::to_string(rep);
            std::vector<std::string> args;
            if (std::string(cmd) == "synth")
                args = {"synth", "--n", "16", "--atoms", "32", "--count", "2000", "--seed", "9", "--out", dir / ("s" + tag + ".emb"), "-q"};
            else if (std::string(cmd) == "train")
                args = {"train", "--embeddings", dir / ("s" + tag + ".emb"), "--arch", "matryoshka", "--latents", "64", "--k-list",
                        "pow2:4..", "--lr", "3e-3", "--batch-size", "256", "--epochs", "3", "--seed", "4", "--out",
                        dir / ("m" + tag + ".sae"), "-q"};
            else
                args = {"eval", "--model", dir / ("m" + tag + ".sae"), "--embeddings", dir / ("s" + tag + ".emb"), "--seed", "2",
                        "--progressive", "4,16,64", "-q"};
            const auto [code, text] = run(args);
            ok = ok && code == 0 && !text.empty();
            outputs[rep] = text;
        }
        const bool same = outputs[0] == outputs[1];
        ok = ok && same;
        detail += fmt("%s %s (%zu bytes); ", cmd, same ? "identical" : "DIFFERENT", outputs[0].size());
    }
    ok = ok && testutil::read_bytes(dir / "s0.emb") == testutil::read_bytes(dir / "s1.emb") &&
         testutil::read_bytes(dir / "m0.sae") == testutil::read_bytes(dir / "m1.sae");
    detail += "artifacts byte-identical";
    report(ok, "CLI determinism", detail);
}

// ------------------------------------------------------------------ formats

void format_round_trips(const Trained& tr) {
    testutil::TempDir dir;
    std::vector<std::string> bad;
    auto code_of = [&](auto loader, const std::string& path, const std::vector<char>& bytes) -> std::optional<FormatError::Code> {
        testutil::write_bytes(path, bytes);
        try {
            loader(path);
        } catch (const FormatError& e) {
            return e.code();
        }
        return std::nullopt;
    };

    EmbeddingSet set = tr.set;
    set.data = round_to_float(set.data); // the float32 payload is the stored form
    set.class_labels.assign(static_cast<std::size_t>(set.rows()), 0);
    for (std::size_t i = 0; i < set.class_labels.size(); ++i) set.class_labels[i] = static_cast<std::uint32_t>(i % 5);
    save_embeddings(set, dir / "a.emb");
    const EmbeddingSet back = load_embeddings(dir / "a.emb");
    if (back.data != set.data || back.class_labels != set.class_labels) bad.push_back("EMB1 values");
    save_embeddings(back, dir / "b.emb");
    const auto emb = testutil::read_bytes(dir / "a.emb");
    if (emb != testutil::read_bytes(dir / "b.emb")) bad.push_back("EMB1 bytes");

    save_checkpoint(tr.msae, dir / "a.sae");
    const Checkpoint ck = load_checkpoint(dir / "a.sae");
    if (ck.params.w_enc != tr.msae.params.w_enc || ck.params.w_dec != tr.msae.params.w_dec ||
        ck.params.b_enc != tr.msae.params.b_enc || ck.params.b_pre != tr.msae.params.b_pre)
        bad.push_back("SAE1 values");
    save_checkpoint(ck, dir / "b.sae");
    const auto sae = testutil::read_bytes(dir / "a.sae");
    if (sae != testutil::read_bytes(dir / "b.sae")) bad.push_back("SAE1 bytes");

    auto load_emb = [](const std::string& p) { load_embeddings(p); };
    auto load_sae = [](const std::string& p) { load_checkpoint(p); };
    auto magic = emb;
    magic[1] = 'X';
    if (code_of(load_emb, dir / "c.emb", magic) != FormatError::Code::bad_magic) bad.push_back("EMB1 magic");
    auto cut = emb;
    cut.resize(emb.size() / 2);
    if (code_of(load_emb, dir / "c.emb", cut) != FormatError::Code::truncated) bad.push_back("EMB1 truncation");
    magic = sae;
    magic[0] = 'X';
    if (code_of(load_sae, dir / "c.sae", magic) != FormatError::Code::bad_magic) bad.push_back("SAE1 magic");
    cut = sae;
    cut.resize(sae.size() - 100);
    if (code_of(load_sae, dir / "c.sae", cut) != FormatError::Code::truncated) bad.push_back("SAE1 truncation");

    std::string detail = fmt("EMB1 %zu bytes, SAE1 %zu bytes bit-exact; magic/truncation codes", emb.size(), sae.size());
    for (const auto& b : bad) detail += "; failed " + b;
    report(bad.empty(), "format round trips", detail);
}

} // namespace

int main() {
    try {
        gradient_correctness();
        nesting_invariant();
        topk_oracle();
        constraint_maintenance();
        metric_identities();
        cli_determinism();
        const Trained tr = dictionary_recovery();
        progressive_trend(tr);
        concept_matching(tr);
        format_round_trips(tr);
    } catch (const std::exception& e) {
        std::printf("FAIL  acceptance harness aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
