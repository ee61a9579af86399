#include "doctest.h"
#include "test_util.hpp"

#include "msae/cli.hpp"
#include "msae/error.hpp"
#include "msae/serialize.hpp"
#include "msae/trainer.hpp"

#include <fstream>
#include <sstream>

#ifndef MSAE_SNAPSHOT_DIR
#define MSAE_SNAPSHOT_DIR "snapshots"
#endif

using namespace msae;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

// Small synthetic set and checkpoint shared by the command tests.
struct Workspace {
    testutil::TempDir dir;
    std::string emb = dir / "s.emb";
    std::string model = dir / "m.sae";

    Workspace() {
        REQUIRE(run_cli({"synth", "--n", "8", "--atoms", "12", "--active", "2", "--count", "300", "--seed", "5",
                         "--label-atom", "0", "--out", emb, "-q"})
                    .code == 0);
        REQUIRE(run_cli({"train", "--embeddings", emb, "--arch", "matryoshka", "--latents", "16", "--k-list", "2,4,16", "--lr",
                         "3e-3", "--batch-size", "50", "--epochs", "2", "--out", model, "-q"})
                    .code == 0);
    }
};

} // namespace

TEST_CASE("parse_k_list") {
    CHECK(cli::parse_k_list("4,8,16", 64) == std::vector<int>{4, 8, 16});
    CHECK(cli::parse_k_list("pow2:4..", 256) == std::vector<int>{4, 8, 16, 32, 64, 128, 256});
    CHECK(cli::parse_k_list("pow2:4..", 48) == std::vector<int>{4, 8, 16, 32, 48});
    CHECK(cli::parse_k_list("pow2:1..8", 64) == std::vector<int>{1, 2, 4, 8});
    CHECK_THROWS_AS(cli::parse_k_list("pow2:3..", 64), InvalidArgument);
    CHECK_THROWS_AS(cli::parse_k_list("4,x", 64), InvalidArgument);
    CHECK_THROWS_AS(cli::parse_k_list("pow2:8..4", 64), InvalidArgument);
}

TEST_CASE("help output matches the stored snapshots") {
    for (const std::string sub : {"", "synth", "train", "eval", "concepts", "search", "manipulate", "sweep", "probe", "serve"}) {
        CAPTURE(sub);
        std::vector<std::string> args;
        if (!sub.empty()) args.push_back(sub);
        args.push_back("--help");
        const Outcome o = run_cli(args);
        CHECK(o.code == 0);
        const std::string path = std::string(MSAE_SNAPSHOT_DIR) + "/help_" + (sub.empty() ? "msae" : sub) + ".txt";
        if (std::getenv("MSAE_UPDATE_SNAPSHOTS")) {
            std::ofstream(path, std::ios::binary) << o.out;
            continue;
        }
        CHECK(o.out == testutil::read_text(path));
    }
}

TEST_CASE("usage errors exit with code 1") {
    CHECK(run_cli({}).code == cli::kExitUsage);
    CHECK(run_cli({"bogus"}).code == cli::kExitUsage);
    CHECK(run_cli({"train", "--epochs", "x"}).code == cli::kExitUsage);
    CHECK(run_cli({"synth"}).code == cli::kExitUsage); // --out missing

    Workspace ws;
    CHECK(run_cli({"train", "--embeddings", ws.emb, "--arch", "relu", "--k", "3", "--out", ws.dir / "x.sae"}).code == cli::kExitUsage);
    CHECK(run_cli({"train", "--embeddings", ws.emb, "--arch", "topk", "--out", ws.dir / "x.sae"}).code == cli::kExitUsage);
    CHECK(run_cli({"train", "--embeddings", ws.emb, "--arch", "matryoshka", "--k-list", "2,4", "--alpha", "1", "--out",
                   ws.dir / "x.sae"})
              .code == cli::kExitUsage);
    CHECK(run_cli({"train", "--embeddings", ws.emb, "--arch", "topk", "--k", "2", "--latents", "8", "--expansion", "2", "--out",
                   ws.dir / "x.sae"})
              .code == cli::kExitUsage);
    CHECK(run_cli({"eval", "--model", ws.model, "--embeddings", ws.emb, "--force-topk", "99"}).code == cli::kExitUsage);
}

TEST_CASE("data errors exit with code 2") {
    Workspace ws;
    CHECK(run_cli({"eval", "--model", ws.dir / "missing.sae", "--embeddings", ws.emb}).code == cli::kExitData);
    testutil::write_bytes(ws.dir / "junk.sae", {'n', 'o', 'p', 'e'});
    CHECK(run_cli({"eval", "--model", ws.dir / "junk.sae", "--embeddings", ws.emb}).code == cli::kExitData);
    std::ofstream(ws.dir / "bad.json") << "{";
    CHECK(run_cli({"train", "--config", ws.dir / "bad.json", "--embeddings", ws.emb, "--out", ws.dir / "x.sae"}).code ==
          cli::kExitData);
}

TEST_CASE("numeric failure exits with code 3") {
    testutil::TempDir dir;
    EmbeddingSet set;
    set.data = Matrix::Constant(20, 4, 1e30);
    set.data.col(0).setLinSpaced(20, -1e30, 1e30);
    save_embeddings(set, dir / "huge.emb");
    const Outcome o = run_cli({"train", "--embeddings", dir / "huge.emb", "--arch", "relu", "--latents", "8", "--lr", "1e200",
                               "--grad-clip", "1e300", "--epochs", "3", "--batch-size", "4", "--out", dir / "x.sae", "-q"});
    CHECK(o.code == cli::kExitNumeric);
}

TEST_CASE("config file supplies options and flags take precedence") {
    Workspace ws;
    std::ofstream(ws.dir / "cfg.json") << R"({"embeddings": ")" << ws.emb << R"(", "arch": "topk", "k": 3, "latents": 16,
        "batch_size": 50, "epochs": 1, "lr": 1e-3, "out": ")" << std::string(ws.dir / "c.sae") << R"("})";
    Outcome o = run_cli({"train", "--config", ws.dir / "cfg.json", "--epochs", "2", "-q"});
    INFO(o.err);
    REQUIRE(o.code == 0);
    const Json j = Json::parse(o.out);
    CHECK(j["config"]["variant"] == "topk");
    CHECK(j["config"]["k"] == 3);
    CHECK(j["train"]["epochs"] == 2);
    CHECK(j["train"]["lr"] == 1e-3);
    CHECK(load_checkpoint(ws.dir / "c.sae").config.d == 16);

    std::ofstream(ws.dir / "unknown.json") << R"({"nonsense": 1})";
    CHECK(run_cli({"train", "--config", ws.dir / "unknown.json", "--embeddings", ws.emb, "--out", ws.dir / "x.sae"}).code ==
          cli::kExitUsage);
}

TEST_CASE("train writes the checkpoint and its stats sidecar") {
    Workspace ws;
    const Checkpoint ckpt = load_checkpoint(ws.model);
    CHECK(ckpt.config.k_list == std::vector<int>{2, 4, 16});
    const NormStats side = load_norm_stats(stats_sidecar_path(ws.model));
    CHECK(side.scale == ckpt.train_stats().scale);
}

TEST_CASE("commands are deterministic for a fixed seed") {
    Workspace ws;
    const std::string m2 = ws.dir / "m2.sae";
    REQUIRE(run_cli({"train", "--embeddings", ws.emb, "--arch", "matryoshka", "--latents", "16", "--k-list", "2,4,16", "--lr",
                     "3e-3", "--batch-size", "50", "--epochs", "2", "--out", m2, "-q"})
                .code == 0);
    CHECK(testutil::read_bytes(ws.model) == testutil::read_bytes(m2));

    const std::vector<std::string> eval{"eval", "--model", ws.model, "--embeddings", ws.emb, "--seed", "3", "--progressive", "2,4,16", "-q"};
    const Outcome a = run_cli(eval);
    const Outcome b = run_cli(eval);
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    const Json j = Json::parse(a.out);
    for (const char* key : {"l0", "fvu", "cs", "cknna", "do", "ndn", "lp_kl", "lp_acc"}) CHECK(j.contains(key));
    CHECK(j["progressive"].size() == 3);
}

TEST_CASE("search, manipulate, sweep and probe produce JSON") {
    Workspace ws;
    Outcome o = run_cli({"search", "--model", ws.model, "--embeddings", ws.emb, "--query", "4", "--top", "3", "-q"});
    REQUIRE(o.code == 0);
    CHECK(Json::parse(o.out)["results"][0]["id"] == "4");

    o = run_cli({"manipulate", "--model", ws.model, "--embeddings", ws.emb, "--query", "4", "-q"});
    REQUIRE(o.code == 0);
    CHECK(Json::parse(o.out)["displacement"].get<double>() < 1e-12);
    o = run_cli({"manipulate", "--model", ws.model, "--embeddings", ws.emb, "--query", "4", "--edit", "1=2", "--edit", "bad", "-q"});
    CHECK(o.code == cli::kExitUsage);

    const std::string clf = ws.dir / "clf.json";
    REQUIRE(run_cli({"probe", "--embeddings", ws.emb, "--epochs", "3", "--out", clf, "-q"}).code == 0);
    const std::string out = ws.dir / "sweep.json";
    o = run_cli({"sweep", "--model", ws.model, "--embeddings", ws.emb, "--classifier", clf, "--neuron", "2", "--magnitudes",
                 "0.3,20,30", "--samples", "1,2", "--out", out, "-q"});
    REQUIRE(o.code == 0);
    CHECK(o.out.empty());
    const Json sweep = Json::parse(testutil::read_text(out));
    CHECK(sweep["curves"].size() == 2);
    CHECK(sweep["curves"][0]["probabilities"].size() == 3);
}

TEST_CASE("concepts names latents from a vocabulary") {
    Workspace ws;
    const Checkpoint ckpt = load_checkpoint(ws.model);
    EmbeddingSet vocab;
    // Vocabulary rows placed exactly on two decoder directions, in raw space.
    vocab.data.resize(2, 8);
    const auto& s = ckpt.train_stats();
    vocab.data.row(0) = (ckpt.params.w_dec.col(3) / s.scale + s.mean).transpose();
    vocab.data.row(1) = (ckpt.params.w_dec.col(9) / s.scale + s.mean).transpose();
    save_embeddings(vocab, ws.dir / "v.emb");
    std::ofstream(ws.dir / "v.tsv") << "three\t0\nnine\t1\n";
    const Outcome o = run_cli({"concepts", "--model", ws.model, "--vocab", ws.dir / "v.tsv", "--vocab-embeddings", ws.dir / "v.emb", "-q"});
    REQUIRE(o.code == 0);
    const Json j = Json::parse(o.out);
    REQUIRE(j["assignments"].size() == 16);
    CHECK(j["assignments"][3]["concept"] == "three");
    CHECK(j["assignments"][3]["similarity"].get<double>() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(j["assignments"][9]["concept"] == "nine");
}
