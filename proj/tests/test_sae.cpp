#include "doctest.h"
#include "oracles.hpp"

#include "msae/error.hpp"
#include "msae/sae.hpp"

#include <cmath>
#include <random>

using namespace msae;

namespace {

SaeConfig config_for(Variant v, Index n, Index d) {
    SaeConfig c;
    c.n = static_cast<int>(n);
    c.d = static_cast<int>(d);
    c.variant = v;
    c.lambda = 0.003;
    c.k = 3;
    c.k_list = {1, 2, 4};
    c.alpha = make_alpha(AlphaScheme::uniform, 3);
    return c;
}

Matrix row(std::initializer_list<double> values) {
    Matrix m(1, static_cast<Index>(values.size()));
    Index i = 0;
    for (double v : values) m(0, i++) = v;
    return m;
}

// Parameters whose pre-activations equal the input exactly (n == d, identity encoder).
SaeParams identity_params(Index n) {
    SaeParams p = SaeParams::zeros(n, n);
    p.w_enc.setIdentity();
    p.w_dec.setIdentity();
    return p;
}

} // namespace

TEST_CASE("topk_mask selects the largest values with lowest-index tie-break") {
    const std::vector<double> a{3, 1, 2};
    CHECK(topk_mask(a, 2) == std::vector<bool>{true, false, true});
    const std::vector<double> b{5, 5, 1};
    CHECK(topk_mask(b, 1) == std::vector<bool>{true, false, false});
    CHECK(topk_mask(a, 3) == std::vector<bool>{true, true, true});
    CHECK_THROWS_AS(topk_mask(a, 0), InvalidArgument);
    CHECK_THROWS_AS(topk_mask(a, 4), InvalidArgument);
}

TEST_CASE("topk_mask matches the brute-force sort oracle, ties included") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> dim(1, 8);
    std::uniform_int_distribution<int> small(-3, 3);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 2000; ++trial) {
        const int d = dim(rng);
        std::vector<double> v(static_cast<std::size_t>(d));
        const bool ties = trial % 2 == 0;
        for (auto& x : v) x = ties ? small(rng) : g(rng);
        std::uniform_int_distribution<int> kd(1, d);
        const int k = kd(rng);
        REQUIRE(topk_mask(v, k) == oracle::brute_topk(v, k));
    }
}

TEST_CASE("batch_topk_mask flattens the batch") {
    Matrix m(2, 3);
    m << 9, 0, 0, 1, 2, 3;
    const Mask mask = batch_topk_mask(m, 2);
    CHECK(mask(0, 0));
    CHECK_FALSE(mask(0, 1));
    CHECK_FALSE(mask(0, 2));
    CHECK(mask(1, 0));
    CHECK(mask(1, 1));
    CHECK(mask(1, 2));

    const Matrix equal = Matrix::Constant(2, 3, 1.0);
    const Mask first = batch_topk_mask(equal, 1);
    CHECK(first(0, 0));
    CHECK(first(0, 1));
    CHECK_FALSE(first(0, 2));
    CHECK_FALSE(first(1, 0));

    CHECK(batch_topk_mask(m, 3).all());
    CHECK_THROWS_AS(batch_topk_mask(m, 4), InvalidArgument);
}

TEST_CASE("batch_topk_mask matches the flattened oracle and keeps k per row on average") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> dim(1, 8);
    std::uniform_int_distribution<int> small(-2, 2);
    for (int trial = 0; trial < 1000; ++trial) {
        const int d = dim(rng), b = dim(rng);
        Matrix m(b, d);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = small(rng);
        std::uniform_int_distribution<int> kd(1, d);
        const int k = kd(rng);
        const Mask mask = batch_topk_mask(m, k);
        const auto expect = oracle::brute_batch_topk(m, k);
        for (Index i = 0; i < m.size(); ++i) REQUIRE(mask.data()[i] == expect[static_cast<std::size_t>(i)]);
        REQUIRE(mask.count() == static_cast<Index>(k) * b);
    }
}

TEST_CASE("softcap bounds and matches tanh") {
    Matrix z(1, 3);
    z << 0.0, 300.0, 30.0;
    const Matrix capped = softcap_apply(z, 30.0);
    CHECK(capped(0, 0) == 0.0);
    CHECK(std::abs(capped(0, 1) - 30.0) < 1e-3);
    CHECK(capped(0, 2) == doctest::Approx(22.847807).epsilon(1e-6));

    // Strictly monotone and bounded on a dense grid.
    Matrix grid(1, 2001);
    for (Index i = 0; i < grid.cols(); ++i) grid(0, i) = -100.0 + 0.1 * static_cast<double>(i);
    const Matrix g = softcap_apply(grid, 7.0);
    for (Index i = 1; i < g.cols(); ++i) REQUIRE(g(0, i) > g(0, i - 1));
    CHECK(g.cwiseAbs().maxCoeff() < 7.0);
}

TEST_CASE("forward: identity autoencoder reconstructs exactly") {
    const SaeParams p = identity_params(3);
    SaeConfig c = config_for(Variant::relu, 3, 3);
    const Matrix x = row({0.5, 2.0, 0.0});
    const ForwardTrace t = forward(p, c, x, Mode::train);
    CHECK(t.recon.front() == x);
}

TEST_CASE("forward: matryoshka levels nest by construction") {
    const SaeParams p = identity_params(3);
    SaeConfig c = config_for(Variant::matryoshka, 3, 3);
    c.k_list = {1, 2};
    c.alpha = {1.0, 1.0};
    const ForwardTrace t = forward(p, c, row({3, 1, 2}), Mode::train);
    REQUIRE(t.z.size() == 2);
    CHECK(t.z[0] == row({3, 0, 0}));
    CHECK(t.z[1] == row({3, 0, 2}));
}

TEST_CASE("forward: negative pre-activations give zero codes and recon = b_pre") {
    SaeParams p = identity_params(3);
    p.b_pre << 0.5, -0.25, 1.0;
    const Matrix x = row({-1, -2, -3}).rowwise() + p.b_pre.transpose();
    for (Variant v : {Variant::relu, Variant::topk, Variant::batch_topk, Variant::matryoshka}) {
        SaeConfig c = config_for(v, 3, 3);
        c.k = 2;
        c.k_list = {1, 2};
        c.alpha = {1.0, 1.0};
        const ForwardTrace t = forward(p, c, x, Mode::train);
        for (std::size_t level = 0; level < t.z.size(); ++level) {
            CHECK(t.z[level].isZero(0.0));
            CHECK(t.recon[level] == p.b_pre.transpose());
        }
    }
}

TEST_CASE("forward rejects bad input") {
    const SaeParams p = identity_params(3);
    const SaeConfig c = config_for(Variant::relu, 3, 3);
    CHECK_THROWS_AS(forward(p, c, Matrix::Zero(1, 4), Mode::train), DimensionMismatch);
    Matrix bad = Matrix::Zero(1, 3);
    bad(0, 1) = std::nan("");
    CHECK_THROWS_AS(forward(p, c, bad, Mode::train), NumericError);
}

TEST_CASE("loss examples") {
    // Perfect reconstruction with lambda 0.
    SaeConfig relu = config_for(Variant::relu, 3, 3);
    relu.lambda = 0.0;
    const SaeParams p = identity_params(3);
    const Matrix x = row({1, 2, 3});
    CHECK(loss(forward(p, relu, x, Mode::train), relu, x) == 0.0);

    // x = (1,0), x_hat = (0,0), z = (2), lambda 0.5: 1 + 0.5 * 2.
    ForwardTrace t;
    t.mode = Mode::train;
    t.z = {row({2.0})};
    t.recon = {row({0.0, 0.0})};
    t.active = {Mask::Constant(1, 1, true)};
    SaeConfig c;
    c.n = 2;
    c.d = 1;
    c.variant = Variant::relu;
    c.lambda = 0.5;
    CHECK(loss(t, c, row({1.0, 0.0})) == doctest::Approx(2.0));

    // Matryoshka with identical reconstructions at both levels, alpha (2, 1).
    SaeConfig m = c;
    m.variant = Variant::matryoshka;
    m.k_list = {1, 2};
    m.alpha = {2.0, 1.0};
    t.z = {row({2.0}), row({2.0})};
    t.recon = {row({0.0, 0.0}), row({0.0, 0.0})};
    t.active = {Mask::Constant(1, 1, true), Mask::Constant(1, 1, true)};
    CHECK(loss(t, m, row({1.0, 0.0})) == doctest::Approx(3.0));

    ForwardTrace infer = forward(p, relu, x, Mode::infer);
    CHECK_THROWS_AS(loss(infer, relu, x), InvalidArgument);
}

TEST_CASE("loss is non-negative on random models") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const SaeParams p = oracle::random_params(5, 8, seed);
        const Matrix x = oracle::random_matrix(4, 5, seed + 100);
        for (Variant v : {Variant::relu, Variant::topk, Variant::batch_topk, Variant::matryoshka}) {
            const SaeConfig c = config_for(v, 5, 8);
            CHECK(loss(forward(p, c, x, Mode::train), c, x) >= 0.0);
        }
    }
}

TEST_CASE("backward: dead batch has zero decoder gradient and b_pre gradient 2*mean(b_pre - x)") {
    SaeParams p = SaeParams::zeros(1, 1);
    p.w_enc(0, 0) = 1.0;
    p.w_dec(0, 0) = 1.0;
    p.b_enc[0] = -10.0;
    p.b_pre[0] = 0.3;
    const SaeConfig c = config_for(Variant::relu, 1, 1);
    Matrix x(2, 1);
    x << 1.0, 2.0;
    const SaeGradients g = backward(forward(p, c, x, Mode::train), c, p, x);
    CHECK(g.w_dec(0, 0) == 0.0);
    CHECK(g.w_enc(0, 0) == 0.0);
    CHECK(g.b_pre[0] == doctest::Approx(2.0 * ((0.3 - 1.0) + (0.3 - 2.0)) / 2.0));
}

TEST_CASE("backward matches central finite differences for every variant") {
    struct Case {
        Variant v;
        AlphaScheme alpha;
    };
    const Case cases[] = {{Variant::relu, AlphaScheme::uniform},
                          {Variant::topk, AlphaScheme::uniform},
                          {Variant::batch_topk, AlphaScheme::uniform},
                          {Variant::matryoshka, AlphaScheme::uniform},
                          {Variant::matryoshka, AlphaScheme::reverse}};
    for (const auto& cs : cases)
        for (std::optional<double> cap : {std::optional<double>{}, std::optional<double>{30.0}}) {
            SaeConfig c = config_for(cs.v, 5, 8);
            c.alpha = make_alpha(cs.alpha, 3);
            c.softcap = cap;
            const SaeParams p = oracle::random_params(5, 8, 42);
            const Matrix x = oracle::random_matrix(3, 5, 43);
            const SaeGradients analytic = backward(forward(p, c, x, Mode::train), c, p, x);
            const SaeGradients numeric = oracle::finite_difference_gradients(p, c, x);
            CAPTURE(to_string(cs.v));
            CAPTURE(cap.has_value());
            CHECK(oracle::max_relative_error(analytic, numeric) < 1e-4);
        }
}

TEST_CASE("matryoshka gradients scale linearly with alpha") {
    SaeConfig c = config_for(Variant::matryoshka, 5, 8);
    const SaeParams p = oracle::random_params(5, 8, 3);
    const Matrix x = oracle::random_matrix(6, 5, 4);
    const SaeGradients g1 = backward(forward(p, c, x, Mode::train), c, p, x);
    for (auto& a : c.alpha) a *= 4.0;
    SaeGradients g4 = backward(forward(p, c, x, Mode::train), c, p, x);
    g4 *= 0.25;
    CHECK((g4.w_enc - g1.w_enc).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((g4.w_dec - g1.w_dec).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((g4.b_pre - g1.b_pre).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("project_decoder_gradient removes the radial component") {
    SaeParams p = oracle::random_params(4, 6, 9);
    SaeGradients g = SaeParams::zeros(4, 6);
    g.w_dec.col(0) = 3.0 * p.w_dec.col(0);
    // Column 1: orthogonal to the decoder column.
    Vector orth = Vector::Random(4);
    orth -= orth.dot(p.w_dec.col(1)) * p.w_dec.col(1);
    g.w_dec.col(1) = orth;
    const SaeGradients out = project_decoder_gradient(p, g);
    CHECK(out.w_dec.col(0).norm() < 1e-12);
    CHECK((out.w_dec.col(1) - orth).norm() < 1e-12);

    g.w_dec = oracle::random_matrix(4, 6, 10);
    const SaeGradients r = project_decoder_gradient(p, g);
    for (Index c = 0; c < 6; ++c) CHECK(std::abs(r.w_dec.col(c).dot(p.w_dec.col(c))) < 1e-10);
}

TEST_CASE("matryoshka supports nest on random batches") {
    SaeConfig c = config_for(Variant::matryoshka, 6, 16);
    c.k_list = {1, 2, 4, 8, 16};
    c.alpha = make_alpha(AlphaScheme::uniform, 5);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const SaeParams p = oracle::random_params(6, 16, seed);
        const ForwardTrace t = forward(p, c, oracle::random_matrix(8, 6, seed + 1), Mode::train);
        for (std::size_t level = 1; level < t.active.size(); ++level)
            REQUIRE((t.active[level - 1].array() && !t.active[level].array()).count() == 0);
    }
}

TEST_CASE("infer mode does not depend on the variant") {
    const SaeParams p = oracle::random_params(5, 8, 21);
    const Matrix x = oracle::random_matrix(7, 5, 22);
    const ForwardTrace ref = forward(p, config_for(Variant::relu, 5, 8), x, Mode::infer);
    for (Variant v : {Variant::topk, Variant::batch_topk, Variant::matryoshka}) {
        const ForwardTrace t = forward(p, config_for(v, 5, 8), x, Mode::infer);
        REQUIRE(t.z.size() == 1);
        CHECK(t.z[0] == ref.z[0]);
        CHECK(t.recon[0] == ref.recon[0]);
    }
}

TEST_CASE("config validation") {
    SaeConfig c = config_for(Variant::matryoshka, 4, 8);
    CHECK_NOTHROW(c.validate());
    c.k_list = {2, 2, 4};
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c.k_list = {1, 2, 16};
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c.k_list = {1, 2};
    CHECK_THROWS_AS(c.validate(), InvalidArgument); // alpha length
    CHECK(make_alpha(AlphaScheme::reverse, 7) == std::vector<double>{7, 6, 5, 4, 3, 2, 1});
}
