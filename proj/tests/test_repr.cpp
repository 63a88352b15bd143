// SPDX-License-Identifier: Apache-2.0
#include "mosr/repr.hpp"

#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>

using namespace mosr;
using Catch::Approx;

namespace {

Representation from_rows(std::vector<std::vector<std::vector<double>>> layers_rows) {
    Representation r;
    for (std::size_t l = 0; l < layers_rows.size(); ++l) {
        r.layers.push_back(static_cast<int>(l));
        const auto& rows = layers_rows[l];
        Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
        for (std::size_t t = 0; t < rows.size(); ++t)
            for (std::size_t d = 0; d < rows[t].size(); ++d) m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d)) = rows[t][d];
        r.states.push_back(m);
    }
    return r;
}

Vec vec(std::initializer_list<double> v) {
    Vec x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double d : v) x(i++) = d;
    return x;
}

}  // namespace

TEST_CASE("gather_representation shape and neutrality", "[repr]") {
    const TransformerModel base(ModelConfig{});
    const auto live = attach_adapters(base, 8, 10.0);
    const std::vector<int> tokens = {0, 5, 6, 7, 1};
    const std::vector<int> layers = {2, 3};
    const auto a = gather_representation(base, tokens, layers);
    REQUIRE(a.states.size() == 2);
    CHECK(a.states[0].rows() == 5);
    CHECK(a.states[0].cols() == 64);
    const auto b = gather_representation(live, tokens, layers);
    for (std::size_t l = 0; l < 2; ++l) CHECK(a.states[l] == b.states[l]);
    const auto c = gather_representation(base, tokens, layers);
    for (std::size_t l = 0; l < 2; ++l) CHECK(a.states[l] == c.states[l]);
    CHECK_THROWS_AS(gather_representation(base, std::vector<int>{}, layers), InputError);
}

TEST_CASE("pool averages tokens then layers", "[repr]") {
    const auto ones = from_rows({{{1, 1, 1}, {1, 1, 1}}, {{1, 1, 1}, {1, 1, 1}}});
    CHECK(pool(ones) == vec({1, 1, 1}));
    const auto single = from_rows({{{0.5, -2, 3}}});
    CHECK(pool(single) == vec({0.5, -2, 3}));
    // (v + w) / 2 with v = (1, 2, 3), w = (3, 0, -1) -> (2, 1, 1).
    const auto two = from_rows({{{1, 2, 3}}, {{3, 0, -1}}});
    CHECK(pool(two) == vec({2, 1, 1}));
    CHECK_THROWS_AS(pool(Representation{}), InputError);
}

TEST_CASE("cosine_sim basics", "[repr]") {
    const Vec a = vec({1, 2, 3});
    CHECK(cosine_sim(a, a) == Approx(1.0).epsilon(1e-15));
    CHECK(cosine_sim(vec({1, 0}), vec({0, 5})) == 0.0);
    CHECK(cosine_sim(a, -a) == Approx(-1.0).epsilon(1e-15));
    CHECK(cosine_sim(a, 7.0 * a) == Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(cosine_sim(a, Vec::Zero(3)), InputError);
    CHECK_THROWS_AS(cosine_sim(a, vec({1, 2})), InputError);
}

TEST_CASE("rep_cosine averages per-token cosines", "[repr]") {
    Rng rng(4);
    const auto a = test::random_rep(rng, {2, 3}, 4, 8);
    CHECK(rep_cosine(a, a) == Approx(1.0).epsilon(1e-14));
    const auto x = from_rows({{{1, 0, 0}, {0, 1, 0}}});
    const auto orth = from_rows({{{0, 1, 0}, {1, 0, 0}}});
    CHECK(rep_cosine(x, orth) == 0.0);
    const auto half = from_rows({{{2, 0, 0}, {0, 0, 1}}});
    CHECK(rep_cosine(x, half) == Approx(0.5).epsilon(1e-15));
    const auto other = test::random_rep(rng, {2, 3}, 5, 8);
    CHECK_THROWS_AS(rep_cosine(a, other), InputError);
}

TEST_CASE("centroid equals the mean of pooled embeddings", "[repr]") {
    const TransformerModel m(ModelConfig{});
    const std::vector<int> layers = {2, 3};
    Rng rng(8);
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < 10; ++i) seqs.push_back(test::random_tokens(rng, 3 + i % 4, 256));
    const auto c = compute_centroid(seqs, m, layers);
    CHECK(c.dataset_size == 10);
    CHECK(c.layers == layers);

    // Independent summation over raw hidden states.
    std::vector<double> oracle(64, 0.0);
    for (const auto& s : seqs) {
        const auto h = hidden_states(m, s, layers);
        test::Grid g;
        for (int l : layers) {
            std::vector<std::vector<double>> rows;
            for (Eigen::Index t = 0; t < h.at(l).rows(); ++t) {
                std::vector<double> r(64);
                for (int d = 0; d < 64; ++d) r[static_cast<std::size_t>(d)] = h.at(l)(t, d);
                rows.push_back(r);
            }
            g.push_back(rows);
        }
        const auto p = test::oracle_pool(g);
        for (int d = 0; d < 64; ++d) oracle[static_cast<std::size_t>(d)] += p[static_cast<std::size_t>(d)] / 10.0;
    }
    for (int d = 0; d < 64; ++d) CHECK(std::abs(c.vector(d) - oracle[static_cast<std::size_t>(d)]) < 1e-6);

    const auto one = compute_centroid(std::vector<std::vector<int>>{seqs[0]}, m, layers);
    CHECK(one.vector == pool(gather_representation(m, seqs[0], layers)));
    CHECK_THROWS_AS(compute_centroid(std::vector<std::vector<int>>{}, m, layers), InputError);
}

TEST_CASE("opposite pooled vectors give a zero centroid that overlap_score rejects", "[repr]") {
    OverRefusalCentroid c;
    const Vec v = vec({1, -2, 0.5});
    c.vector = (v + (-v)) / 2.0;
    c.layers = {0};
    CHECK(c.vector.norm() == 0.0);
    CHECK_THROWS_AS(overlap_score(v, c), InputError);
}

TEST_CASE("overlap_score is negative cosine to the centroid", "[repr]") {
    OverRefusalCentroid c;
    c.vector = vec({1, 2, 2});
    c.layers = {0};
    CHECK(overlap_score(c.vector, c) == Approx(-1.0).epsilon(1e-15));
    CHECK(overlap_score(vec({2, -1, 0}), c) == 0.0);
    CHECK(overlap_score(Vec(-c.vector), c) == Approx(1.0).epsilon(1e-15));
    // Scale invariance.
    const Vec p = vec({0.3, -0.7, 1.1});
    CHECK(overlap_score(Vec(3.5 * p), c) == Approx(overlap_score(p, c)).epsilon(1e-14));
}

TEST_CASE("batch_weights examples", "[repr]") {
    for (double tau : {0.1, 1.0, 7.0}) {
        const auto w = batch_weights(std::vector<double>{0.3, 0.3, 0.3, 0.3}, tau);
        for (double x : w) CHECK(x == Approx(0.25).epsilon(1e-15));
    }
    CHECK(batch_weights(std::vector<double>{-0.4}, 1.0) == std::vector<double>{1.0});
    const auto w = batch_weights(std::vector<double>{1.0, -1.0}, 1.0);
    const double e1 = std::exp(1.0), em1 = std::exp(-1.0);
    CHECK(std::abs(w[0] - e1 / (e1 + em1)) < 1e-12);
    CHECK(std::abs(w[0] - 0.8808) < 1e-4);
    CHECK(std::abs(w[1] - 0.1192) < 1e-4);
    CHECK_THROWS_AS(batch_weights(std::vector<double>{1.0}, 0.0), InputError);
    CHECK_THROWS_AS(batch_weights(std::vector<double>{1.0}, -1.0), InputError);
    CHECK_THROWS_AS(batch_weights(std::vector<double>{}, 1.0), InputError);
}

TEST_CASE("batch_weights properties", "[repr]") {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        std::vector<double> s(n);
        for (double& x : s) x = rng.uniform(-1.0, 1.0);
        const double tau = rng.uniform(0.05, 5.0);
        const auto w = batch_weights(s, tau);
        double sum = 0.0;
        for (double x : w) {
            CHECK(x > 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
        // Higher score (less overlap) never gets less weight.
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (s[i] < s[j]) CHECK(w[i] < w[j]);
        // Permutation equivariance.
        std::vector<double> rs(s.rbegin(), s.rend());
        const auto rw = batch_weights(rs, tau);
        for (std::size_t i = 0; i < n; ++i) CHECK(rw[i] == Approx(w[n - 1 - i]).epsilon(1e-14));
    }
}

TEST_CASE("batch_weights temperature limits", "[repr]") {
    const std::vector<double> s = {0.9, -0.2, 0.5, 0.9};
    const auto hot = batch_weights(s, 1e6);
    for (double x : hot) CHECK(std::abs(x - 0.25) < 1e-5);
    const auto cold = batch_weights(s, 1e-4);
    CHECK(cold[0] == Approx(0.5).epsilon(1e-12));
    CHECK(cold[3] == Approx(0.5).epsilon(1e-12));
    CHECK(cold[1] < 1e-300);
    CHECK(cold[2] < 1e-300);
}

TEST_CASE("weights fall as similarity to the centroid rises", "[repr]") {
    OverRefusalCentroid c;
    c.vector = vec({1, 0, 0});
    c.layers = {0};
    const std::vector<double> scores = {overlap_score(vec({1, 0.1, 0}), c), overlap_score(vec({0.2, 1, 0}), c),
                                        overlap_score(vec({-1, 0.3, 0}), c)};
    const auto w = batch_weights(scores, 1.0);
    CHECK(w[0] < w[1]);
    CHECK(w[1] < w[2]);
}

TEST_CASE("centroid file round-trips", "[repr]") {
    const TransformerModel m(ModelConfig{});
    const std::vector<std::vector<int>> seqs = {{1, 2, 3}, {4, 5}};
    const std::vector<int> layers = {2, 3};
    const auto c = compute_centroid(seqs, m, layers);
    const auto path = std::filesystem::temp_directory_path() / "mosr_centroid_test.json";
    save_centroid(path, c);
    const auto back = load_centroid(path);
    CHECK(back.vector == c.vector);
    CHECK(back.layers == c.layers);
    CHECK(back.dataset_size == c.dataset_size);
    CHECK(back.dataset_hash == c.dataset_hash);
    std::filesystem::remove(path);
}
