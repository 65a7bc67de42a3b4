#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dhn/cel.hpp"

namespace {

std::string data_path(const std::string& f) { return std::string(DHN_DATA_DIR "/") + f; }

// Synthetic separable dataset: label 1 iff feature 0 is set.
void make_separable(int n, int nf, std::vector<std::vector<std::uint8_t>>& X,
                    std::vector<std::uint8_t>& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    X.assign(n, std::vector<std::uint8_t>(nf, 0));
    y.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        for (int f = 0; f < nf; ++f) X[i][f] = rng() & 1;
        y[i] = X[i][0];
    }
}

}  // namespace

TEST_CASE("awareness features: one bit per unordered pair of non-plant elements") {
    auto topo = dhn::load_network(data_path("four_user.json"));
    auto f_all = dhn::extract_features(dhn::single_block_partition(topo.comp), topo);
    REQUIRE(f_all.size() == 91);  // 14 choose 2
    for (auto b : f_all) CHECK(b == 1);

    // All singletons: no pair shares a block.
    std::vector<std::vector<int>> singles;
    for (int e : dhn::decomposable_nodes(topo)) singles.push_back({e});
    singles.front().push_back(topo.comp.plant_in());  // keep v0- attached
    auto f_none = dhn::extract_features(dhn::Partition(singles), topo);
    REQUIRE(f_none.size() == 91);
    int ones = 0;
    for (auto b : f_none) ones += b;
    CHECK(ones == 0);

    auto topo2 = dhn::load_network(data_path("two_user.json"));
    CHECK(dhn::extract_features(dhn::single_block_partition(topo2.comp), topo2).size() == 15);
}

TEST_CASE("feature order is lexicographic in element ids") {
    auto topo = dhn::load_network(data_path("two_user.json"));
    // Pair (1,2) shares a block, everything else split off.
    dhn::Partition p({{0, 1, 2}, {3}, {4, 5, 6}});
    auto f = dhn::extract_features(p, topo);
    // Non-plant nodes are 1..6; pairs in order: (1,2),(1,3),(1,4),(1,5),(1,6),(2,3)...
    CHECK(f[0] == 1);   // (1,2) together
    CHECK(f[1] == 0);   // (1,3)
    CHECK(f[2] == 0);   // (1,4)
    // (4,5) is pair index 12, (4,6) 13, (5,6) 14.
    CHECK(f[12] == 1);
    CHECK(f[13] == 1);
    CHECK(f[14] == 1);
}

TEST_CASE("training is deterministic for a fixed seed") {
    std::vector<std::vector<std::uint8_t>> X;
    std::vector<std::uint8_t> y;
    make_separable(300, 10, X, y, 17);
    dhn::CelConfig cfg;
    cfg.seed = 9;
    auto m1 = dhn::train_cel(X, y, cfg);
    auto m2 = dhn::train_cel(X, y, cfg);
    CHECK(m1.to_json() == m2.to_json());
    CHECK(m1.num_trees() == 60);

    cfg.seed = 10;
    auto m3 = dhn::train_cel(X, y, cfg);
    CHECK(m1.to_json() != m3.to_json());
}

TEST_CASE("a separable problem is learned perfectly") {
    std::vector<std::vector<std::uint8_t>> X;
    std::vector<std::uint8_t> y;
    make_separable(400, 8, X, y, 23);
    auto m = dhn::train_cel(X, y, {});
    auto r = dhn::cel_metrics(m, X, y);
    CHECK(r.accuracy == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.precision == 1.0);
}

TEST_CASE("single-class training yields a constant classifier") {
    std::vector<std::vector<std::uint8_t>> X(20, std::vector<std::uint8_t>(5, 1));
    std::vector<std::uint8_t> y(20, 1);
    auto m = dhn::train_cel(X, y, {});
    CHECK(m.constant());
    CHECK(m.trained());
    CHECK(m.predict(X[0]).first);
    CHECK(m.predict(X[0]).second == 1.0);

    std::vector<std::uint8_t> y0(20, 0);
    auto m0 = dhn::train_cel(X, y0, {});
    CHECK_FALSE(m0.predict(X[0]).first);
}

TEST_CASE("false-negative weighting biases predictions toward the positive class") {
    // Noisy data: feature 0 is only 70% predictive.
    std::mt19937_64 rng(31);
    std::vector<std::vector<std::uint8_t>> X;
    std::vector<std::uint8_t> y;
    for (int i = 0; i < 600; ++i) {
        std::vector<std::uint8_t> x(6);
        for (auto& b : x) b = rng() & 1;
        std::uint8_t label = (rng() % 10 < 7) ? x[0] : !x[0];
        X.push_back(x);
        y.push_back(label);
    }
    dhn::CelConfig weighted;  // 4:1
    dhn::CelConfig flat;
    flat.fn_cost = 1.0;
    auto rw = dhn::cel_metrics(dhn::train_cel(X, y, weighted), X, y);
    auto rf = dhn::cel_metrics(dhn::train_cel(X, y, flat), X, y);
    CHECK(rw.recall >= rf.recall);
}

TEST_CASE("model serialization round-trips") {
    std::vector<std::vector<std::uint8_t>> X;
    std::vector<std::uint8_t> y;
    make_separable(200, 7, X, y, 41);
    auto m = dhn::train_cel(X, y, {});
    auto m2 = dhn::CelModel::from_json(m.to_json());
    for (int i = 0; i < 50; ++i) {
        auto [p1, s1] = m.predict(X[i]);
        auto [p2, s2] = m2.predict(X[i]);
        CHECK(p1 == p2);
        CHECK(s1 == Catch::Approx(s2));
    }
    CHECK_THROWS_AS(m.predict(std::vector<std::uint8_t>(3, 0)), dhn::ConfigError);
}

TEST_CASE("metrics arithmetic on a fixed confusion matrix") {
    // Model that always answers positive; 1 positive in 16 samples.
    std::vector<std::vector<std::uint8_t>> X(16, std::vector<std::uint8_t>(4, 1));
    std::vector<std::uint8_t> y(16, 0);
    y[5] = 1;
    auto m = dhn::train_cel(std::vector<std::vector<std::uint8_t>>(4, {1, 1, 1, 1}),
                            std::vector<std::uint8_t>(4, 1), {});  // constant positive
    auto r = dhn::cel_metrics(m, X, y);
    CHECK(r.tp == 1);
    CHECK(r.fp == 15);
    CHECK(r.tn == 0);
    CHECK(r.fn == 0);
    CHECK(r.accuracy == Catch::Approx(1.0 / 16.0));
    CHECK(r.precision == Catch::Approx(1.0 / 16.0));
    CHECK(r.recall == 1.0);
    CHECK(r.precision_defined);
    CHECK(r.recall_defined);

    // All-negative truth: recall undefined.
    std::vector<std::uint8_t> yn(16, 0);
    auto rn = dhn::cel_metrics(m, X, yn);
    CHECK_FALSE(rn.recall_defined);

    CHECK_THROWS_AS(dhn::cel_metrics(m, {}, {}), dhn::ConfigError);
}

TEST_CASE("training input validation") {
    CHECK_THROWS_AS(dhn::train_cel({}, {}, {}), dhn::ConfigError);
    std::vector<std::vector<std::uint8_t>> X(3, std::vector<std::uint8_t>(2, 0));
    std::vector<std::uint8_t> y(2, 0);
    CHECK_THROWS_AS(dhn::train_cel(X, y, {}), dhn::ConfigError);
}
