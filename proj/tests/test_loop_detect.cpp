#include <catch2/catch_amalgamated.hpp>

#include <Eigen/QR>
#include <pgslam/loop_detect.hpp>
#include <pgslam/rng.hpp>

using namespace pgslam;

namespace {

Embedding random_embedding(int dim, Xoshiro256pp& rng) {
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = rng.gaussian();
    return Embedding(v);
}

}  // namespace

TEST_CASE("discrepancy: identical, orthogonal, antipodal") {
    Eigen::VectorXd e1 = Eigen::VectorXd::Zero(4), e2 = Eigen::VectorXd::Zero(4);
    e1[0] = 1.0;
    e2[1] = 1.0;
    const Embedding a(e1), b(e2), na(Eigen::VectorXd(-e1));
    CHECK(discrepancy(a, a) == Catch::Approx(0.0).margin(1e-15));
    CHECK(discrepancy(a, b) == Catch::Approx(1.0));
    CHECK(discrepancy(a, na) == Catch::Approx(2.0));
    CHECK_THROWS_AS(Embedding(Eigen::VectorXd::Zero(4)), std::invalid_argument);
}

TEST_CASE("similarity_matrix: trivial cases and naive-oracle match") {
    Xoshiro256pp rng(301);
    std::vector<Embedding> same(5, random_embedding(8, rng));
    const SimilarityMatrix zero = similarity_matrix(same);
    CHECK(zero.s.cwiseAbs().maxCoeff() < 1e-14);

    std::vector<Embedding> rnd;
    for (int i = 0; i < 50; ++i) rnd.push_back(random_embedding(16, rng));
    const SimilarityMatrix m = similarity_matrix(rnd);
    // naive double loop, bit-exact
    for (int i = 0; i < 50; ++i)
        for (int j = 0; j < 50; ++j) {
            const double want = i == j ? 0.0 : 1.0 - rnd[i].v.dot(rnd[j].v);
            CHECK(m.s(i, j) == want);
        }
    CHECK(m.s == m.s.transpose().eval());
    CHECK((m.s.array() >= 0.0).all());
    CHECK((m.s.array() <= 2.0).all());

    CHECK_THROWS_AS(similarity_matrix({rnd[0]}), std::invalid_argument);
}

TEST_CASE("detect_loops: revisits, adjacency exclusion, strict threshold") {
    Xoshiro256pp rng(303);
    LoopDetectConfig cfg;
    cfg.zeta = 0.045;
    cfg.adjacency_exclusion = 18;

    SECTION("identical distant embeddings are detected with score 0") {
        std::vector<Embedding> es;
        for (int i = 0; i < 120; ++i) es.push_back(random_embedding(16, rng));
        es[110] = es[10];
        const auto loops = detect_loops(es, cfg);
        REQUIRE(!loops.empty());
        CHECK(loops.front().i == 10);
        CHECK(loops.front().j == 110);
        CHECK(loops.front().score == Catch::Approx(0.0).margin(1e-12));
        for (const auto& l : loops) {
            CHECK(l.i < l.j);
            CHECK(l.j - l.i > 18);
        }
    }

    SECTION("identical embeddings inside the exclusion band are not detected") {
        std::vector<Embedding> es;
        for (int i = 0; i < 40; ++i) es.push_back(random_embedding(16, rng));
        es[25] = es[20];  // |i-j| = 5 <= 18
        for (const auto& l : detect_loops(es, cfg))
            CHECK(!(l.i == 20 && l.j == 25));
    }

    SECTION("threshold comparison is strict") {
        // two exactly orthogonal embeddings 30 frames apart: score is exactly 1
        std::vector<Embedding> es;
        for (int i = 0; i < 40; ++i) es.push_back(random_embedding(16, rng));
        Eigen::VectorXd ex = Eigen::VectorXd::Zero(16), ey = Eigen::VectorXd::Zero(16);
        ex[0] = 1.0;
        ey[1] = 1.0;
        es[0] = Embedding(ex);
        es[30] = Embedding(ey);

        LoopDetectConfig at = cfg;
        at.zeta = 1.0;
        for (const auto& l : detect_loops(es, at)) CHECK(!(l.i == 0 && l.j == 30));

        LoopDetectConfig above = cfg;
        above.zeta = 1.0 + 1e-9;
        const auto loops = detect_loops(es, above);
        CHECK(std::any_of(loops.begin(), loops.end(),
                          [](const DetectedLoop& l) { return l.i == 0 && l.j == 30; }));

        LoopDetectConfig zero = cfg;
        zero.zeta = 0.0;  // outside the declared (0, 2) range
        CHECK_THROWS_AS(detect_loops(es, zero), std::invalid_argument);
    }
}

TEST_CASE("detect_loops: raising zeta never removes a pair") {
    Xoshiro256pp rng(307);
    std::vector<Embedding> es;
    for (int i = 0; i < 80; ++i) es.push_back(random_embedding(4, rng));
    LoopDetectConfig lo, hi;
    lo.adjacency_exclusion = hi.adjacency_exclusion = 5;
    lo.zeta = 0.3;
    hi.zeta = 0.9;
    const auto small = detect_loops(es, lo);
    const auto large = detect_loops(es, hi);
    for (const auto& l : small) {
        const bool found = std::any_of(large.begin(), large.end(), [&](const DetectedLoop& m) {
            return m.i == l.i && m.j == l.j;
        });
        CHECK(found);
    }
    CHECK(large.size() >= small.size());
    // sorted by score ascending
    for (size_t k = 1; k < large.size(); ++k) CHECK(large[k - 1].score <= large[k].score);
}

TEST_CASE("detect_loops is invariant under a common orthonormal transform") {
    Xoshiro256pp rng(311);
    std::vector<Embedding> es;
    for (int i = 0; i < 60; ++i) es.push_back(random_embedding(8, rng));

    Eigen::MatrixXd gauss(8, 8);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) gauss(r, c) = rng.gaussian();
    const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ();

    std::vector<Embedding> rotated;
    for (const auto& e : es) rotated.push_back(Embedding(Q * e.v));

    LoopDetectConfig cfg;
    cfg.zeta = 0.8;
    cfg.adjacency_exclusion = 3;
    const auto a = detect_loops(es, cfg);
    const auto b = detect_loops(rotated, cfg);
    REQUIRE(a.size() == b.size());
    for (size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].i == b[k].i);
        CHECK(a[k].j == b[k].j);
        CHECK(a[k].score == Catch::Approx(b[k].score).margin(1e-10));
    }
}

TEST_CASE("roc: perfect separation, random baseline, degenerate ties") {
    SECTION("separable scores give AUC 1 and full TPR at zero FPR") {
        const RocResult r = roc({0.1, 0.12, 0.9, 0.85}, {true, true, false, false});
        CHECK(r.auc == Catch::Approx(1.0));
        CHECK(r.tpr_at_fpr(0.2) == Catch::Approx(1.0));
    }

    SECTION("labels shuffled independently of scores hover near AUC 0.5") {
        Xoshiro256pp rng(313);
        std::vector<double> scores;
        std::vector<bool> labels;
        for (int i = 0; i < 10000; ++i) {
            scores.push_back(rng.uniform());
            labels.push_back(rng.uniform() < 0.5);
        }
        const RocResult r = roc(scores, labels);
        CHECK(std::abs(r.auc - 0.5) < 0.02);
    }

    SECTION("all scores equal: single operating point, AUC 0.5") {
        const RocResult r = roc({0.3, 0.3, 0.3, 0.3}, {true, false, true, false});
        CHECK(r.auc == Catch::Approx(0.5));
        REQUIRE(r.curve.size() == 2);
        CHECK(r.curve.back().fpr == Catch::Approx(1.0));
        CHECK(r.curve.back().tpr == Catch::Approx(1.0));
    }

    SECTION("degenerate labels are rejected") {
        CHECK_THROWS_AS(roc({0.1, 0.2}, {true, true}), std::invalid_argument);
        CHECK_THROWS_AS(roc({0.1, 0.2}, {false, false}), std::invalid_argument);
        CHECK_THROWS_AS(roc({0.1}, {true, false}), std::invalid_argument);
    }

    SECTION("inverted scores give AUC below 0.5") {
        const RocResult r = roc({0.9, 0.8, 0.1, 0.2}, {true, true, false, false});
        CHECK(r.auc == Catch::Approx(0.0));
    }
}
