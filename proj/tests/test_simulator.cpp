#include <catch2/catch_amalgamated.hpp>

#include <pgslam/metrics.hpp>
#include <pgslam/pose_graph.hpp>
#include <pgslam/simulator.hpp>

using namespace pgslam;

TEST_CASE("noiseless generation: dead reckoning reproduces ground truth exactly") {
    WorldSpec spec;
    spec.odom_sigma_t = 0.0;
    spec.odom_sigma_r = 0.0;
    spec.seed = 1;
    const SyntheticScenario sc = generate(spec);
    const auto dead = compose_dead_reckoning(sc.odometry);
    REQUIRE(dead.size() == sc.gt_trajectory.size());
    CHECK(ate(dead, sc.gt_trajectory, false) < 1e-9);
}

TEST_CASE("square loop guarantees a distant revisit pair") {
    WorldSpec spec;
    spec.seed = 7;
    const SyntheticScenario sc = generate(spec);
    REQUIRE(!sc.true_loops.empty());
    bool distant = false;
    for (const auto& tl : sc.true_loops) {
        CHECK(tl.i < tl.j);
        if (tl.j - tl.i > 18) distant = true;
        // stored relative pose is exact
        const Pose6 want = relative(sc.gt_trajectory[tl.i], sc.gt_trajectory[tl.j]);
        CHECK((tl.rel.vec() - want.vec()).cwiseAbs().maxCoeff() < 1e-15);
    }
    CHECK(distant);
}

TEST_CASE("identical seeds produce bit-identical scenarios") {
    WorldSpec spec;
    spec.odom_sigma_t = 0.02;
    spec.odom_sigma_r = 0.005;
    spec.false_loop_rate = 0.25;
    spec.seed = 99;
    const SyntheticScenario a = generate(spec), b = generate(spec);
    REQUIRE(a.odometry.size() == b.odometry.size());
    for (size_t k = 0; k < a.odometry.size(); ++k)
        CHECK(a.odometry[k].vec() == b.odometry[k].vec());
    for (size_t k = 0; k < a.observations.size(); ++k)
        CHECK(a.observations[k] == b.observations[k]);
    REQUIRE(a.proposals.size() == b.proposals.size());
    for (size_t k = 0; k < a.proposals.size(); ++k)
        CHECK(a.proposals[k].rel.vec() == b.proposals[k].rel.vec());
    CHECK(a.proposal_is_true == b.proposal_is_true);

    WorldSpec other = spec;
    other.seed = 100;
    const SyntheticScenario c = generate(other);
    CHECK(a.odometry[0].vec() != c.odometry[0].vec());
}

TEST_CASE("turn and NUC windows scale the stored covariance") {
    WorldSpec spec;
    spec.odom_sigma_t = 0.01;
    spec.odom_sigma_r = 0.002;
    spec.turn_noise_multiplier = 5.0;
    spec.nuc_intervals = {{10, 20, 8.0}};
    spec.seed = 3;
    const SyntheticScenario sc = generate(spec);

    int turns = 0;
    for (size_t k = 0; k < sc.odometry.size(); ++k) {
        double mult = sc.step_turn_flag[k] ? 5.0 : 1.0;
        if (k >= 10 && k < 20) mult *= 8.0;
        const double want_t = std::pow(0.01 * mult, 2);
        CHECK(sc.odometry_cov[k][0] == Catch::Approx(want_t).epsilon(1e-12));
        if (sc.step_turn_flag[k]) ++turns;
        CHECK(sc.step_nuc_flag[k] == (k >= 10 && k < 20));
    }
    CHECK(turns > 0);
    CHECK(turns < static_cast<int>(sc.odometry.size()) / 2);
}

TEST_CASE("injected false proposals violate cycle consistency by the offset") {
    WorldSpec spec;
    spec.odom_sigma_t = 0.0;
    spec.odom_sigma_r = 0.0;
    spec.false_loop_rate = 0.3;
    spec.false_loop_offset = 1.5;
    spec.max_proposals = 20;
    spec.seed = 13;
    const SyntheticScenario sc = generate(spec);

    int n_false = 0;
    const LoopProposal* good = nullptr;
    for (size_t k = 0; k < sc.proposals.size(); ++k)
        if (sc.proposal_is_true[k]) {
            good = &sc.proposals[k];
            break;
        }
    REQUIRE(good != nullptr);
    for (size_t k = 0; k < sc.proposals.size(); ++k) {
        if (sc.proposal_is_true[k]) continue;
        ++n_false;
        const auto r = cycle_residual(*good, sc.proposals[k], sc.odometry);
        CHECK(r.head<3>().norm() >= 1.5 - 1e-9);
    }
    CHECK(n_false == 6);  // 30% of 20
}

TEST_CASE("all world shapes generate, respect n_frames, and revisit places") {
    for (const WorldShape shape :
         {WorldShape::square_loop, WorldShape::figure_eight, WorldShape::corridor_uturn}) {
        WorldSpec spec;
        spec.shape = shape;
        spec.n_frames = 240;
        spec.seed = 21;
        const SyntheticScenario sc = generate(spec);
        CHECK(sc.n_frames() == 240);
        CHECK(sc.odometry.size() == 239);
        CHECK(sc.observations.size() == 240);
        CHECK(!sc.true_loops.empty());
        // revisits share observations: identical place signatures up to noise
        const auto& tl = sc.true_loops.front();
        const double d =
            1.0 - sc.observations[tl.i].normalized().dot(sc.observations[tl.j].normalized());
        CHECK(d < 0.05);
    }
}

TEST_CASE("gt_loop_labels matches a brute-force scan and excludes i == j") {
    WorldSpec spec;
    spec.n_frames = 90;
    spec.seed = 31;
    const SyntheticScenario sc = generate(spec);
    const auto labels = gt_loop_labels(sc, 0.5, 0.2);
    CHECK(labels.size() == 90 * 89 / 2);

    size_t idx = 0;
    int positives = 0;
    for (int i = 0; i < 90; ++i)
        for (int j = i + 1; j < 90; ++j, ++idx) {
            CHECK(labels[idx].i == i);
            CHECK(labels[idx].j == j);
            const bool want =
                (sc.gt_trajectory[i].t - sc.gt_trajectory[j].t).norm() <= 0.5 &&
                std::abs(wrap_angle(sc.gt_trajectory[i].r.z() - sc.gt_trajectory[j].r.z())) <= 0.2;
            CHECK(labels[idx].positive == want);
            if (labels[idx].positive) ++positives;
        }
    CHECK(positives > 0);

    CHECK_THROWS_AS(gt_loop_labels(sc, 0.0, 0.2), std::invalid_argument);
}

TEST_CASE("coincident poses label positive") {
    WorldSpec spec;
    spec.n_frames = 120;  // two full laps: lap-aligned frames coincide exactly
    spec.seed = 5;
    const SyntheticScenario sc = generate(spec);
    const auto labels = gt_loop_labels(sc, 1e-6, 1e-6);
    bool any = false;
    for (const auto& l : labels)
        if (l.positive) any = true;
    CHECK(any);
}

TEST_CASE("regression data helpers have the documented shapes") {
    WorldSpec spec;
    spec.turn_noise_multiplier = 4.0;
    spec.seed = 17;
    const SyntheticScenario sc = generate(spec);
    const auto data = odometry_regression_data(sc);
    REQUIRE(data.size() == sc.odometry.size());
    CHECK(data.front().first.size() == 8);
    for (size_t k = 0; k < data.size(); ++k)
        CHECK(data[k].second.vec() == sc.odometry[k].vec());

    const auto mm = multimodal_regression_data(300, 9);
    CHECK(mm.size() == 300);
    int lo = 0, hi = 0;
    for (const auto& [f, pose] : mm) (pose.t.x() < 0 ? lo : hi)++;
    CHECK(lo > 90);
    CHECK(hi > 90);

    const auto mm2 = multimodal_regression_data(300, 9);
    for (size_t k = 0; k < mm.size(); ++k) CHECK(mm[k].second.vec() == mm2[k].second.vec());
}

TEST_CASE("invalid world specs are rejected") {
    WorldSpec spec;
    spec.n_frames = 1;
    CHECK_THROWS_AS(generate(spec), std::invalid_argument);
    spec = WorldSpec{};
    spec.false_loop_rate = 1.0;
    CHECK_THROWS_AS(generate(spec), std::invalid_argument);
    spec = WorldSpec{};
    spec.nuc_intervals = {{30, 10, 2.0}};
    CHECK_THROWS_AS(generate(spec), std::invalid_argument);
}
