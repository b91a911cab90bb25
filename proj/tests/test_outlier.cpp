#include <catch2/catch_amalgamated.hpp>

#include <pgslam/outlier_rejection.hpp>
#include <pgslam/simulator.hpp>

using namespace pgslam;

namespace {

WorldSpec noiseless_spec(int n_frames = 160, int max_proposals = 12) {
    WorldSpec spec;
    spec.n_frames = n_frames;
    spec.step_length = 0.5;
    spec.odom_sigma_t = 0.0;
    spec.odom_sigma_r = 0.0;
    spec.observation_noise = 0.0;
    spec.max_proposals = max_proposals;
    spec.seed = 99;
    return spec;
}

}  // namespace

TEST_CASE("cycle_residual: noiseless sub-loops close exactly") {
    const SyntheticScenario sc = generate(noiseless_spec());
    REQUIRE(sc.proposals.size() >= 2);
    for (size_t a = 0; a + 1 < sc.proposals.size(); ++a) {
        const auto r = cycle_residual(sc.proposals[a], sc.proposals[a + 1], sc.odometry);
        CHECK(r.norm() < 1e-9);
    }
}

TEST_CASE("cycle_residual: a 1 m corruption shows up at exactly 1 m") {
    const SyntheticScenario sc = generate(noiseless_spec());
    REQUIRE(sc.proposals.size() >= 2);
    const LoopProposal& a = sc.proposals[0];
    LoopProposal b = sc.proposals[1];
    b.rel.t.x() += 1.0;
    const auto r = cycle_residual(a, b, sc.odometry);
    CHECK(r.head<3>().norm() == Catch::Approx(1.0).margin(1e-9));
    CHECK(r.tail<3>().norm() < 1e-9);
}

TEST_CASE("cycle_residual is direction-symmetric") {
    WorldSpec spec = noiseless_spec();
    spec.odom_sigma_t = 0.02;
    spec.odom_sigma_r = 0.003;
    spec.seed = 17;
    const SyntheticScenario sc = generate(spec);
    REQUIRE(sc.proposals.size() >= 4);
    for (size_t a = 0; a < 4; ++a)
        for (size_t b = a + 1; b < 4; ++b) {
            const double fwd = cycle_residual(sc.proposals[a], sc.proposals[b], sc.odometry).norm();
            const double rev = cycle_residual(sc.proposals[b], sc.proposals[a], sc.odometry).norm();
            CHECK(fwd == Catch::Approx(rev).margin(1e-10));
        }
}

TEST_CASE("cycle_residual rejects out-of-range odometry indices") {
    const SyntheticScenario sc = generate(noiseless_spec());
    LoopProposal bad = sc.proposals[0];
    bad.j = sc.n_frames() + 5;
    CHECK_THROWS_AS(cycle_residual(bad, sc.proposals[1], sc.odometry), std::invalid_argument);
}

TEST_CASE("consistency_test: zero residual passes, large Mahalanobis fails") {
    const SyntheticScenario sc = generate(noiseless_spec());
    RejectionConfig cfg;
    cfg.chi2_threshold = 1e-6;  // any positive threshold admits an exact cycle
    CHECK(consistency_test(sc.proposals[0], sc.proposals[1], sc.odometry, sc.odometry_cov, cfg));

    // unit covariance everywhere, 10 m corruption: Mahalanobis^2 = 100 > 12.59
    LoopProposal a = sc.proposals[0], b = sc.proposals[1];
    a.cov.setConstant(0.5);
    b.cov.setConstant(0.5);  // loop covs alone sum to 1 per axis
    std::vector<Eigen::Matrix<double, 6, 1>> zero_cov(sc.odometry_cov.size(),
                                                      Eigen::Matrix<double, 6, 1>::Zero());
    b.rel.t.x() += 10.0;
    RejectionConfig gate;
    gate.chi2_threshold = 12.59;
    CHECK(!consistency_test(a, b, sc.odometry, zero_cov, gate));
}

TEST_CASE("consistency_test: calibrated noise passes at >= 90% under the chi2 gate") {
    int pass = 0, total = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        WorldSpec spec = noiseless_spec(200, 10);
        spec.odom_sigma_t = 0.01;
        spec.odom_sigma_r = 1e-5;
        spec.seed = seed;
        const SyntheticScenario sc = generate(spec);
        RejectionConfig cfg;
        cfg.chi2_threshold = 12.59;
        for (size_t a = 0; a < sc.proposals.size(); ++a)
            for (size_t b = a + 1; b < sc.proposals.size(); ++b) {
                ++total;
                if (consistency_test(sc.proposals[a], sc.proposals[b], sc.odometry,
                                     sc.odometry_cov, cfg))
                    ++pass;
            }
    }
    REQUIRE(total > 100);
    CHECK(static_cast<double>(pass) / total >= 0.9);
}

TEST_CASE("filter_proposals: perfect set is fully accepted at pass rate 1") {
    const SyntheticScenario sc = generate(noiseless_spec());
    RejectionConfig cfg;
    const FilterResult res = filter_proposals(sc.proposals, sc.odometry, sc.odometry_cov, cfg);
    CHECK(res.inliers.size() == sc.proposals.size());
    CHECK(res.outliers.empty());
    for (const double pr : res.pass_rates) CHECK(pr == 1.0);
}

TEST_CASE("filter_proposals: a single 2 m outlier is rejected, the rest retained") {
    WorldSpec spec = noiseless_spec(200, 10);
    spec.odom_sigma_t = 0.005;
    spec.odom_sigma_r = 1e-5;
    spec.seed = 7;
    SyntheticScenario sc = generate(spec);
    REQUIRE(sc.proposals.size() == 10);
    sc.proposals[4].rel.t.y() += 2.0;

    RejectionConfig cfg;
    const FilterResult res = filter_proposals(sc.proposals, sc.odometry, sc.odometry_cov, cfg);
    CHECK(res.pass_rates[4] == 0.0);
    CHECK(!res.inlier_mask[4]);
    for (size_t k = 0; k < sc.proposals.size(); ++k)
        if (k != 4) CHECK(res.inlier_mask[k]);
}

TEST_CASE("filter_proposals: degenerate inputs and determinism") {
    const SyntheticScenario sc = generate(noiseless_spec());
    RejectionConfig cfg;

    const FilterResult empty = filter_proposals({}, sc.odometry, sc.odometry_cov, cfg);
    CHECK(empty.inliers.empty());
    CHECK(empty.outliers.empty());
    CHECK(empty.trivially_passed);

    const FilterResult one =
        filter_proposals({sc.proposals[0]}, sc.odometry, sc.odometry_cov, cfg);
    CHECK(one.inliers.size() == 1);
    CHECK(one.trivially_passed);

    const FilterResult a = filter_proposals(sc.proposals, sc.odometry, sc.odometry_cov, cfg);
    const FilterResult b = filter_proposals(sc.proposals, sc.odometry, sc.odometry_cov, cfg);
    CHECK(a.pass_rates == b.pass_rates);
}

TEST_CASE("filter_proposals is monotone in the pass-rate threshold") {
    WorldSpec spec = noiseless_spec(200, 14);
    spec.odom_sigma_t = 0.02;
    spec.odom_sigma_r = 0.002;
    spec.false_loop_rate = 0.3;
    spec.false_loop_offset = 0.6;
    spec.seed = 23;
    const SyntheticScenario sc = generate(spec);

    RejectionConfig lo, hi;
    lo.pass_rate_threshold = 0.4;
    hi.pass_rate_threshold = 0.8;
    const FilterResult rlo = filter_proposals(sc.proposals, sc.odometry, sc.odometry_cov, lo);
    const FilterResult rhi = filter_proposals(sc.proposals, sc.odometry, sc.odometry_cov, hi);
    for (size_t k = 0; k < sc.proposals.size(); ++k)
        if (!rlo.inlier_mask[k]) CHECK(!rhi.inlier_mask[k]);
    CHECK(rlo.pass_rates == rhi.pass_rates);  // same seed, same schedule
}
