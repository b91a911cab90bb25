#pragma once

// Pairwise geometric-consistency validation of loop closure proposals. Two
// proposals plus the odometry between their endpoints form a closed sub-loop;
// if the cycle fails to close within a chi-squared gate on the covariance-
// weighted residual, at least one proposal is wrong. Proposals are scored by
// the fraction of sampled pairings they pass and rejected below a pass-rate
// threshold.

#include <Eigen/Core>
#include <algorithm>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"
#include "rng.hpp"

namespace pgslam {

// Candidate loop closure: frame j expressed in frame i's coordinates, with a
// diagonal measurement covariance and the detection discrepancy score.
struct LoopProposal {
    int i = 0, j = 0;  // i < j
    Pose6 rel;
    Eigen::Matrix<double, 6, 1> cov = Eigen::Matrix<double, 6, 1>::Ones();
    double score = 0.0;

    void validate() const {
        if (i >= j) throw std::invalid_argument("LoopProposal: requires i < j");
        if (!(cov.array() > 0.0).all())
            throw std::invalid_argument("LoopProposal: covariance entries must be positive");
    }
};

struct RejectionConfig {
    double chi2_threshold = 12.59;     // chi-squared, 6 DoF, 95%
    double pass_rate_threshold = 0.6;
    int max_pairings_per_proposal = 10;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(chi2_threshold > 0.0))
            throw std::invalid_argument("RejectionConfig: chi2_threshold must be > 0");
        if (!(pass_rate_threshold > 0.0) || pass_rate_threshold > 1.0)
            throw std::invalid_argument("RejectionConfig: pass_rate_threshold must be in (0, 1]");
        if (max_pairings_per_proposal < 1)
            throw std::invalid_argument("RejectionConfig: max_pairings_per_proposal must be >= 1");
    }
};

namespace detail {

// Pose of frame `to` in frame `from`, composed from the odometry chain
// odom[k] = pose of frame k+1 in frame k. Reverse segments use inverted steps.
inline Pose6 odometry_chain(const std::vector<Pose6>& odom, int from, int to) {
    const int n_frames = static_cast<int>(odom.size()) + 1;
    if (from < 0 || to < 0 || from >= n_frames || to >= n_frames)
        throw std::invalid_argument("odometry_chain: frame index out of range");
    Pose6 acc;
    if (from <= to) {
        for (int k = from; k < to; ++k) acc = compose(acc, odom[k]);
    } else {
        for (int k = from - 1; k >= to; --k) acc = compose(acc, inverse(odom[k]));
    }
    return acc;
}

// Summed diagonal covariance along the odometry chain between two frames.
inline Eigen::Matrix<double, 6, 1> odometry_cov_sum(
    const std::vector<Eigen::Matrix<double, 6, 1>>& odom_cov, int from, int to) {
    Eigen::Matrix<double, 6, 1> acc = Eigen::Matrix<double, 6, 1>::Zero();
    const int lo = std::min(from, to), hi = std::max(from, to);
    for (int k = lo; k < hi; ++k) acc += odom_cov[k];
    return acc;
}

}  // namespace detail

// Residual of the closed cycle a.i -> (loop a) -> a.j -> odometry -> b.j ->
// (inverse loop b) -> b.i -> odometry -> a.i, as a (translation, wrapped
// Euler) 6-vector. Zero for perfectly consistent inputs. The traversal is
// canonicalized to start at the lower anchor frame, so swapping the two
// proposals yields the identical residual.
inline Eigen::Matrix<double, 6, 1> cycle_residual(const LoopProposal& a, const LoopProposal& b,
                                                  const std::vector<Pose6>& odom) {
    a.validate();
    b.validate();
    if (std::pair{b.i, b.j} < std::pair{a.i, a.j}) return cycle_residual(b, a, odom);
    Pose6 cycle = a.rel;
    cycle = compose(cycle, detail::odometry_chain(odom, a.j, b.j));
    cycle = compose(cycle, inverse(b.rel));
    cycle = compose(cycle, detail::odometry_chain(odom, b.i, a.i));
    return cycle.vec();
}

// Chi-squared gate on the covariance-weighted squared cycle residual. The
// information matrix is the inverse of both loops' covariances plus the
// summed odometry covariance along the two connecting segments.
inline bool consistency_test(const LoopProposal& a, const LoopProposal& b,
                             const std::vector<Pose6>& odom,
                             const std::vector<Eigen::Matrix<double, 6, 1>>& odom_cov,
                             const RejectionConfig& cfg) {
    cfg.validate();
    const Eigen::Matrix<double, 6, 1> r = cycle_residual(a, b, odom);
    Eigen::Matrix<double, 6, 1> cov = a.cov + b.cov;
    cov += detail::odometry_cov_sum(odom_cov, a.j, b.j);
    cov += detail::odometry_cov_sum(odom_cov, b.i, a.i);
    const double mahal2 = (r.array().square() / cov.array()).sum();
    return mahal2 <= cfg.chi2_threshold;
}

struct FilterResult {
    std::vector<LoopProposal> inliers;
    std::vector<LoopProposal> outliers;
    std::vector<double> pass_rates;       // per input proposal, input order
    std::vector<bool> inlier_mask;        // per input proposal
    bool trivially_passed = false;        // fewer than 2 proposals, nothing to test
};

// Tests each proposal against up to max_pairings_per_proposal sampled
// partners. A passing pairing counts as a pass for both participants; the
// pass rate is passes over trials across every pairing a proposal appears
// in. The pairing schedule is drawn up front from the seed, so results are
// deterministic regardless of evaluation order.
inline FilterResult filter_proposals(const std::vector<LoopProposal>& proposals,
                                     const std::vector<Pose6>& odom,
                                     const std::vector<Eigen::Matrix<double, 6, 1>>& odom_cov,
                                     const RejectionConfig& cfg) {
    cfg.validate();
    FilterResult result;
    const int n = static_cast<int>(proposals.size());
    if (n < 2) {
        result.trivially_passed = true;
        result.inliers = proposals;
        result.pass_rates.assign(n, 1.0);
        result.inlier_mask.assign(n, true);
        return result;
    }
    for (const auto& p : proposals) p.validate();

    Xoshiro256pp rng(cfg.seed);
    std::vector<std::pair<int, int>> schedule;
    schedule.reserve(static_cast<size_t>(n) * cfg.max_pairings_per_proposal);
    for (int i = 0; i < n; ++i)
        for (int trial = 0; trial < cfg.max_pairings_per_proposal; ++trial) {
            int partner = static_cast<int>(rng.uniform_int(n - 1));
            if (partner >= i) ++partner;  // never self-pair
            schedule.emplace_back(i, partner);
        }

    std::vector<int> trials(n, 0), passes(n, 0);
    for (const auto& [i, j] : schedule) {
        const auto& pa = proposals[i];
        const auto& pb = proposals[j];
        const bool ok = pa.i <= pb.i ? consistency_test(pa, pb, odom, odom_cov, cfg)
                                     : consistency_test(pb, pa, odom, odom_cov, cfg);
        for (const int p : {i, j}) {
            ++trials[p];
            if (ok) ++passes[p];
        }
    }

    result.pass_rates.resize(n);
    result.inlier_mask.resize(n);
    for (int i = 0; i < n; ++i) {
        result.pass_rates[i] =
            trials[i] > 0 ? static_cast<double>(passes[i]) / trials[i] : 1.0;
        result.inlier_mask[i] = result.pass_rates[i] >= cfg.pass_rate_threshold;
        (result.inlier_mask[i] ? result.inliers : result.outliers).push_back(proposals[i]);
    }
    return result;
}

}  // namespace pgslam
