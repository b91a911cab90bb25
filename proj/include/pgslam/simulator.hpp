#pragma once

// Deterministic synthetic worlds standing in for the sensor stack: exact
// planar ground-truth trajectories that retrace themselves, heteroscedastic
// per-step odometry noise (elevated on turns and inside NUC-style dropout
// windows), place-grid observations whose signatures repeat on revisit,
// exact true loop pairs, and injected false loop proposals.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "outlier_rejection.hpp"
#include "rng.hpp"
#include "train.hpp"

namespace pgslam {

enum class WorldShape { square_loop, figure_eight, corridor_uturn };

inline std::string to_string(WorldShape s) {
    switch (s) {
        case WorldShape::square_loop: return "square_loop";
        case WorldShape::figure_eight: return "figure_eight";
        case WorldShape::corridor_uturn: return "corridor_uturn";
    }
    throw std::invalid_argument("unknown WorldShape");
}

inline WorldShape world_shape_from_string(const std::string& s) {
    if (s == "square_loop") return WorldShape::square_loop;
    if (s == "figure_eight") return WorldShape::figure_eight;
    if (s == "corridor_uturn") return WorldShape::corridor_uturn;
    throw std::invalid_argument("unknown world shape: " + s);
}

// High-noise window over step indices [start, end), e.g. a thermal-camera
// recalibration pause.
struct NucInterval {
    int start = 0, end = 0;
    double multiplier = 1.0;
};

struct WorldSpec {
    WorldShape shape = WorldShape::square_loop;
    int n_frames = 200;
    double step_length = 0.25;     // m per frame
    double odom_sigma_t = 0.02;    // m, per-axis translation noise per step
    double odom_sigma_r = 0.00873; // rad, per-axis rotation noise per step (~0.5 deg)
    double turn_noise_multiplier = 1.0;
    std::vector<NucInterval> nuc_intervals;
    double place_grid_resolution = 0.5;  // m
    double observation_noise = 0.05;
    // amplitude of per-frame energy in 8 extra descriptor dimensions that
    // carry no place information (transient scene content); 0 disables them.
    // Raw cosine matching degrades as this grows; a trained projector learns
    // to suppress the subspace.
    double observation_nuisance = 0.0;
    double loop_noise_multiplier = 1.0;  // loop measurement noise, in units of odom sigma
    // factor by which the REPORTED loop covariance overstates the true
    // sampling noise; neural loop-closure covariances are conservative, and
    // the rho balance exists to compensate exactly this
    double loop_cov_overestimate = 1.0;
    double false_loop_rate = 0.0;   // fraction of emitted proposals that are false
    double false_loop_offset = 1.0; // m, translation corruption of false proposals
    int max_proposals = 40;         // cap on emitted proposals; 0 = no cap
    std::uint64_t seed = 1;

    void validate() const {
        if (n_frames < 2) throw std::invalid_argument("WorldSpec: n_frames must be >= 2");
        if (!(step_length > 0.0)) throw std::invalid_argument("WorldSpec: step_length must be > 0");
        if (odom_sigma_t < 0.0 || odom_sigma_r < 0.0 || observation_noise < 0.0 ||
            observation_nuisance < 0.0)
            throw std::invalid_argument("WorldSpec: noise sigmas must be >= 0");
        if (turn_noise_multiplier < 0.0)
            throw std::invalid_argument("WorldSpec: turn_noise_multiplier must be >= 0");
        if (!(place_grid_resolution > 0.0))
            throw std::invalid_argument("WorldSpec: place_grid_resolution must be > 0");
        if (loop_noise_multiplier < 0.0)
            throw std::invalid_argument("WorldSpec: loop_noise_multiplier must be >= 0");
        if (!(loop_cov_overestimate > 0.0))
            throw std::invalid_argument("WorldSpec: loop_cov_overestimate must be > 0");
        if (false_loop_rate < 0.0 || false_loop_rate >= 1.0)
            throw std::invalid_argument("WorldSpec: false_loop_rate must be in [0, 1)");
        if (false_loop_offset < 0.0)
            throw std::invalid_argument("WorldSpec: false_loop_offset must be >= 0");
        if (max_proposals < 0) throw std::invalid_argument("WorldSpec: max_proposals must be >= 0");
        for (const auto& iv : nuc_intervals)
            if (iv.start < 0 || iv.end < iv.start || iv.multiplier < 0.0)
                throw std::invalid_argument("WorldSpec: malformed nuc interval");
    }
};

struct TrueLoop {
    int i = 0, j = 0;
    Pose6 rel;  // exact relative(gt_i, gt_j)
};

struct SyntheticScenario {
    std::vector<Pose6> gt_trajectory;                      // n frames
    std::vector<Pose6> odometry;                           // n-1 measured steps
    std::vector<Eigen::Matrix<double, 6, 1>> odometry_cov; // n-1 true covariances
    std::vector<bool> step_turn_flag;                      // n-1, elevated turn noise
    std::vector<bool> step_nuc_flag;                       // n-1, inside a NUC window
    std::vector<Eigen::VectorXd> observations;             // n feature vectors
    std::vector<TrueLoop> true_loops;
    std::vector<LoopProposal> proposals;                   // true + injected false
    std::vector<bool> proposal_is_true;                    // parallel to proposals

    int n_frames() const { return static_cast<int>(gt_trajectory.size()); }
};

namespace detail {

constexpr int kPlaceSignatureDim = 16;
constexpr int kNuisanceDim = 8;
constexpr int kMinLoopSeparation = 18;  // frames; matches the adjacency default
constexpr double kCovarianceFloor = 1e-12;

struct Command {
    double forward;  // m
    double dyaw;     // rad
};

// One period of the motion program; repeated cyclically until n-1 steps.
inline std::vector<Command> motion_period(const WorldSpec& spec) {
    const int steps = spec.n_frames - 1;
    const auto segment = [&](std::vector<Command>& prog, int n, double total_dyaw) {
        for (int k = 0; k < n; ++k) prog.push_back({spec.step_length, total_dyaw / n});
    };
    std::vector<Command> prog;
    switch (spec.shape) {
        case WorldShape::square_loop: {
            // two laps around a rounded square; the second lap retraces the first
            const int per_lap = std::max(8, steps / 2);
            const int quarter = std::max(2, per_lap / 4);
            const int turn = std::max(1, quarter / 6);
            for (int side = 0; side < 4; ++side) {
                segment(prog, quarter - turn, 0.0);
                segment(prog, turn, M_PI / 2.0);
            }
            break;
        }
        case WorldShape::figure_eight: {
            const int per_lobe = std::max(16, steps / 4);
            const int quarter = std::max(2, per_lobe / 4);
            const int turn = std::max(1, quarter / 6);
            for (int lobe = 0; lobe < 2; ++lobe)
                for (int side = 0; side < 4; ++side) {
                    segment(prog, quarter - turn, 0.0);
                    segment(prog, turn, lobe == 0 ? M_PI / 2.0 : -M_PI / 2.0);
                }
            break;
        }
        case WorldShape::corridor_uturn: {
            const int per_leg = std::max(8, steps / 4);
            const int turn = std::max(2, per_leg / 4);
            for (int leg = 0; leg < 2; ++leg) {
                segment(prog, per_leg - turn, 0.0);
                segment(prog, turn, M_PI);
            }
            break;
        }
    }
    return prog;
}

inline Eigen::VectorXd place_signature(std::uint64_t world_seed, long cx, long cy, int octant) {
    std::uint64_t h = hash_combine(world_seed, 0x9e3779b97f4a7c15ULL);
    h = hash_combine(h, static_cast<std::uint64_t>(cx) * 0x100000001b3ULL);
    h = hash_combine(h, static_cast<std::uint64_t>(cy) * 0xc2b2ae3d27d4eb4fULL);
    h = hash_combine(h, static_cast<std::uint64_t>(octant));
    Xoshiro256pp rng(h);
    Eigen::VectorXd sig(kPlaceSignatureDim);
    for (int d = 0; d < kPlaceSignatureDim; ++d) sig[d] = rng.gaussian();
    return sig;
}

// floor() that tolerates accumulated float drift: revisit poses land within
// ~1e-12 of the original lattice values, which must not flip the cell when
// the true value sits exactly on a boundary.
inline long stable_floor(double ratio) {
    const double q = std::round(ratio * 1e6) / 1e6;
    return static_cast<long>(std::floor(q + 1e-7));
}

inline int heading_octant(double yaw) {
    // bucket centers at multiples of 45 degrees
    const long oct = stable_floor(wrap_angle(yaw) / (M_PI / 4.0) + 0.5);
    return static_cast<int>(((oct % 8) + 8) % 8);
}

}  // namespace detail

inline SyntheticScenario generate(const WorldSpec& spec) {
    spec.validate();
    const int n = spec.n_frames;
    const int steps = n - 1;

    SyntheticScenario sc;

    // ground truth: repeat the motion program cyclically
    const std::vector<detail::Command> period = detail::motion_period(spec);
    std::vector<detail::Command> cmds(steps);
    for (int k = 0; k < steps; ++k) cmds[k] = period[k % period.size()];

    sc.gt_trajectory.push_back(Pose6());
    for (int k = 0; k < steps; ++k) {
        const Pose6 step(cmds[k].forward, 0.0, 0.0, 0.0, 0.0, cmds[k].dyaw);
        sc.gt_trajectory.push_back(compose(sc.gt_trajectory.back(), step));
    }

    // turn flags: |yaw rate| strictly above its 75th percentile
    std::vector<double> rates(steps);
    for (int k = 0; k < steps; ++k) rates[k] = std::abs(cmds[k].dyaw);
    std::vector<double> sorted = rates;
    std::sort(sorted.begin(), sorted.end());
    const double p75 = sorted[static_cast<size_t>(0.75 * (steps - 1))];

    sc.step_turn_flag.resize(steps);
    sc.step_nuc_flag.resize(steps);
    for (int k = 0; k < steps; ++k) {
        sc.step_turn_flag[k] = rates[k] > p75;
        bool nuc = false;
        for (const auto& iv : spec.nuc_intervals)
            if (k >= iv.start && k < iv.end) nuc = true;
        sc.step_nuc_flag[k] = nuc;
    }

    // noisy odometry with per-step scaled covariance
    Xoshiro256pp odom_rng(hash_combine(spec.seed, 1));
    for (int k = 0; k < steps; ++k) {
        double mult = sc.step_turn_flag[k] ? spec.turn_noise_multiplier : 1.0;
        for (const auto& iv : spec.nuc_intervals)
            if (k >= iv.start && k < iv.end) mult *= iv.multiplier;
        const double st = spec.odom_sigma_t * mult;
        const double sr = spec.odom_sigma_r * mult;
        const Pose6 true_step = relative(sc.gt_trajectory[k], sc.gt_trajectory[k + 1]);
        Eigen::Matrix<double, 6, 1> v = true_step.vec();
        for (int d = 0; d < 3; ++d) v[d] += odom_rng.gaussian(0.0, st);
        for (int d = 3; d < 6; ++d) v[d] += odom_rng.gaussian(0.0, sr);
        sc.odometry.push_back(Pose6::from_vec(v));
        Eigen::Matrix<double, 6, 1> cov;
        cov << st * st, st * st, st * st, sr * sr, sr * sr, sr * sr;
        sc.odometry_cov.push_back(cov.cwiseMax(detail::kCovarianceFloor));
    }

    // place observations: bilinear blend of the four surrounding grid-cell
    // signatures plus isotropic noise, so descriptor similarity decays
    // smoothly with position instead of snapping at cell boundaries
    Xoshiro256pp obs_rng(hash_combine(spec.seed, 2));
    for (int k = 0; k < n; ++k) {
        const Pose6& p = sc.gt_trajectory[k];
        const double gx = p.t.x() / spec.place_grid_resolution;
        const double gy = p.t.y() / spec.place_grid_resolution;
        const long cx = detail::stable_floor(gx), cy = detail::stable_floor(gy);
        const double ux = std::clamp(gx - static_cast<double>(cx), 0.0, 1.0);
        const double uy = std::clamp(gy - static_cast<double>(cy), 0.0, 1.0);
        const int oct = detail::heading_octant(p.r.z());

        Eigen::VectorXd obs =
            Eigen::VectorXd::Zero(detail::kPlaceSignatureDim + detail::kNuisanceDim);
        const double wx[2] = {1.0 - ux, ux}, wy[2] = {1.0 - uy, uy};
        for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
                obs.head(detail::kPlaceSignatureDim) +=
                    wx[dx] * wy[dy] * detail::place_signature(spec.seed, cx + dx, cy + dy, oct);
        for (int d = 0; d < detail::kNuisanceDim; ++d)
            obs[detail::kPlaceSignatureDim + d] = obs_rng.gaussian(0.0, spec.observation_nuisance);
        for (int d = 0; d < obs.size(); ++d) obs[d] += obs_rng.gaussian(0.0, spec.observation_noise);
        sc.observations.push_back(obs);
    }

    // exact true loops: distant frame pairs at nearly coincident gt poses
    const double dist_thresh = 0.25 * spec.step_length;
    for (int i = 0; i < n; ++i)
        for (int j = i + detail::kMinLoopSeparation + 1; j < n; ++j) {
            if ((sc.gt_trajectory[i].t - sc.gt_trajectory[j].t).norm() > dist_thresh) continue;
            const double dyaw = rotation_angle(sc.gt_trajectory[i].rotation().transpose() *
                                               sc.gt_trajectory[j].rotation());
            if (dyaw > 0.1) continue;
            sc.true_loops.push_back({i, j, relative(sc.gt_trajectory[i], sc.gt_trajectory[j])});
        }

    // proposals: evenly subsampled true loops with measurement noise, plus
    // injected false ones whose translation is pushed off by false_loop_offset
    Xoshiro256pp prop_rng(hash_combine(spec.seed, 3));
    const int n_true_avail = static_cast<int>(sc.true_loops.size());
    int n_true_prop = n_true_avail;
    int n_false = 0;
    if (n_true_avail > 0) {
        if (spec.max_proposals > 0) {
            n_true_prop = std::min(
                n_true_avail,
                std::max(1, static_cast<int>(std::lround(spec.max_proposals *
                                                         (1.0 - spec.false_loop_rate)))));
            n_false = spec.max_proposals - n_true_prop;
            if (spec.false_loop_rate == 0.0) n_false = 0;
        } else if (spec.false_loop_rate > 0.0) {
            n_false = static_cast<int>(
                std::lround(n_true_prop * spec.false_loop_rate / (1.0 - spec.false_loop_rate)));
        }
    }

    Eigen::Matrix<double, 6, 1> loop_cov;
    const double lt = spec.odom_sigma_t * spec.loop_noise_multiplier;
    const double lr = spec.odom_sigma_r * spec.loop_noise_multiplier;
    loop_cov << lt * lt, lt * lt, lt * lt, lr * lr, lr * lr, lr * lr;
    loop_cov = (spec.loop_cov_overestimate * loop_cov).cwiseMax(detail::kCovarianceFloor);

    const auto noisy_rel = [&](const Pose6& rel) {
        Eigen::Matrix<double, 6, 1> v = rel.vec();
        for (int d = 0; d < 3; ++d) v[d] += prop_rng.gaussian(0.0, lt);
        for (int d = 3; d < 6; ++d) v[d] += prop_rng.gaussian(0.0, lr);
        return Pose6::from_vec(v);
    };

    for (int p = 0; p < n_true_prop; ++p) {
        const int idx = n_true_prop == 1
                            ? 0
                            : static_cast<int>(std::lround(
                                  static_cast<double>(p) * (n_true_avail - 1) / (n_true_prop - 1)));
        const TrueLoop& tl = sc.true_loops[idx];
        sc.proposals.push_back({tl.i, tl.j, noisy_rel(tl.rel), loop_cov, 0.0});
        sc.proposal_is_true.push_back(true);
    }
    for (int p = 0; p < n_false; ++p) {
        const TrueLoop& tl = sc.true_loops[prop_rng.uniform_int(n_true_avail)];
        Eigen::Vector3d dir(prop_rng.gaussian(), prop_rng.gaussian(), prop_rng.gaussian());
        if (dir.norm() < 1e-9) dir = Eigen::Vector3d::UnitX();
        Pose6 rel = noisy_rel(tl.rel);
        rel.t += spec.false_loop_offset * dir.normalized();
        sc.proposals.push_back({tl.i, tl.j, rel, loop_cov, 0.0});
        sc.proposal_is_true.push_back(false);
    }

    return sc;
}

struct LoopLabel {
    int i = 0, j = 0;
    bool positive = false;
};

// Ground-truth revisit labels for all frame pairs i < j: positive iff the gt
// positions are within distance_threshold and the headings within
// heading_threshold.
inline std::vector<LoopLabel> gt_loop_labels(const SyntheticScenario& sc,
                                             double distance_threshold,
                                             double heading_threshold) {
    if (!(distance_threshold > 0.0) || !(heading_threshold > 0.0))
        throw std::invalid_argument("gt_loop_labels: thresholds must be > 0");
    const int n = sc.n_frames();
    std::vector<LoopLabel> labels;
    labels.reserve(static_cast<size_t>(n) * (n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const bool close =
                (sc.gt_trajectory[i].t - sc.gt_trajectory[j].t).norm() <= distance_threshold &&
                rotation_angle(sc.gt_trajectory[i].rotation().transpose() *
                               sc.gt_trajectory[j].rotation()) <= heading_threshold;
            labels.push_back({i, j, close});
        }
    return labels;
}

// Regression set for the MDN odometry task: feature = (commanded step
// 6-vector, turn flag, nuc flag), target = the measured noisy step. The
// flags carry the noise-scale signal the variance head is expected to learn.
inline std::vector<PoseSample> odometry_regression_data(const SyntheticScenario& sc) {
    std::vector<PoseSample> data;
    const int steps = static_cast<int>(sc.odometry.size());
    for (int k = 0; k < steps; ++k) {
        const Pose6 cmd = relative(sc.gt_trajectory[k], sc.gt_trajectory[k + 1]);
        Eigen::VectorXd f(8);
        f << cmd.vec(), sc.step_turn_flag[k] ? 1.0 : 0.0, sc.step_nuc_flag[k] ? 1.0 : 0.0;
        data.emplace_back(f, sc.odometry[k]);
    }
    return data;
}

// Bimodal regression set for mixture-count studies: the translation-x target
// sits at +-separation regardless of the (uninformative) feature; the other
// axes carry plain Gaussian noise so no head is degenerate.
inline std::vector<PoseSample> multimodal_regression_data(int n, std::uint64_t seed,
                                                          double separation = 1.0,
                                                          double noise = 0.1) {
    if (n < 2) throw std::invalid_argument("multimodal_regression_data: n must be >= 2");
    Xoshiro256pp rng(hash_combine(seed, 4));
    std::vector<PoseSample> data;
    for (int k = 0; k < n; ++k) {
        Eigen::VectorXd f(1);
        f << rng.uniform(-1.0, 1.0);
        const double mode = rng.uniform() < 0.5 ? -separation : separation;
        Eigen::Matrix<double, 6, 1> v;
        for (int d = 0; d < 6; ++d) v[d] = rng.gaussian(0.0, noise);
        v[0] += mode;
        data.emplace_back(f, Pose6::from_vec(v));
    }
    return data;
}

}  // namespace pgslam
