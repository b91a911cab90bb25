#pragma once

// Pose-graph back end: 6-DoF states connected by odometry factors (between
// consecutive frames) and loop factors (between distant frames), each with a
// diagonal covariance. The cost is the sum of information-weighted squared
// relative-pose residuals, scaled per factor class by varrho (odometry) and
// rho (loops), and is minimized by Levenberg-Marquardt on the sparse normal
// equations with numerically differentiated Jacobians.

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <limits>
#include <algorithm>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"

namespace pgslam {

using Vector6 = Eigen::Matrix<double, 6, 1>;

struct OdometryFactor {
    int i = 0;        // connects node i to node i+1
    Pose6 u;          // measured pose of i+1 in frame i
    Vector6 cov = Vector6::Ones();
};

struct LoopFactor {
    int i = 0, j = 0;
    Pose6 c;          // measured pose of j in frame i
    Vector6 cov = Vector6::Ones();
};

struct FactorGraph {
    std::vector<Pose6> nodes;
    std::vector<OdometryFactor> odometry_factors;
    std::vector<LoopFactor> loop_factors;
    int anchor = 0;

    void validate() const {
        const int n = static_cast<int>(nodes.size());
        if (n == 0) throw std::invalid_argument("FactorGraph: no nodes");
        if (anchor < 0 || anchor >= n) throw std::invalid_argument("FactorGraph: anchor out of range");
        for (const auto& f : odometry_factors) {
            if (f.i < 0 || f.i + 1 >= n)
                throw std::invalid_argument("FactorGraph: odometry factor index out of range");
            if (!(f.cov.array() > 0.0).all())
                throw std::invalid_argument("FactorGraph: nonpositive odometry covariance");
        }
        for (const auto& f : loop_factors) {
            if (f.i < 0 || f.j < 0 || f.i >= n || f.j >= n || f.i == f.j)
                throw std::invalid_argument("FactorGraph: loop factor index out of range");
            if (!(f.cov.array() > 0.0).all())
                throw std::invalid_argument("FactorGraph: nonpositive loop covariance");
        }
    }
};

struct BackendConfig {
    double varrho = 0.01;  // odometry information scale
    double rho = 3.0;      // loop information scale
    int max_iterations = 100;
    double lm_lambda_init = 1e-4;
    double convergence_tol = 1e-10;  // relative cost change
    // Default: varrho/rho multiply the information matrix, so a larger rho
    // weighs loop constraints more. When false they scale the covariance
    // instead (the opposite effect), for experimentation.
    bool scales_multiply_information = true;

    void validate() const {
        if (!(varrho > 0.0) || !(rho > 0.0))
            throw std::invalid_argument("BackendConfig: varrho and rho must be > 0");
        if (max_iterations < 1) throw std::invalid_argument("BackendConfig: max_iterations >= 1");
        if (!(lm_lambda_init > 0.0)) throw std::invalid_argument("BackendConfig: lm_lambda_init > 0");
        if (!(convergence_tol >= 0.0)) throw std::invalid_argument("BackendConfig: convergence_tol >= 0");
    }

    Vector6 information(const Vector6& cov, bool is_loop) const {
        const double scale = is_loop ? rho : varrho;
        if (scales_multiply_information) return scale * cov.cwiseInverse();
        return (scale * cov).cwiseInverse();
    }
};

// e = relative(pred_from (+) measurement, state_to), flattened to
// (translation, wrapped Euler). Zero iff the measurement exactly predicts
// state_to from pred_from.
inline Vector6 factor_residual(const Pose6& pred_from, const Pose6& measurement,
                               const Pose6& state_to) {
    return relative(compose(pred_from, measurement), state_to).vec();
}

inline double total_cost(const FactorGraph& graph, const BackendConfig& cfg) {
    graph.validate();
    cfg.validate();
    double cost = 0.0;
    for (const auto& f : graph.odometry_factors) {
        const Vector6 e = factor_residual(graph.nodes[f.i], f.u, graph.nodes[f.i + 1]);
        cost += (e.array().square() * cfg.information(f.cov, false).array()).sum();
    }
    for (const auto& f : graph.loop_factors) {
        const Vector6 e = factor_residual(graph.nodes[f.i], f.c, graph.nodes[f.j]);
        cost += (e.array().square() * cfg.information(f.cov, true).array()).sum();
    }
    return cost;
}

struct OptimizeResult {
    std::vector<Pose6> states;
    std::vector<double> cost_trace;  // initial cost, then each accepted step
    int iterations = 0;
    bool converged = false;
};

namespace detail {

struct GenericFactor {
    int from, to;
    Pose6 measurement;
    Vector6 sqrt_info;  // per-axis sqrt of the scaled information
};

inline std::vector<GenericFactor> collect_factors(const FactorGraph& graph,
                                                  const BackendConfig& cfg) {
    std::vector<GenericFactor> fs;
    fs.reserve(graph.odometry_factors.size() + graph.loop_factors.size());
    for (const auto& f : graph.odometry_factors)
        fs.push_back({f.i, f.i + 1, f.u, cfg.information(f.cov, false).cwiseSqrt()});
    for (const auto& f : graph.loop_factors)
        fs.push_back({f.i, f.j, f.c, cfg.information(f.cov, true).cwiseSqrt()});
    return fs;
}

inline void check_connected(const FactorGraph& graph, const std::vector<GenericFactor>& fs) {
    const int n = static_cast<int>(graph.nodes.size());
    std::vector<std::vector<int>> adj(n);
    for (const auto& f : fs) {
        adj[f.from].push_back(f.to);
        adj[f.to].push_back(f.from);
    }
    std::vector<bool> seen(n, false);
    std::queue<int> q;
    q.push(graph.anchor);
    seen[graph.anchor] = true;
    while (!q.empty()) {
        const int v = q.front();
        q.pop();
        for (const int w : adj[v])
            if (!seen[w]) {
                seen[w] = true;
                q.push(w);
            }
    }
    std::string orphans;
    for (int v = 0; v < n; ++v)
        if (!seen[v]) orphans += (orphans.empty() ? "" : ", ") + std::to_string(v);
    if (!orphans.empty())
        throw std::invalid_argument("optimize: graph disconnected from anchor; orphan nodes: " +
                                    orphans);
}

}  // namespace detail

// Levenberg-Marquardt on the pose graph. The anchor node is held fixed;
// every other node contributes six parameters updated additively with angle
// re-wrapping. Jacobians are central finite differences (h = 1e-7) of the
// per-factor residual w.r.t. its two incident poses. Accepted steps strictly
// decrease cost; damping is multiplied by 10 on rejection and by 0.5 on
// acceptance.
inline OptimizeResult optimize(const FactorGraph& graph, const BackendConfig& cfg) {
    graph.validate();
    cfg.validate();
    const auto factors = detail::collect_factors(graph, cfg);
    detail::check_connected(graph, factors);

    const int n = static_cast<int>(graph.nodes.size());
    std::vector<int> slot(n, -1);  // node -> parameter block index, anchor excluded
    int n_blocks = 0;
    for (int v = 0; v < n; ++v)
        if (v != graph.anchor) slot[v] = n_blocks++;
    const int dim = 6 * n_blocks;

    std::vector<Pose6> states = graph.nodes;
    const auto eval_cost = [&](const std::vector<Pose6>& s) {
        double c = 0.0;
        for (const auto& f : factors) {
            const Vector6 e = factor_residual(s[f.from], f.measurement, s[f.to]);
            c += (e.array().square() * f.sqrt_info.array().square()).sum();
        }
        return c;
    };
    // a trial step that wanders into the gimbal-lock band is just a bad step
    const auto eval_trial_cost = [&](const std::vector<Pose6>& s) -> double {
        try {
            return eval_cost(s);
        } catch (const GimbalLockError&) {
            return std::numeric_limits<double>::infinity();
        }
    };

    OptimizeResult result;
    double cost = eval_cost(states);
    if (!std::isfinite(cost)) throw std::runtime_error("optimize: non-finite initial cost");
    result.cost_trace.push_back(cost);

    constexpr double kH = 1e-7;
    constexpr double kLambdaMax = 1e12;
    double lambda = cfg.lm_lambda_init;

    std::vector<Eigen::Triplet<double>> triplets;
    Eigen::VectorXd grad(dim);

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        result.iterations = iter + 1;
        if (cost < 1e-18) {
            result.converged = true;
            break;
        }

        // Linearize: per factor, numeric 6x6 blocks for each free incident node.
        triplets.clear();
        grad.setZero();
        std::vector<Eigen::Matrix<double, 6, 6>> Hdiag(n_blocks,
                                                       Eigen::Matrix<double, 6, 6>::Zero());
        for (const auto& f : factors) {
            const Vector6 e = factor_residual(states[f.from], f.measurement, states[f.to]);
            const Vector6 we = f.sqrt_info.cwiseProduct(e);
            Eigen::Matrix<double, 6, 6> J_from, J_to;
            const int ends[2] = {f.from, f.to};
            Eigen::Matrix<double, 6, 6>* jac[2] = {&J_from, &J_to};
            for (int side = 0; side < 2; ++side) {
                if (slot[ends[side]] < 0) continue;
                Pose6& node = states[ends[side]];
                const Pose6 saved = node;
                for (int c = 0; c < 6; ++c) {
                    const auto residual_at = [&](double offset) {
                        Vector6 v = saved.vec();
                        v[c] += offset;
                        node = Pose6::from_vec(v);
                        return factor_residual(states[f.from], f.measurement, states[f.to]);
                    };
                    // central difference; one-sided when a perturbation grazes
                    // the gimbal-lock band
                    Vector6 diff;
                    try {
                        diff = (residual_at(kH) - residual_at(-kH)) / (2.0 * kH);
                    } catch (const GimbalLockError&) {
                        node = saved;
                        const Vector6 e0 = factor_residual(states[f.from], f.measurement,
                                                           states[f.to]);
                        try {
                            diff = (residual_at(kH) - e0) / kH;
                        } catch (const GimbalLockError&) {
                            diff = (e0 - residual_at(-kH)) / kH;
                        }
                    }
                    jac[side]->col(c) = f.sqrt_info.cwiseProduct(diff);
                }
                node = saved;
            }
            const int bf = slot[f.from], bt = slot[f.to];
            if (bf >= 0) {
                Hdiag[bf] += J_from.transpose() * J_from;
                grad.segment<6>(6 * bf) += J_from.transpose() * we;
            }
            if (bt >= 0) {
                Hdiag[bt] += J_to.transpose() * J_to;
                grad.segment<6>(6 * bt) += J_to.transpose() * we;
            }
            if (bf >= 0 && bt >= 0) {
                const Eigen::Matrix<double, 6, 6> off = J_from.transpose() * J_to;
                for (int r = 0; r < 6; ++r)
                    for (int c = 0; c < 6; ++c) {
                        triplets.emplace_back(6 * bf + r, 6 * bt + c, off(r, c));
                        triplets.emplace_back(6 * bt + c, 6 * bf + r, off(r, c));
                    }
            }
        }
        if (grad.lpNorm<Eigen::Infinity>() < 1e-14) {
            result.converged = true;
            break;
        }
        for (int b = 0; b < n_blocks; ++b)
            for (int r = 0; r < 6; ++r)
                for (int c = 0; c < 6; ++c)
                    triplets.emplace_back(6 * b + r, 6 * b + c, Hdiag[b](r, c));

        // Damped solve; retry with heavier damping until a step is accepted.
        bool accepted = false;
        while (!accepted && lambda <= kLambdaMax) {
            auto damped = triplets;
            for (int d = 0; d < dim; ++d) damped.emplace_back(d, d, lambda);
            Eigen::SparseMatrix<double> H(dim, dim);
            H.setFromTriplets(damped.begin(), damped.end());
            Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(H);
            if (solver.info() != Eigen::Success) {
                lambda *= 10.0;
                continue;
            }
            const Eigen::VectorXd delta = solver.solve(-grad);
            std::vector<Pose6> trial = states;
            for (int v = 0; v < n; ++v)
                if (slot[v] >= 0)
                    trial[v] = Pose6::from_vec(trial[v].vec() + delta.segment<6>(6 * slot[v]));
            const double trial_cost = eval_trial_cost(trial);
            if (std::isnan(trial_cost)) throw std::runtime_error("optimize: cost diverged");
            if (trial_cost < cost) {
                const double rel_change = (cost - trial_cost) / std::max(cost, 1e-300);
                states = std::move(trial);
                cost = trial_cost;
                result.cost_trace.push_back(cost);
                lambda *= 0.5;
                accepted = true;
                if (rel_change < cfg.convergence_tol) {
                    result.converged = true;
                    iter = cfg.max_iterations;  // stop outer loop
                }
            } else {
                lambda *= 10.0;
            }
        }
        if (!accepted) break;  // trust region collapsed
    }

    result.states = std::move(states);
    return result;
}

// Cumulative composition of odometry steps starting from x0; the optimizer's
// initial guess.
inline std::vector<Pose6> compose_dead_reckoning(const std::vector<Pose6>& odometry,
                                                 const Pose6& x0 = Pose6()) {
    std::vector<Pose6> traj{x0};
    traj.reserve(odometry.size() + 1);
    for (const auto& u : odometry) traj.push_back(compose(traj.back(), u));
    return traj;
}

}  // namespace pgslam
