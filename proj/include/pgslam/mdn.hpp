#pragma once

// Gaussian-mixture output mathematics for mixture density networks: negative
// log likelihood with analytic gradients in the unconstrained (softmax-logit,
// log-sigma) parameterization, mixture sampling, mode extraction, the Huber
// loss, and the beta-weighted translation+rotation pose loss.
//
// Densities are never materialized unlogged: every likelihood goes through
// log-sum-exp.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "geometry.hpp"
#include "rng.hpp"

namespace pgslam {

// Diagonal Gaussian mixture over a D-dimensional target. K components,
// weights sum to 1, all sigmas strictly positive.
struct GmmParams {
    Eigen::VectorXd alphas;  // K
    Eigen::MatrixXd mus;     // K x D
    Eigen::MatrixXd sigmas;  // K x D

    int K() const { return static_cast<int>(alphas.size()); }
    int D() const { return static_cast<int>(mus.cols()); }

    void validate() const {
        if (alphas.size() == 0) throw std::invalid_argument("GmmParams: empty mixture");
        if (mus.rows() != alphas.size() || sigmas.rows() != alphas.size() ||
            mus.cols() != sigmas.cols())
            throw std::invalid_argument("GmmParams: inconsistent shapes");
        if ((alphas.array() < 0.0).any() || std::abs(alphas.sum() - 1.0) > 1e-12)
            throw std::invalid_argument("GmmParams: weights must be nonnegative and sum to 1");
        if (!(sigmas.array() > 0.0).all())
            throw std::invalid_argument("GmmParams: sigmas must be strictly positive");
    }
};

struct MdnLossConfig {
    double beta = 100.0;  // rotation NLL weight
    int K = 1;

    void validate() const {
        if (!(beta > 0.0)) throw std::invalid_argument("MdnLossConfig: beta must be > 0");
        if (K < 1) throw std::invalid_argument("MdnLossConfig: K must be >= 1");
    }
};

struct HuberConfig {
    double delta = 1.0;

    void validate() const {
        if (!(delta > 0.0)) throw std::invalid_argument("HuberConfig: delta must be > 0");
    }
};

namespace detail {

// Per-component joint log density log(alpha_k) + log N(target | mu_k, sigma_k^2).
inline Eigen::VectorXd component_log_terms(const GmmParams& p, const Eigen::VectorXd& target) {
    static constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // 0.5*ln(2*pi)
    const int K = p.K(), D = p.D();
    Eigen::VectorXd lt(K);
    for (int k = 0; k < K; ++k) {
        double acc = p.alphas[k] > 0.0 ? std::log(p.alphas[k])
                                       : -std::numeric_limits<double>::infinity();
        for (int d = 0; d < D; ++d) {
            const double z = (target[d] - p.mus(k, d)) / p.sigmas(k, d);
            acc += -kLogSqrt2Pi - std::log(p.sigmas(k, d)) - 0.5 * z * z;
        }
        lt[k] = acc;
    }
    return lt;
}

inline double log_sum_exp(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

}  // namespace detail

// -log sum_k alpha_k prod_d N(target_d | mu_kd, sigma_kd^2)
inline double gmm_nll(const GmmParams& params, const Eigen::VectorXd& target) {
    params.validate();
    if (target.size() != params.D())
        throw std::invalid_argument("gmm_nll: target dimension mismatch");
    if (!target.allFinite()) throw std::invalid_argument("gmm_nll: non-finite target");
    return -detail::log_sum_exp(detail::component_log_terms(params, target));
}

// Gradients of gmm_nll w.r.t. the unconstrained parameters that produce the
// mixture: pre-softmax logits for alpha, means directly, and log(sigma).
struct GmmNllGrad {
    Eigen::VectorXd d_logits;     // K
    Eigen::MatrixXd d_mus;        // K x D
    Eigen::MatrixXd d_log_sigmas; // K x D
};

inline GmmNllGrad gmm_nll_grad(const GmmParams& params, const Eigen::VectorXd& target) {
    params.validate();
    if (target.size() != params.D())
        throw std::invalid_argument("gmm_nll_grad: target dimension mismatch");
    const int K = params.K(), D = params.D();

    const Eigen::VectorXd lt = detail::component_log_terms(params, target);
    const double lse = detail::log_sum_exp(lt);
    // Posterior responsibilities r_k = alpha_k N_k / sum_j alpha_j N_j.
    const Eigen::VectorXd resp = (lt.array() - lse).exp();

    GmmNllGrad g;
    g.d_logits = params.alphas - resp;  // dNLL/dlogit_k = alpha_k - r_k
    g.d_mus.resize(K, D);
    g.d_log_sigmas.resize(K, D);
    for (int k = 0; k < K; ++k) {
        for (int d = 0; d < D; ++d) {
            const double sig = params.sigmas(k, d);
            const double err = target[d] - params.mus(k, d);
            g.d_mus(k, d) = -resp[k] * err / (sig * sig);
            g.d_log_sigmas(k, d) = -resp[k] * (err * err / (sig * sig) - 1.0);
        }
    }
    return g;
}

// Draw one sample: component index ~ alpha, then one Gaussian per axis.
// Returns the sample and the selected component's per-axis variances.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> gmm_sample(const GmmParams& params,
                                                              Xoshiro256pp& rng) {
    params.validate();
    const double u = rng.uniform();
    int k = params.K() - 1;
    double cum = 0.0;
    for (int i = 0; i < params.K(); ++i) {
        cum += params.alphas[i];
        if (u < cum) { k = i; break; }
    }
    const int D = params.D();
    Eigen::VectorXd x(D), var(D);
    for (int d = 0; d < D; ++d) {
        x[d] = rng.gaussian(params.mus(k, d), params.sigmas(k, d));
        var[d] = params.sigmas(k, d) * params.sigmas(k, d);
    }
    return {x, var};
}

using PoseWithCovariance = std::pair<Pose6, Eigen::Matrix<double, 6, 1>>;

// Sample a 6-DoF pose from separate translation and rotation mixtures.
// The returned 6-vector holds the selected components' per-axis variances.
inline PoseWithCovariance sample_pose(const GmmParams& trans, const GmmParams& rot,
                                      Xoshiro256pp& rng) {
    if (trans.D() != 3 || rot.D() != 3)
        throw std::invalid_argument("sample_pose: mixtures must be 3-dimensional");
    const auto [t, tv] = gmm_sample(trans, rng);
    const auto [r, rv] = gmm_sample(rot, rng);
    Eigen::Matrix<double, 6, 1> cov;
    cov << tv, rv;
    return {Pose6(t, r), cov};
}

// Deterministic alternative to sampling: mean and variance of the
// highest-weight component, ties broken by lowest index.
inline PoseWithCovariance mode_pose(const GmmParams& trans, const GmmParams& rot) {
    if (trans.D() != 3 || rot.D() != 3)
        throw std::invalid_argument("mode_pose: mixtures must be 3-dimensional");
    trans.validate();
    rot.validate();
    const auto argmax = [](const GmmParams& p) {
        int best = 0;
        for (int k = 1; k < p.K(); ++k)
            if (p.alphas[k] > p.alphas[best]) best = k;
        return best;
    };
    const int kt = argmax(trans), kr = argmax(rot);
    Eigen::Matrix<double, 6, 1> cov;
    cov << trans.sigmas.row(kt).array().square().transpose().matrix(),
        rot.sigmas.row(kr).array().square().transpose().matrix();
    return {Pose6(trans.mus.row(kt), rot.mus.row(kr)), cov};
}

// Mean over elements of the Huber penalty: quadratic inside |xi| <= delta,
// linear outside.
inline double huber(const Eigen::VectorXd& xi, const HuberConfig& cfg) {
    cfg.validate();
    if (xi.size() == 0) throw std::invalid_argument("huber: empty input");
    double acc = 0.0;
    for (int i = 0; i < xi.size(); ++i) {
        const double a = std::abs(xi[i]);
        acc += a <= cfg.delta ? 0.5 * a * a : cfg.delta * (a - 0.5 * cfg.delta);
    }
    return acc / static_cast<double>(xi.size());
}

// NLL(trans) + beta * NLL(rot) against a pose target.
inline double mdn_pose_loss(const GmmParams& trans, const GmmParams& rot, const Pose6& target,
                            const MdnLossConfig& cfg) {
    cfg.validate();
    return gmm_nll(trans, target.t) + cfg.beta * gmm_nll(rot, target.r);
}

inline void to_json(nlohmann::json& j, const GmmParams& p) {
    const auto mat_rows = [](const Eigen::MatrixXd& m) {
        std::vector<std::vector<double>> rows(m.rows());
        for (int k = 0; k < m.rows(); ++k)
            rows[k].assign(m.row(k).begin(), m.row(k).end());
        return rows;
    };
    j = nlohmann::json{{"alphas", std::vector<double>(p.alphas.begin(), p.alphas.end())},
                       {"mus", mat_rows(p.mus)},
                       {"sigmas", mat_rows(p.sigmas)}};
}

inline void from_json(const nlohmann::json& j, GmmParams& p) {
    const auto alphas = j.at("alphas").get<std::vector<double>>();
    const auto mus = j.at("mus").get<std::vector<std::vector<double>>>();
    const auto sigmas = j.at("sigmas").get<std::vector<std::vector<double>>>();
    const int K = static_cast<int>(alphas.size());
    const int D = K > 0 ? static_cast<int>(mus.at(0).size()) : 0;
    p.alphas = Eigen::Map<const Eigen::VectorXd>(alphas.data(), K);
    p.mus.resize(K, D);
    p.sigmas.resize(K, D);
    for (int k = 0; k < K; ++k) {
        if (static_cast<int>(mus.at(k).size()) != D || static_cast<int>(sigmas.at(k).size()) != D)
            throw std::invalid_argument("GmmParams: ragged rows in JSON");
        for (int d = 0; d < D; ++d) {
            p.mus(k, d) = mus[k][d];
            p.sigmas(k, d) = sigmas[k][d];
        }
    }
}

}  // namespace pgslam
