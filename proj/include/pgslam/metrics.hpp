#pragma once

// Trajectory evaluation: closed-form similarity alignment (Umeyama), RMS
// absolute trajectory error, relative pose error over a fixed frame spacing,
// and correlation diagnostics between predicted uncertainty and error.

#include <Eigen/Core>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"

namespace pgslam {

struct AlignTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    double scale = 1.0;

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
        return scale * (rotation * p) + translation;
    }
};

// Least-squares similarity transform minimizing sum |dst - (s R src + t)|^2.
// Reflections are prevented by the determinant sign correction.
inline AlignTransform umeyama(const std::vector<Eigen::Vector3d>& src,
                              const std::vector<Eigen::Vector3d>& dst, bool with_scale) {
    if (src.size() != dst.size()) throw std::invalid_argument("umeyama: size mismatch");
    const int n = static_cast<int>(src.size());
    if (n < 3) throw std::invalid_argument("umeyama: need at least 3 point pairs");

    Eigen::Vector3d mu_src = Eigen::Vector3d::Zero(), mu_dst = Eigen::Vector3d::Zero();
    for (int i = 0; i < n; ++i) {
        mu_src += src[i];
        mu_dst += dst[i];
    }
    mu_src /= n;
    mu_dst /= n;

    Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
    double var_src = 0.0;
    for (int i = 0; i < n; ++i) {
        sigma += (dst[i] - mu_dst) * (src[i] - mu_src).transpose();
        var_src += (src[i] - mu_src).squaredNorm();
    }
    sigma /= n;
    var_src /= n;

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d d = svd.singularValues();
    if (d(0) < 1e-15 || d(1) < 1e-12 * d(0))
        throw std::invalid_argument("umeyama: degenerate (collinear) point configuration");

    Eigen::Vector3d s = Eigen::Vector3d::Ones();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2) = -1.0;

    AlignTransform out;
    out.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
    out.scale = with_scale ? d.dot(s) / var_src : 1.0;
    out.translation = mu_dst - out.scale * (out.rotation * mu_src);
    return out;
}

// RMS translation error, optionally after Umeyama alignment of est onto gt.
inline double ate(const std::vector<Pose6>& est, const std::vector<Pose6>& gt, bool align,
                  bool align_scale = false) {
    if (est.size() != gt.size()) throw std::invalid_argument("ate: length mismatch");
    if (est.size() < 2) throw std::invalid_argument("ate: need at least 2 poses");
    AlignTransform tf;
    if (align) {
        std::vector<Eigen::Vector3d> s, d;
        for (size_t i = 0; i < est.size(); ++i) {
            s.push_back(est[i].t);
            d.push_back(gt[i].t);
        }
        tf = umeyama(s, d, align_scale);
    }
    double acc = 0.0;
    for (size_t i = 0; i < est.size(); ++i) acc += (gt[i].t - tf.apply(est[i].t)).squaredNorm();
    return std::sqrt(acc / static_cast<double>(est.size()));
}

struct RpeResult {
    double trans_rms = 0.0;  // meters
    double rot_rms_deg = 0.0;
};

// Error pose per step: relative(relative(gt_i, gt_{i+d}), relative(est_i,
// est_{i+d})). Translation RMS over error translations; rotation RMS over
// geodesic angles in degrees.
inline RpeResult rpe(const std::vector<Pose6>& est, const std::vector<Pose6>& gt, int delta = 1) {
    if (est.size() != gt.size()) throw std::invalid_argument("rpe: length mismatch");
    if (delta < 1) throw std::invalid_argument("rpe: delta must be >= 1");
    if (est.size() <= static_cast<size_t>(delta))
        throw std::invalid_argument("rpe: trajectory shorter than delta");
    double t_acc = 0.0, r_acc = 0.0;
    const int m = static_cast<int>(est.size()) - delta;
    for (int i = 0; i < m; ++i) {
        const Pose6 err =
            relative(relative(gt[i], gt[i + delta]), relative(est[i], est[i + delta]));
        t_acc += err.t.squaredNorm();
        const double ang = rotation_angle(err.rotation());
        r_acc += ang * ang;
    }
    RpeResult out;
    out.trans_rms = std::sqrt(t_acc / m);
    out.rot_rms_deg = std::sqrt(r_acc / m) * 180.0 / M_PI;
    return out;
}

struct CorrelationResult {
    double pearson = 0.0;
    double spearman = 0.0;
};

namespace detail {

inline double pearson_corr(const std::vector<double>& x, const std::vector<double>& y) {
    const int n = static_cast<int>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (int i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0)
        throw std::invalid_argument("correlation: zero-variance input");
    return sxy / std::sqrt(sxx * syy);
}

// Average ranks, ties shared.
inline std::vector<double> ranks(const std::vector<double>& v) {
    const int n = static_cast<int>(v.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    int i = 0;
    while (i < n) {
        int j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * (i + j) + 1.0;
        for (int k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace detail

inline CorrelationResult uncertainty_correlation(const std::vector<double>& errors,
                                                 const std::vector<double>& sigmas) {
    if (errors.size() != sigmas.size())
        throw std::invalid_argument("uncertainty_correlation: length mismatch");
    if (errors.size() < 3)
        throw std::invalid_argument("uncertainty_correlation: need at least 3 samples");
    CorrelationResult out;
    out.pearson = detail::pearson_corr(errors, sigmas);
    out.spearman = detail::pearson_corr(detail::ranks(errors), detail::ranks(sigmas));
    return out;
}

}  // namespace pgslam
