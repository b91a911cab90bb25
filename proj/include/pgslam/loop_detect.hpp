#pragma once

// Loop closure detection from global descriptors: cosine discrepancy between
// unit-norm embeddings, the full pairwise similarity matrix, threshold
// detection with adjacent-frame exclusion, and ROC evaluation.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <tuple>
#include <vector>

namespace pgslam {

// Unit-norm global descriptor of one frame.
struct Embedding {
    Eigen::VectorXd v;

    explicit Embedding(const Eigen::VectorXd& raw) {
        const double n = raw.norm();
        if (n < 1e-12) throw std::invalid_argument("Embedding: zero-norm vector");
        v = raw / n;
    }
};

struct LoopDetectConfig {
    double zeta = 0.045;          // discrepancy threshold, strict <
    int adjacency_exclusion = 18;
    // When true, scores are raw cosine similarity thresholded from below, the
    // literal reading of the formula in the source method; the default treats
    // 1 - similarity as the discrepancy, which matches the stated threshold
    // magnitude (0.045 selects near-identical pairs).
    bool threshold_raw_similarity = false;

    void validate() const {
        if (!(zeta > 0.0) || !(zeta < 2.0))
            throw std::invalid_argument("LoopDetectConfig: zeta must be in (0, 2)");
        if (adjacency_exclusion < 0)
            throw std::invalid_argument("LoopDetectConfig: adjacency_exclusion must be >= 0");
    }
};

// 1 - cos(a, b), in [0, 2]. Zero for identical directions. The clamp absorbs
// the last-ulp excursions of the dot product at +-1.
inline double discrepancy(const Embedding& a, const Embedding& b) {
    if (a.v.size() != b.v.size()) throw std::invalid_argument("discrepancy: dimension mismatch");
    return std::clamp(1.0 - a.v.dot(b.v), 0.0, 2.0);
}

// n x n symmetric matrix of pairwise discrepancies, zero diagonal.
struct SimilarityMatrix {
    Eigen::MatrixXd s;
};

inline SimilarityMatrix similarity_matrix(const std::vector<Embedding>& embeddings) {
    const int n = static_cast<int>(embeddings.size());
    if (n < 2) throw std::invalid_argument("similarity_matrix: need at least 2 embeddings");
    SimilarityMatrix m;
    m.s = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double d = discrepancy(embeddings[i], embeddings[j]);
            m.s(i, j) = d;
            m.s(j, i) = d;
        }
    return m;
}

struct DetectedLoop {
    int i, j;      // i < j
    double score;  // discrepancy (or raw similarity under the polarity switch)
};

// All pairs with score below zeta and |i - j| > adjacency_exclusion, each
// emitted once with i < j, sorted by score ascending ((i, j) breaks ties).
inline std::vector<DetectedLoop> detect_loops(const std::vector<Embedding>& embeddings,
                                              const LoopDetectConfig& cfg) {
    cfg.validate();
    const int n = static_cast<int>(embeddings.size());
    std::vector<DetectedLoop> out;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            if (j - i <= cfg.adjacency_exclusion) continue;
            const double d = discrepancy(embeddings[i], embeddings[j]);
            const double score = cfg.threshold_raw_similarity ? 1.0 - d : d;
            if (score < cfg.zeta) out.push_back({i, j, score});
        }
    std::sort(out.begin(), out.end(), [](const DetectedLoop& a, const DetectedLoop& b) {
        return std::tie(a.score, a.i, a.j) < std::tie(b.score, b.i, b.j);
    });
    return out;
}

struct RocPoint {
    double fpr, tpr;
};

struct RocResult {
    std::vector<RocPoint> curve;
    double auc = 0.0;

    // TPR of the last operating point with FPR <= the given bound.
    double tpr_at_fpr(double fpr_bound) const {
        double best = 0.0;
        for (const auto& pt : curve)
            if (pt.fpr <= fpr_bound + 1e-12) best = std::max(best, pt.tpr);
        return best;
    }
};

// ROC over discrepancy scores: lower score = predicted positive. Points are
// produced by sweeping the threshold across distinct score values, so tied
// scores enter the curve together; AUC by trapezoid rule.
inline RocResult roc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("roc: length mismatch");
    const int n = static_cast<int>(scores.size());
    int n_pos = 0;
    for (const bool l : labels) n_pos += l ? 1 : 0;
    const int n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw std::invalid_argument("roc: need at least one positive and one negative label");

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] < scores[b]; });

    RocResult result;
    result.curve.push_back({0.0, 0.0});
    int tp = 0, fp = 0, idx = 0;
    double auc = 0.0;
    RocPoint prev{0.0, 0.0};
    while (idx < n) {
        // consume the whole group of equal scores before emitting a point
        const double s = scores[order[idx]];
        while (idx < n && scores[order[idx]] == s) {
            if (labels[order[idx]]) ++tp; else ++fp;
            ++idx;
        }
        const RocPoint pt{static_cast<double>(fp) / n_neg, static_cast<double>(tp) / n_pos};
        auc += 0.5 * (pt.tpr + prev.tpr) * (pt.fpr - prev.fpr);
        result.curve.push_back(pt);
        prev = pt;
    }
    result.auc = auc;
    return result;
}

}  // namespace pgslam
