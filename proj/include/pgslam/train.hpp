#pragma once

// Trainers for the two desk-scale learning tasks: a mixture-density pose
// regressor and a triplet-loss embedding projector. Plain minibatch SGD with
// a step-decay schedule (default: x0.75 every 25 epochs). Everything is
// deterministic under a fixed seed.

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"
#include "mdn.hpp"
#include "net.hpp"
#include "rng.hpp"

namespace pgslam {

struct TrainingFailure : std::runtime_error {
    int epoch;
    TrainingFailure(const std::string& msg, int epoch_)
        : std::runtime_error(msg + " (epoch " + std::to_string(epoch_) + ")"), epoch(epoch_) {}
};

struct TripletConfig {
    double lambda = 0.2;         // margin
    int adjacency_exclusion = 18;

    void validate() const {
        if (!(lambda > 0.0)) throw std::invalid_argument("TripletConfig: lambda must be > 0");
        if (adjacency_exclusion < 0)
            throw std::invalid_argument("TripletConfig: adjacency_exclusion must be >= 0");
    }
};

struct TrainConfig {
    double learning_rate = 0.02;
    int epochs = 100;
    int batch_size = 16;
    std::uint64_t seed = 1;
    double lr_decay = 0.75;       // multiplicative, applied every lr_decay_interval epochs
    int lr_decay_interval = 25;
    double grad_clip = 10.0;      // max gradient norm per batch

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!(lr_decay > 0.0) || lr_decay > 1.0)
            throw std::invalid_argument("TrainConfig: lr_decay must be in (0, 1]");
        if (lr_decay_interval < 1)
            throw std::invalid_argument("TrainConfig: lr_decay_interval must be >= 1");
    }

    double lr_at(int epoch) const {
        return learning_rate * std::pow(lr_decay, epoch / lr_decay_interval);
    }
};

// max(lambda + |a-p|^2 - |a-n|^2, 0)
inline double triplet_loss(const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                           const Eigen::VectorXd& n, const TripletConfig& cfg) {
    cfg.validate();
    if (a.size() != p.size() || a.size() != n.size())
        throw std::invalid_argument("triplet_loss: dimension mismatch");
    return std::max(cfg.lambda + (a - p).squaredNorm() - (a - n).squaredNorm(), 0.0);
}

struct Triplet {
    int anchor, positive, negative;
};

// Each loop pair yields two triplets with anchor and positive interchanged.
// Negatives are drawn uniformly from frames that are neither the anchor, the
// positive, nor within adjacency_exclusion of either.
inline std::vector<Triplet> mine_triplets(const std::vector<std::pair<int, int>>& loop_pairs,
                                          int n_frames, const TripletConfig& cfg,
                                          Xoshiro256pp& rng) {
    cfg.validate();
    std::vector<Triplet> out;
    out.reserve(2 * loop_pairs.size());
    for (const auto& [i, j] : loop_pairs) {
        if (i < 0 || j < 0 || i >= n_frames || j >= n_frames)
            throw std::invalid_argument("mine_triplets: loop pair index out of range");
        std::vector<int> candidates;
        for (int f = 0; f < n_frames; ++f)
            if (std::abs(f - i) > cfg.adjacency_exclusion &&
                std::abs(f - j) > cfg.adjacency_exclusion)
                candidates.push_back(f);
        if (candidates.empty())
            throw std::runtime_error("mine_triplets: no valid negative for pair (" +
                                     std::to_string(i) + ", " + std::to_string(j) + ")");
        for (const auto& [a, p] : {std::pair{i, j}, std::pair{j, i}}) {
            const int neg = candidates[rng.uniform_int(candidates.size())];
            out.push_back({a, p, neg});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// MDN pose regressor
// ---------------------------------------------------------------------------

// Dense net whose output layer holds raw mixture parameters for two 3-D
// heads (translation, rotation). Per-head layout: K logits, K*3 means,
// K*3 log-sigmas; translation head first.
struct MdnRegressor {
    DenseNet net;
    int K = 1;

    static int head_size(int K) { return K + 6 * K; }
    static int output_size(int K) { return 2 * head_size(K); }

    std::pair<GmmParams, GmmParams> predict(const Eigen::VectorXd& x) const {
        const Eigen::VectorXd raw = forward(net, x);
        return {unpack_head(raw, 0, K), unpack_head(raw, head_size(K), K)};
    }

    static GmmParams unpack_head(const Eigen::VectorXd& raw, int offset, int K) {
        GmmParams p;
        const Eigen::VectorXd logits = raw.segment(offset, K);
        const double m = logits.maxCoeff();
        Eigen::VectorXd e = (logits.array() - m).exp();
        p.alphas = e / e.sum();
        p.mus.resize(K, 3);
        p.sigmas.resize(K, 3);
        for (int k = 0; k < K; ++k)
            for (int d = 0; d < 3; ++d) {
                p.mus(k, d) = raw[offset + K + 3 * k + d];
                p.sigmas(k, d) = std::exp(raw[offset + 4 * K + 3 * k + d]);
            }
        return p;
    }

    // Gradient of the pose loss w.r.t. the raw output vector.
    static Eigen::VectorXd pack_upstream(const GmmNllGrad& gt, const GmmNllGrad& gr,
                                         double beta, int K) {
        Eigen::VectorXd up(output_size(K));
        const auto pack = [&](const GmmNllGrad& g, int offset, double w) {
            up.segment(offset, K) = w * g.d_logits;
            for (int k = 0; k < K; ++k)
                for (int d = 0; d < 3; ++d) {
                    up[offset + K + 3 * k + d] = w * g.d_mus(k, d);
                    up[offset + 4 * K + 3 * k + d] = w * g.d_log_sigmas(k, d);
                }
        };
        pack(gt, 0, 1.0);
        pack(gr, head_size(K), beta);
        return up;
    }
};

using PoseSample = std::pair<Eigen::VectorXd, Pose6>;

struct MdnTrainResult {
    MdnRegressor model;
    std::vector<double> epoch_losses;  // mean pose loss per epoch
};

inline double mdn_batch_pass(MdnRegressor& model, const std::vector<PoseSample>& data,
                             const std::vector<int>& batch, double beta, NetGrads* grads) {
    double loss_sum = 0.0;
    for (const int idx : batch) {
        const auto& [x, target] = data[idx];
        ForwardTrace trace;
        const Eigen::VectorXd raw = forward_trace(model.net, x, &trace);
        const GmmParams trans = MdnRegressor::unpack_head(raw, 0, model.K);
        const GmmParams rot = MdnRegressor::unpack_head(raw, MdnRegressor::head_size(model.K), model.K);
        loss_sum += gmm_nll(trans, target.t) + beta * gmm_nll(rot, target.r);
        if (grads) {
            const Eigen::VectorXd up = MdnRegressor::pack_upstream(
                gmm_nll_grad(trans, target.t), gmm_nll_grad(rot, target.r), beta, model.K);
            backward_accumulate(model.net, trace, up, *grads);
        }
    }
    return loss_sum;
}

namespace detail {

inline void clip_gradient(NetGrads& grads, double max_norm) {
    const double n = std::sqrt(grads.squared_norm());
    if (n > max_norm) grads.scale(max_norm / n);
}

inline std::vector<int> shuffled_indices(int n, Xoshiro256pp& rng) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = n - 1; i > 0; --i)
        std::swap(idx[i], idx[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
    return idx;
}

}  // namespace detail

inline MdnTrainResult train_mdn_regressor(const std::vector<PoseSample>& data,
                                          const TrainConfig& cfg, const MdnLossConfig& loss_cfg,
                                          const std::vector<int>& hidden = {32, 32}) {
    cfg.validate();
    loss_cfg.validate();
    if (data.empty()) throw std::invalid_argument("train_mdn_regressor: empty dataset");
    const int feat_dim = static_cast<int>(data.front().first.size());
    for (const auto& [x, t] : data)
        if (x.size() != feat_dim)
            throw std::invalid_argument("train_mdn_regressor: features not fixed-width");

    Xoshiro256pp rng(cfg.seed);
    std::vector<int> widths{feat_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(MdnRegressor::output_size(loss_cfg.K));

    MdnTrainResult result;
    result.model.K = loss_cfg.K;
    result.model.net = make_dense_net(widths, rng);

    const int n = static_cast<int>(data.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<int> order = detail::shuffled_indices(n, rng);
        const double lr = cfg.lr_at(epoch);
        double epoch_loss = 0.0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int end = std::min(start + cfg.batch_size, n);
            const std::vector<int> batch(order.begin() + start, order.begin() + end);
            NetGrads grads;
            grads.init_zero(result.model.net);
            try {
                epoch_loss += mdn_batch_pass(result.model, data, batch, loss_cfg.beta, &grads);
            } catch (const std::invalid_argument& e) {
                // runaway parameters surface as a degenerate mixture (sigma
                // under/overflow); the trainer validated its inputs up front
                throw TrainingFailure(std::string("train_mdn_regressor: diverged: ") + e.what(),
                                      epoch);
            }
            grads.scale(1.0 / static_cast<double>(batch.size()));
            detail::clip_gradient(grads, cfg.grad_clip);
            sgd_step(result.model.net, grads, lr);
        }
        epoch_loss /= static_cast<double>(n);
        if (!std::isfinite(epoch_loss))
            throw TrainingFailure("train_mdn_regressor: loss diverged", epoch);
        result.epoch_losses.push_back(epoch_loss);
    }
    return result;
}

// Mean NLL-based pose loss over a dataset, without gradients.
inline double mdn_dataset_loss(const MdnRegressor& model, const std::vector<PoseSample>& data,
                               double beta) {
    if (data.empty()) throw std::invalid_argument("mdn_dataset_loss: empty dataset");
    std::vector<int> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    MdnRegressor m = model;
    return mdn_batch_pass(m, data, all, beta, nullptr) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Embedding projector
// ---------------------------------------------------------------------------

// Dense projector whose forward pass ends with L2 normalization, so outputs
// always have unit norm.
struct EmbeddingNet {
    DenseNet net;

    Eigen::VectorXd embed(const Eigen::VectorXd& x) const {
        const Eigen::VectorXd v = forward(net, x);
        const double n = v.norm();
        if (n < 1e-12) throw std::runtime_error("EmbeddingNet: zero-norm raw output");
        return v / n;
    }
};

using VectorTriplet = std::array<Eigen::VectorXd, 3>;  // anchor, positive, negative

struct EmbeddingTrainResult {
    EmbeddingNet model;
    std::vector<double> epoch_losses;  // mean triplet loss per epoch
};

namespace detail {

// d(v/|v|)/dv applied to an upstream gradient g: (g - y (y.g)) / |v|.
inline Eigen::VectorXd normalize_backward(const Eigen::VectorXd& raw,
                                          const Eigen::VectorXd& unit,
                                          const Eigen::VectorXd& g) {
    return (g - unit * unit.dot(g)) / raw.norm();
}

}  // namespace detail

inline EmbeddingTrainResult train_embedding(const std::vector<VectorTriplet>& triplets,
                                            const TrainConfig& cfg, const TripletConfig& tcfg,
                                            int embedding_dim = 128,
                                            const std::vector<int>& hidden = {32, 32}) {
    cfg.validate();
    tcfg.validate();
    if (triplets.empty()) throw std::invalid_argument("train_embedding: no triplets");
    const int feat_dim = static_cast<int>(triplets.front()[0].size());

    Xoshiro256pp rng(cfg.seed);
    std::vector<int> widths{feat_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(embedding_dim);

    EmbeddingTrainResult result;
    result.model.net = make_dense_net(widths, rng);
    DenseNet& net = result.model.net;

    const int n = static_cast<int>(triplets.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<int> order = detail::shuffled_indices(n, rng);
        const double lr = cfg.lr_at(epoch);
        double epoch_loss = 0.0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int end = std::min(start + cfg.batch_size, n);
            NetGrads grads;
            grads.init_zero(net);
            for (int b = start; b < end; ++b) {
                const auto& trip = triplets[order[b]];
                ForwardTrace traces[3];
                Eigen::VectorXd raw[3], unit[3];
                for (int s = 0; s < 3; ++s) {
                    raw[s] = forward_trace(net, trip[s], &traces[s]);
                    const double norm = raw[s].norm();
                    if (norm < 1e-12)
                        throw TrainingFailure("train_embedding: zero-norm embedding", epoch);
                    unit[s] = raw[s] / norm;
                }
                const double loss = triplet_loss(unit[0], unit[1], unit[2], tcfg);
                epoch_loss += loss;
                if (loss > 0.0) {
                    // Subgradients of the active hinge w.r.t. the unit embeddings.
                    const Eigen::VectorXd g_anchor = 2.0 * (unit[2] - unit[1]);
                    const Eigen::VectorXd g_pos = -2.0 * (unit[0] - unit[1]);
                    const Eigen::VectorXd g_neg = 2.0 * (unit[0] - unit[2]);
                    const Eigen::VectorXd g_unit[3] = {g_anchor, g_pos, g_neg};
                    for (int s = 0; s < 3; ++s)
                        backward_accumulate(net, traces[s],
                                            detail::normalize_backward(raw[s], unit[s], g_unit[s]),
                                            grads);
                }
            }
            grads.scale(1.0 / static_cast<double>(end - start));
            detail::clip_gradient(grads, cfg.grad_clip);
            sgd_step(net, grads, lr);
        }
        epoch_loss /= static_cast<double>(n);
        if (!std::isfinite(epoch_loss))
            throw TrainingFailure("train_embedding: loss diverged", epoch);
        result.epoch_losses.push_back(epoch_loss);
    }
    return result;
}

// Mean triplet loss of a projector over a triplet set, without gradients.
inline double embedding_dataset_loss(const EmbeddingNet& model,
                                     const std::vector<VectorTriplet>& triplets,
                                     const TripletConfig& tcfg) {
    if (triplets.empty()) throw std::invalid_argument("embedding_dataset_loss: no triplets");
    double acc = 0.0;
    for (const auto& trip : triplets)
        acc += triplet_loss(model.embed(trip[0]), model.embed(trip[1]), model.embed(trip[2]), tcfg);
    return acc / static_cast<double>(triplets.size());
}

}  // namespace pgslam
