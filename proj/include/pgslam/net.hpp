#pragma once

// Minimal dense network: tanh hidden layers, identity output. Forward pass,
// reverse-mode gradients, and JSON checkpoints (layer shapes + row-major
// weights). Small enough that full training runs in seconds on a CPU.

#include <Eigen/Core>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "rng.hpp"

namespace pgslam {

struct DenseLayer {
    Eigen::MatrixXd W;  // out x in
    Eigen::VectorXd b;  // out
};

struct DenseNet {
    std::vector<DenseLayer> layers;

    int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().W.cols()); }
    int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().W.rows()); }

    int parameter_count() const {
        int n = 0;
        for (const auto& l : layers) n += static_cast<int>(l.W.size() + l.b.size());
        return n;
    }

    void validate() const {
        if (layers.empty()) throw std::invalid_argument("DenseNet: no layers");
        for (size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].W.rows() != layers[i].b.size())
                throw std::invalid_argument("DenseNet: bias/weight row mismatch");
            if (i > 0 && layers[i].W.cols() != layers[i - 1].W.rows())
                throw std::invalid_argument("DenseNet: layer shapes do not chain");
            if (!layers[i].W.allFinite() || !layers[i].b.allFinite())
                throw std::invalid_argument("DenseNet: non-finite parameters");
        }
    }
};

// Glorot-uniform initialization from the given stream.
inline DenseNet make_dense_net(const std::vector<int>& widths, Xoshiro256pp& rng) {
    if (widths.size() < 2) throw std::invalid_argument("make_dense_net: need input and output widths");
    DenseNet net;
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
        DenseLayer l;
        l.W.resize(widths[i + 1], widths[i]);
        l.b = Eigen::VectorXd::Zero(widths[i + 1]);
        const double a = std::sqrt(6.0 / static_cast<double>(widths[i] + widths[i + 1]));
        for (int r = 0; r < l.W.rows(); ++r)
            for (int c = 0; c < l.W.cols(); ++c) l.W(r, c) = rng.uniform(-a, a);
        net.layers.push_back(std::move(l));
    }
    return net;
}

// Forward pass with the per-layer pre-activations and activations kept for
// the backward pass. acts[0] is the input; acts.back() is the output.
struct ForwardTrace {
    std::vector<Eigen::VectorXd> acts;
};

inline Eigen::VectorXd forward_trace(const DenseNet& net, const Eigen::VectorXd& x,
                                     ForwardTrace* trace) {
    if (x.size() != net.input_dim())
        throw std::invalid_argument("forward: input width mismatch");
    Eigen::VectorXd a = x;
    if (trace) trace->acts = {a};
    const size_t last = net.layers.size() - 1;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        Eigen::VectorXd z = net.layers[i].W * a + net.layers[i].b;
        a = i == last ? z : z.array().tanh().matrix();
        if (trace) trace->acts.push_back(a);
    }
    return a;
}

inline Eigen::VectorXd forward(const DenseNet& net, const Eigen::VectorXd& x) {
    return forward_trace(net, x, nullptr);
}

struct NetGrads {
    std::vector<Eigen::MatrixXd> dW;
    std::vector<Eigen::VectorXd> db;

    void init_zero(const DenseNet& net) {
        dW.clear();
        db.clear();
        for (const auto& l : net.layers) {
            dW.push_back(Eigen::MatrixXd::Zero(l.W.rows(), l.W.cols()));
            db.push_back(Eigen::VectorXd::Zero(l.b.size()));
        }
    }

    void scale(double s) {
        for (auto& m : dW) m *= s;
        for (auto& v : db) v *= s;
    }

    double squared_norm() const {
        double n = 0.0;
        for (const auto& m : dW) n += m.squaredNorm();
        for (const auto& v : db) n += v.squaredNorm();
        return n;
    }
};

// Gradients of <upstream, forward(net, x)> w.r.t. all parameters, accumulated
// into `grads` (which must already be shaped via init_zero). The trace must
// come from forward_trace on the same input.
inline void backward_accumulate(const DenseNet& net, const ForwardTrace& trace,
                                const Eigen::VectorXd& upstream, NetGrads& grads) {
    if (upstream.size() != net.output_dim())
        throw std::invalid_argument("backward: upstream width mismatch");
    const int L = static_cast<int>(net.layers.size());
    Eigen::VectorXd delta = upstream;  // output layer is linear
    for (int i = L - 1; i >= 0; --i) {
        grads.dW[i].noalias() += delta * trace.acts[i].transpose();
        grads.db[i] += delta;
        if (i > 0) {
            // tanh'(z) = 1 - tanh(z)^2, and acts[i] already holds tanh(z)
            Eigen::VectorXd back = net.layers[i].W.transpose() * delta;
            delta = (back.array() * (1.0 - trace.acts[i].array().square())).matrix();
        }
    }
}

inline NetGrads backward(const DenseNet& net, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& upstream) {
    ForwardTrace trace;
    forward_trace(net, x, &trace);
    NetGrads g;
    g.init_zero(net);
    backward_accumulate(net, trace, upstream, g);
    return g;
}

inline void sgd_step(DenseNet& net, const NetGrads& grads, double lr) {
    for (size_t i = 0; i < net.layers.size(); ++i) {
        net.layers[i].W -= lr * grads.dW[i];
        net.layers[i].b -= lr * grads.db[i];
    }
}

inline void to_json(nlohmann::json& j, const DenseNet& net) {
    j = nlohmann::json::array();
    for (const auto& l : net.layers) {
        std::vector<double> w(l.W.size());
        for (int r = 0; r < l.W.rows(); ++r)
            for (int c = 0; c < l.W.cols(); ++c) w[r * l.W.cols() + c] = l.W(r, c);
        j.push_back({{"rows", l.W.rows()},
                     {"cols", l.W.cols()},
                     {"weights", w},
                     {"bias", std::vector<double>(l.b.begin(), l.b.end())}});
    }
}

inline void from_json(const nlohmann::json& j, DenseNet& net) {
    net.layers.clear();
    for (const auto& jl : j) {
        DenseLayer l;
        const int rows = jl.at("rows").get<int>();
        const int cols = jl.at("cols").get<int>();
        const auto w = jl.at("weights").get<std::vector<double>>();
        const auto b = jl.at("bias").get<std::vector<double>>();
        if (static_cast<int>(w.size()) != rows * cols || static_cast<int>(b.size()) != rows)
            throw std::invalid_argument("DenseNet: checkpoint shape mismatch");
        l.W.resize(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) l.W(r, c) = w[r * cols + c];
        l.b = Eigen::Map<const Eigen::VectorXd>(b.data(), rows);
        net.layers.push_back(std::move(l));
    }
    net.validate();
}

}  // namespace pgslam
