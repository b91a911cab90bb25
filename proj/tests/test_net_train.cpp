#include <catch2/catch_amalgamated.hpp>

#include <pgslam/metrics.hpp>
#include <pgslam/net.hpp>
#include <pgslam/simulator.hpp>
#include <pgslam/train.hpp>

#include "oracles.hpp"

using namespace pgslam;

namespace {

// Independent forward pass with nothing but index loops.
Eigen::VectorXd forward_by_hand(const DenseNet& net, const Eigen::VectorXd& x) {
    std::vector<double> act(x.begin(), x.end());
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const auto& l = net.layers[li];
        std::vector<double> next(l.W.rows());
        for (int r = 0; r < l.W.rows(); ++r) {
            double acc = l.b[r];
            for (int c = 0; c < l.W.cols(); ++c) acc += l.W(r, c) * act[c];
            next[r] = li + 1 < net.layers.size() ? std::tanh(acc) : acc;
        }
        act = std::move(next);
    }
    return Eigen::Map<Eigen::VectorXd>(act.data(), act.size());
}

bool nets_identical(const DenseNet& a, const DenseNet& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (size_t i = 0; i < a.layers.size(); ++i)
        if (a.layers[i].W != b.layers[i].W || a.layers[i].b != b.layers[i].b) return false;
    return true;
}

}  // namespace

TEST_CASE("forward: zero net, pure linear layer, oracle match") {
    Xoshiro256pp rng(201);
    DenseNet zero = make_dense_net({4, 3, 2}, rng);
    for (auto& l : zero.layers) {
        l.W.setZero();
        l.b.setZero();
    }
    CHECK(forward(zero, Eigen::VectorXd::Ones(4)).cwiseAbs().maxCoeff() == 0.0);

    DenseNet lin = make_dense_net({3, 2}, rng);
    lin.layers[0].b << 0.5, -0.5;
    Eigen::VectorXd x(3);
    x << 1.0, -2.0, 0.5;
    const Eigen::VectorXd want = lin.layers[0].W * x + lin.layers[0].b;
    CHECK(forward(lin, x).isApprox(want, 1e-15));

    for (int trial = 0; trial < 20; ++trial) {
        DenseNet net = make_dense_net({5, 8, 8, 4}, rng);
        Eigen::VectorXd in(5);
        for (int i = 0; i < 5; ++i) in[i] = rng.uniform(-2.0, 2.0);
        CHECK(forward(net, in).isApprox(forward_by_hand(net, in), 1e-13));
    }

    CHECK_THROWS_AS(forward(lin, Eigen::VectorXd::Ones(7)), std::invalid_argument);
}

TEST_CASE("backward: finite differences, zero upstream, linear outer product") {
    Xoshiro256pp rng(203);

    SECTION("all gradients match central finite differences") {
        DenseNet net = make_dense_net({3, 5, 4, 2}, rng);
        Eigen::VectorXd x(3), up(2);
        x << 0.3, -1.1, 0.7;
        up << 1.3, -0.4;
        const NetGrads g = backward(net, x, up);
        for (size_t li = 0; li < net.layers.size(); ++li) {
            for (int r = 0; r < net.layers[li].W.rows(); ++r) {
                for (int c = 0; c < net.layers[li].W.cols(); ++c) {
                    const double fd = oracle::central_diff(
                        [&](double v) {
                            DenseNet n2 = net;
                            n2.layers[li].W(r, c) = v;
                            return up.dot(forward(n2, x));
                        },
                        net.layers[li].W(r, c));
                    CHECK(oracle::grad_close(g.dW[li](r, c), fd));
                }
                const double fd_b = oracle::central_diff(
                    [&](double v) {
                        DenseNet n2 = net;
                        n2.layers[li].b[r] = v;
                        return up.dot(forward(n2, x));
                    },
                    net.layers[li].b[r]);
                CHECK(oracle::grad_close(g.db[li][r], fd_b));
            }
        }
    }

    SECTION("zero upstream yields zero gradients") {
        DenseNet net = make_dense_net({3, 4, 2}, rng);
        const NetGrads g = backward(net, Eigen::VectorXd::Ones(3), Eigen::VectorXd::Zero(2));
        CHECK(g.squared_norm() == 0.0);
    }

    SECTION("single linear layer: weight gradient is the outer product") {
        DenseNet lin = make_dense_net({3, 2}, rng);
        Eigen::VectorXd x(3), up(2);
        x << 1.0, 2.0, -1.0;
        up << 0.5, -2.0;
        const NetGrads g = backward(lin, x, up);
        CHECK(g.dW[0].isApprox(up * x.transpose(), 1e-15));
        CHECK(g.db[0].isApprox(up, 1e-15));
    }
}

TEST_CASE("triplet loss: hinge cases and finite-difference subgradient") {
    TripletConfig cfg;
    cfg.lambda = 0.2;

    Eigen::VectorXd a(2), n(2);
    a << 1.0, 0.0;
    n << 1.0, std::sqrt(0.5);  // |a-n|^2 = 0.5
    CHECK(triplet_loss(a, a, n, cfg) == 0.0);

    Eigen::VectorXd p(2), q(2);
    p << 0.0, 1.0;
    q << 0.0, -1.0;  // equidistant from a
    CHECK(triplet_loss(a, p, q, cfg) == Catch::Approx(cfg.lambda));

    // anchor == positive, orthogonal unit negative: margin 0.2 << 2
    Eigen::VectorXd e1(2), e2(2);
    e1 << 1.0, 0.0;
    e2 << 0.0, 1.0;
    CHECK(triplet_loss(e1, e1, e2, cfg) == 0.0);

    CHECK_THROWS_AS(triplet_loss(a, p, Eigen::VectorXd::Ones(3), cfg), std::invalid_argument);

    Xoshiro256pp rng(207);
    int active_checked = 0;
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::VectorXd ta(3), tp(3), tn(3);
        for (int i = 0; i < 3; ++i) {
            ta[i] = rng.uniform(-1.0, 1.0);
            tp[i] = rng.uniform(-1.0, 1.0);
            tn[i] = rng.uniform(-1.0, 1.0);
        }
        const double margin = cfg.lambda + (ta - tp).squaredNorm() - (ta - tn).squaredNorm();
        if (std::abs(margin) < 0.05) continue;  // stay away from the hinge
        ++active_checked;
        const Eigen::VectorXd grad_a = margin > 0
                                           ? Eigen::VectorXd(2.0 * (tn - tp))
                                           : Eigen::VectorXd(Eigen::VectorXd::Zero(3));
        for (int i = 0; i < 3; ++i) {
            const double fd = oracle::central_diff(
                [&](double v) {
                    Eigen::VectorXd aa = ta;
                    aa[i] = v;
                    return triplet_loss(aa, tp, tn, cfg);
                },
                ta[i]);
            CHECK(oracle::grad_close(grad_a[i], fd));
        }
    }
    CHECK(active_checked > 10);
}

TEST_CASE("mine_triplets: exclusion radius, doubling, determinism, failure") {
    TripletConfig cfg;
    cfg.adjacency_exclusion = 18;

    SECTION("negatives never fall inside the exclusion bands") {
        Xoshiro256pp rng(209);
        const auto trips = mine_triplets({{0, 100}}, 200, cfg, rng);
        REQUIRE(trips.size() == 2);
        for (const auto& t : trips) {
            CHECK(std::abs(t.negative - 0) > 18);
            CHECK(std::abs(t.negative - 100) > 18);
        }
        CHECK(trips[0].anchor == 0);
        CHECK(trips[0].positive == 100);
        CHECK(trips[1].anchor == 100);
        CHECK(trips[1].positive == 0);
    }

    SECTION("P pairs yield 2P triplets") {
        Xoshiro256pp rng(211);
        const std::vector<std::pair<int, int>> pairs{{0, 50}, {10, 60}, {20, 70}, {5, 90}};
        CHECK(mine_triplets(pairs, 200, cfg, rng).size() == 2 * pairs.size());
    }

    SECTION("fixed seed reproduces identical triplets") {
        Xoshiro256pp ra(213), rb(213);
        const auto ta = mine_triplets({{0, 100}, {30, 130}}, 200, cfg, ra);
        const auto tb = mine_triplets({{0, 100}, {30, 130}}, 200, cfg, rb);
        REQUIRE(ta.size() == tb.size());
        for (size_t i = 0; i < ta.size(); ++i) {
            CHECK(ta[i].anchor == tb[i].anchor);
            CHECK(ta[i].positive == tb[i].positive);
            CHECK(ta[i].negative == tb[i].negative);
        }
    }

    SECTION("no valid negative raises a mining error") {
        Xoshiro256pp rng(217);
        CHECK_THROWS_AS(mine_triplets({{0, 30}}, 40, cfg, rng), std::runtime_error);
    }
}

TEST_CASE("train_mdn_regressor: constant target converges to the constant") {
    std::vector<PoseSample> data;
    Xoshiro256pp rng(219);
    for (int i = 0; i < 120; ++i) {
        Eigen::VectorXd f(2);
        f << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0);
        data.emplace_back(f, Pose6(0.7, -0.3, 0.2, 0.05, -0.02, 0.1));
    }
    TrainConfig cfg;
    cfg.epochs = 250;
    cfg.learning_rate = 0.08;
    cfg.seed = 7;
    MdnLossConfig loss_cfg;
    loss_cfg.beta = 1.0;
    loss_cfg.K = 1;
    const MdnTrainResult res = train_mdn_regressor(data, cfg, loss_cfg);

    Eigen::VectorXd probe(2);
    probe << 0.3, -0.3;
    const auto [trans, rot] = res.model.predict(probe);
    CHECK((trans.mus.row(0).transpose() - Eigen::Vector3d(0.7, -0.3, 0.2)).cwiseAbs().maxCoeff() <
          0.05);
    CHECK((rot.mus.row(0).transpose() - Eigen::Vector3d(0.05, -0.02, 0.1)).cwiseAbs().maxCoeff() <
          0.05);
    CHECK(res.epoch_losses.back() < res.epoch_losses.front());
}

TEST_CASE("train_mdn_regressor: heteroscedastic 1-D toy recovers the noise profile") {
    // target x = feature + gaussian noise whose sigma grows with the feature
    std::vector<PoseSample> data, heldout;
    Xoshiro256pp rng(223);
    const auto true_sigma = [](double f) { return 0.02 + 0.25 * f; };
    for (int i = 0; i < 600; ++i) {
        const double f = rng.uniform(0.0, 1.0);
        const double target = f + rng.gaussian(0.0, true_sigma(f));
        Eigen::VectorXd feat(1);
        feat << f;
        (i < 450 ? data : heldout).emplace_back(feat, Pose6(target, 0, 0, 0, 0, 0));
    }
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.learning_rate = 0.04;
    cfg.seed = 11;
    MdnLossConfig loss_cfg;
    loss_cfg.beta = 1.0;
    loss_cfg.K = 1;
    const MdnTrainResult res = train_mdn_regressor(data, cfg, loss_cfg);

    std::vector<double> predicted, truth;
    for (const auto& [f, pose] : heldout) {
        const auto [trans, rot] = res.model.predict(f);
        predicted.push_back(trans.sigmas(0, 0));
        truth.push_back(true_sigma(f[0]));
    }
    const CorrelationResult corr = uncertainty_correlation(truth, predicted);
    CHECK(corr.pearson > 0.5);

    // training objective moved substantially from its starting point
    CHECK(res.epoch_losses.back() < 0.7 * res.epoch_losses.front());
}

TEST_CASE("train_mdn_regressor: loss drops >= 30% on the simulator odometry task") {
    WorldSpec spec;
    spec.turn_noise_multiplier = 5.0;
    spec.nuc_intervals = {{60, 75, 6.0}};
    spec.seed = 29;
    const auto data = odometry_regression_data(generate(spec));
    TrainConfig cfg;
    cfg.epochs = 80;
    cfg.learning_rate = 0.03;
    cfg.seed = 4;
    MdnLossConfig loss_cfg;
    loss_cfg.beta = 1.0;
    const MdnTrainResult res = train_mdn_regressor(data, cfg, loss_cfg);
    CHECK(res.epoch_losses.back() <= 0.7 * res.epoch_losses.front());
}

TEST_CASE("train_mdn_regressor: determinism and failure reporting") {
    std::vector<PoseSample> data;
    Xoshiro256pp rng(227);
    for (int i = 0; i < 60; ++i) {
        Eigen::VectorXd f(1);
        f << rng.uniform(-1.0, 1.0);
        data.emplace_back(f, Pose6(f[0], 0, 0, 0, 0, 0));
    }
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.seed = 5;
    MdnLossConfig loss_cfg;

    const MdnTrainResult a = train_mdn_regressor(data, cfg, loss_cfg);
    const MdnTrainResult b = train_mdn_regressor(data, cfg, loss_cfg);
    CHECK(nets_identical(a.model.net, b.model.net));
    CHECK(a.epoch_losses == b.epoch_losses);

    TrainConfig diverge = cfg;
    diverge.learning_rate = 1e18;
    diverge.grad_clip = 1e30;
    CHECK_THROWS_AS(train_mdn_regressor(data, diverge, loss_cfg), TrainingFailure);

    CHECK_THROWS_AS(train_mdn_regressor({}, cfg, loss_cfg), std::invalid_argument);
}

TEST_CASE("K=10 beats K=1 on a bimodal target (held-out NLL)") {
    const auto train_set = multimodal_regression_data(400, 31);
    const auto held_set = multimodal_regression_data(200, 77);

    TrainConfig cfg;
    cfg.epochs = 150;
    cfg.learning_rate = 0.05;
    cfg.seed = 3;

    MdnLossConfig k1;
    k1.K = 1;
    k1.beta = 1.0;
    MdnLossConfig k10;
    k10.K = 10;
    k10.beta = 1.0;

    const MdnTrainResult m1 = train_mdn_regressor(train_set, cfg, k1);
    const MdnTrainResult m10 = train_mdn_regressor(train_set, cfg, k10);
    const double nll1 = mdn_dataset_loss(m1.model, held_set, 1.0);
    const double nll10 = mdn_dataset_loss(m10.model, held_set, 1.0);
    CHECK(nll10 <= nll1);
}

TEST_CASE("train_embedding: simulator revisit task halves the triplet loss") {
    WorldSpec spec;
    spec.n_frames = 160;
    spec.seed = 41;
    spec.observation_noise = 0.15;
    const SyntheticScenario sc = generate(spec);
    REQUIRE(sc.true_loops.size() >= 4);

    std::vector<std::pair<int, int>> pairs;
    for (const auto& tl : sc.true_loops) pairs.emplace_back(tl.i, tl.j);

    TripletConfig tcfg;
    Xoshiro256pp mine_rng(43);
    const auto index_triplets = mine_triplets(pairs, sc.n_frames(), tcfg, mine_rng);
    std::vector<VectorTriplet> triplets;
    for (const auto& t : index_triplets)
        triplets.push_back(
            {sc.observations[t.anchor], sc.observations[t.positive], sc.observations[t.negative]});

    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.learning_rate = 0.05;
    cfg.seed = 13;
    const EmbeddingTrainResult res = train_embedding(triplets, cfg, tcfg, 32);
    CHECK(res.epoch_losses.back() <= 0.5 * res.epoch_losses.front());

    // normalization is part of forward
    for (int k = 0; k < sc.n_frames(); k += 17)
        CHECK(res.model.embed(sc.observations[k]).norm() == Catch::Approx(1.0).margin(1e-9));

    const EmbeddingTrainResult res2 = train_embedding(triplets, cfg, tcfg, 32);
    CHECK(nets_identical(res.model.net, res2.model.net));
}

TEST_CASE("end-to-end gradient through MDN heads passes finite differences") {
    Xoshiro256pp rng(229);
    MdnRegressor model;
    model.K = 2;
    model.net = make_dense_net({2, 6, MdnRegressor::output_size(2)}, rng);

    Eigen::VectorXd x(2);
    x << 0.4, -0.9;
    const Pose6 target(0.2, -0.1, 0.3, 0.05, 0.02, -0.04);
    const double beta = 2.5;

    const auto loss_of = [&](const DenseNet& net) {
        MdnRegressor m;
        m.K = 2;
        m.net = net;
        const auto [t, r] = m.predict(x);
        return gmm_nll(t, target.t) + beta * gmm_nll(r, target.r);
    };

    ForwardTrace trace;
    const Eigen::VectorXd raw = forward_trace(model.net, x, &trace);
    const GmmParams t = MdnRegressor::unpack_head(raw, 0, 2);
    const GmmParams r = MdnRegressor::unpack_head(raw, MdnRegressor::head_size(2), 2);
    const Eigen::VectorXd up = MdnRegressor::pack_upstream(gmm_nll_grad(t, target.t),
                                                           gmm_nll_grad(r, target.r), beta, 2);
    NetGrads grads;
    grads.init_zero(model.net);
    backward_accumulate(model.net, trace, up, grads);

    for (size_t li = 0; li < model.net.layers.size(); ++li)
        for (int rr = 0; rr < model.net.layers[li].W.rows(); ++rr)
            for (int cc = 0; cc < model.net.layers[li].W.cols(); ++cc) {
                const double fd = oracle::central_diff(
                    [&](double v) {
                        DenseNet n2 = model.net;
                        n2.layers[li].W(rr, cc) = v;
                        return loss_of(n2);
                    },
                    model.net.layers[li].W(rr, cc));
                CHECK(oracle::grad_close(grads.dW[li](rr, cc), fd));
            }
}

TEST_CASE("end-to-end gradient through normalization and triplet loss") {
    Xoshiro256pp rng(231);
    DenseNet net = make_dense_net({4, 6, 3}, rng);
    TripletConfig tcfg;
    tcfg.lambda = 0.8;  // wide margin keeps the hinge active at init

    // negative nearly equal to the anchor forces the hinge active
    VectorTriplet trip;
    for (int s = 0; s < 2; ++s) {
        Eigen::VectorXd v(4);
        for (int i = 0; i < 4; ++i) v[i] = rng.uniform(-1.0, 1.0);
        trip[s] = v;
    }
    trip[2] = trip[0] + Eigen::VectorXd::Constant(4, 0.05);

    const auto loss_of = [&](const DenseNet& n) {
        EmbeddingNet model;
        model.net = n;
        return triplet_loss(model.embed(trip[0]), model.embed(trip[1]), model.embed(trip[2]),
                            tcfg);
    };
    REQUIRE(loss_of(net) > 0.01);  // hinge active, gradient well-defined

    // assemble the analytic gradient the trainer uses
    NetGrads grads;
    grads.init_zero(net);
    ForwardTrace traces[3];
    Eigen::VectorXd raw[3], unit[3];
    for (int s = 0; s < 3; ++s) {
        raw[s] = forward_trace(net, trip[s], &traces[s]);
        unit[s] = raw[s] / raw[s].norm();
    }
    const Eigen::VectorXd g_unit[3] = {2.0 * (unit[2] - unit[1]), -2.0 * (unit[0] - unit[1]),
                                       2.0 * (unit[0] - unit[2])};
    for (int s = 0; s < 3; ++s) {
        const Eigen::VectorXd up =
            (g_unit[s] - unit[s] * unit[s].dot(g_unit[s])) / raw[s].norm();
        backward_accumulate(net, traces[s], up, grads);
    }

    for (size_t li = 0; li < net.layers.size(); ++li) {
        for (int r = 0; r < net.layers[li].W.rows(); ++r) {
            for (int c = 0; c < net.layers[li].W.cols(); ++c) {
                const double fd = oracle::central_diff(
                    [&](double v) {
                        DenseNet n2 = net;
                        n2.layers[li].W(r, c) = v;
                        return loss_of(n2);
                    },
                    net.layers[li].W(r, c));
                CHECK(oracle::grad_close(grads.dW[li](r, c), fd));
            }
            const double fd_b = oracle::central_diff(
                [&](double v) {
                    DenseNet n2 = net;
                    n2.layers[li].b[r] = v;
                    return loss_of(n2);
                },
                net.layers[li].b[r]);
            CHECK(oracle::grad_close(grads.db[li][r], fd_b));
        }
    }
}

TEST_CASE("DenseNet JSON checkpoint round-trips") {
    Xoshiro256pp rng(233);
    const DenseNet net = make_dense_net({3, 5, 2}, rng);
    const nlohmann::json j = net;
    DenseNet back = j.get<DenseNet>();
    CHECK(nets_identical(net, back));
}
