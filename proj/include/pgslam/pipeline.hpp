#pragma once

// Batch pipeline over the scenario files: simulate -> (train) -> detect ->
// reject -> optimize -> evaluate, plus parameter sweeps. Every stage reads
// and writes files in one run directory, so stages are independently
// runnable; which loop-proposal file feeds the optimizer follows from the
// configuration alone. All stage randomness derives from the single run
// seed, making every output file a deterministic function of (config, seed).

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "io.hpp"
#include "loop_detect.hpp"
#include "metrics.hpp"
#include "outlier_rejection.hpp"
#include "pose_graph.hpp"
#include "simulator.hpp"
#include "train.hpp"

namespace pgslam {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StageError : std::runtime_error {
    int stage_index;
    std::string stage_name;
    StageError(int idx, const std::string& name, const std::string& msg)
        : std::runtime_error("stage " + name + ": " + msg), stage_index(idx), stage_name(name) {}
};

enum class CovarianceMode { mdn_both, identity_both, mdn_odom_only, mdn_loop_only };

inline std::string to_string(CovarianceMode m) {
    switch (m) {
        case CovarianceMode::mdn_both: return "mdn_both";
        case CovarianceMode::identity_both: return "identity_both";
        case CovarianceMode::mdn_odom_only: return "mdn_odom_only";
        case CovarianceMode::mdn_loop_only: return "mdn_loop_only";
    }
    throw ConfigError("unknown covariance mode");
}

inline CovarianceMode covariance_mode_from_string(const std::string& s) {
    if (s == "mdn_both") return CovarianceMode::mdn_both;
    if (s == "identity_both") return CovarianceMode::identity_both;
    if (s == "mdn_odom_only") return CovarianceMode::mdn_odom_only;
    if (s == "mdn_loop_only") return CovarianceMode::mdn_loop_only;
    throw ConfigError("unknown covariance_mode: " + s);
}

struct DetectStageConfig {
    bool enabled = true;
    LoopDetectConfig detect;
    bool gate_proposals = true;          // restrict back-end proposals to detected pairs
    double gt_distance_threshold = 0.5;  // m, labels for ROC reporting
    double gt_heading_threshold = 0.2;   // rad
};

struct RejectStageConfig {
    bool enabled = true;
    RejectionConfig reject;
};

struct TrainStageConfig {
    bool embedding_enabled = false;
    TrainConfig embedding_train;
    TripletConfig triplet;
    int embedding_dim = 128;
    int mining_rounds = 8;  // negative resampling rounds per loop pair

    bool mdn_enabled = false;
    TrainConfig mdn_train;
    MdnLossConfig mdn_loss;
    double heldout_fraction = 0.3;
};

struct BackendStageConfig {
    BackendConfig backend;
    CovarianceMode covariance_mode = CovarianceMode::mdn_both;
};

struct PipelineConfig {
    WorldSpec world;
    TrainStageConfig train;
    DetectStageConfig detect;
    RejectStageConfig reject;
    BackendStageConfig optimize;
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 1;

    // every stage's randomness is a fixed function of the run seed
    std::uint64_t world_seed() const { return hash_combine(seed, 0x51); }
    std::uint64_t reject_seed() const { return hash_combine(seed, 0x52); }
    std::uint64_t embedding_seed() const { return hash_combine(seed, 0x53); }
    std::uint64_t mdn_seed() const { return hash_combine(seed, 0x54); }

    // copy with all stage seeds derived from the run seed; applied on every
    // pipeline entry so hand-built configs behave like parsed ones
    PipelineConfig finalized() const {
        PipelineConfig c = *this;
        c.world.seed = world_seed();
        c.reject.reject.seed = reject_seed();
        c.train.embedding_train.seed = embedding_seed();
        c.train.mdn_train.seed = mdn_seed();
        return c;
    }
};

// ---------------------------------------------------------------------------
// config parsing: defaults everywhere, unknown keys rejected
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_train_config(const nlohmann::json& j, const std::string& where, TrainConfig& cfg) {
    check_keys(j, {"enabled", "epochs", "learning_rate", "batch_size", "lr_decay",
                   "lr_decay_interval", "grad_clip", "embedding_dim", "lambda",
                   "adjacency_exclusion", "mining_rounds", "K", "beta", "heldout_fraction"},
               where);
    read_field(j, "epochs", cfg.epochs);
    read_field(j, "learning_rate", cfg.learning_rate);
    read_field(j, "batch_size", cfg.batch_size);
    read_field(j, "lr_decay", cfg.lr_decay);
    read_field(j, "lr_decay_interval", cfg.lr_decay_interval);
    read_field(j, "grad_clip", cfg.grad_clip);
}

}  // namespace detail

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
    detail::check_keys(
        j, {"world", "train", "detect", "reject", "backend", "output_dir", "seed"}, "config");
    PipelineConfig cfg;

    try {
        if (j.contains("world")) {
            nlohmann::json w = nlohmann::json(WorldSpec{});
            detail::check_keys(j.at("world"),
                               {"shape", "n_frames", "step_length", "odom_noise",
                                "turn_noise_multiplier", "nuc_intervals", "place_grid_resolution",
                                "observation_noise", "observation_nuisance",
                                "loop_noise_multiplier", "loop_cov_overestimate",
                                "false_loop_rate", "false_loop_offset",
                                "max_proposals", "seed"},
                               "world");
            w.update(j.at("world"));
            cfg.world = w.get<WorldSpec>();
        }

        if (j.contains("train")) {
            const auto& t = j.at("train");
            detail::check_keys(t, {"embedding", "mdn"}, "train");
            if (t.contains("embedding")) {
                const auto& e = t.at("embedding");
                detail::read_train_config(e, "train.embedding", cfg.train.embedding_train);
                detail::read_field(e, "enabled", cfg.train.embedding_enabled);
                detail::read_field(e, "embedding_dim", cfg.train.embedding_dim);
                detail::read_field(e, "lambda", cfg.train.triplet.lambda);
                detail::read_field(e, "adjacency_exclusion", cfg.train.triplet.adjacency_exclusion);
                detail::read_field(e, "mining_rounds", cfg.train.mining_rounds);
            }
            if (t.contains("mdn")) {
                const auto& m = t.at("mdn");
                detail::read_train_config(m, "train.mdn", cfg.train.mdn_train);
                detail::read_field(m, "enabled", cfg.train.mdn_enabled);
                detail::read_field(m, "K", cfg.train.mdn_loss.K);
                detail::read_field(m, "beta", cfg.train.mdn_loss.beta);
                detail::read_field(m, "heldout_fraction", cfg.train.heldout_fraction);
            }
        }

        if (j.contains("detect")) {
            const auto& d = j.at("detect");
            detail::check_keys(d,
                               {"enabled", "zeta", "adjacency_exclusion",
                                "threshold_raw_similarity", "gate_proposals",
                                "gt_distance_threshold", "gt_heading_threshold"},
                               "detect");
            detail::read_field(d, "enabled", cfg.detect.enabled);
            detail::read_field(d, "zeta", cfg.detect.detect.zeta);
            detail::read_field(d, "adjacency_exclusion", cfg.detect.detect.adjacency_exclusion);
            detail::read_field(d, "threshold_raw_similarity",
                               cfg.detect.detect.threshold_raw_similarity);
            detail::read_field(d, "gate_proposals", cfg.detect.gate_proposals);
            detail::read_field(d, "gt_distance_threshold", cfg.detect.gt_distance_threshold);
            detail::read_field(d, "gt_heading_threshold", cfg.detect.gt_heading_threshold);
        }

        if (j.contains("reject")) {
            const auto& r = j.at("reject");
            detail::check_keys(
                r, {"enabled", "chi2_threshold", "pass_rate_threshold", "max_pairings_per_proposal"},
                "reject");
            detail::read_field(r, "enabled", cfg.reject.enabled);
            detail::read_field(r, "chi2_threshold", cfg.reject.reject.chi2_threshold);
            detail::read_field(r, "pass_rate_threshold", cfg.reject.reject.pass_rate_threshold);
            detail::read_field(r, "max_pairings_per_proposal",
                               cfg.reject.reject.max_pairings_per_proposal);
        }

        if (j.contains("backend")) {
            const auto& b = j.at("backend");
            detail::check_keys(b,
                               {"varrho", "rho", "max_iterations", "lm_lambda_init",
                                "convergence_tol", "scales_multiply_information",
                                "covariance_mode"},
                               "backend");
            detail::read_field(b, "varrho", cfg.optimize.backend.varrho);
            detail::read_field(b, "rho", cfg.optimize.backend.rho);
            detail::read_field(b, "max_iterations", cfg.optimize.backend.max_iterations);
            detail::read_field(b, "lm_lambda_init", cfg.optimize.backend.lm_lambda_init);
            detail::read_field(b, "convergence_tol", cfg.optimize.backend.convergence_tol);
            detail::read_field(b, "scales_multiply_information",
                               cfg.optimize.backend.scales_multiply_information);
            if (b.contains("covariance_mode"))
                cfg.optimize.covariance_mode =
                    covariance_mode_from_string(b.at("covariance_mode").get<std::string>());
        }

        if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();

        cfg.world.seed = cfg.world_seed();
        cfg.reject.reject.seed = cfg.reject_seed();
        cfg.train.embedding_train.seed = cfg.embedding_seed();
        cfg.train.mdn_train.seed = cfg.mdn_seed();

        cfg.world.validate();
        cfg.detect.detect.validate();
        cfg.reject.reject.validate();
        cfg.optimize.backend.validate();
        cfg.train.embedding_train.validate();
        cfg.train.mdn_train.validate();
        cfg.train.triplet.validate();
        cfg.train.mdn_loss.validate();
        if (cfg.train.heldout_fraction <= 0.0 || cfg.train.heldout_fraction >= 1.0)
            throw ConfigError("train.mdn.heldout_fraction must be in (0, 1)");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["world"] = cfg.world;
    j["train"] = {{"embedding",
                   {{"enabled", cfg.train.embedding_enabled},
                    {"epochs", cfg.train.embedding_train.epochs},
                    {"learning_rate", cfg.train.embedding_train.learning_rate},
                    {"batch_size", cfg.train.embedding_train.batch_size},
                    {"lr_decay", cfg.train.embedding_train.lr_decay},
                    {"lr_decay_interval", cfg.train.embedding_train.lr_decay_interval},
                    {"grad_clip", cfg.train.embedding_train.grad_clip},
                    {"embedding_dim", cfg.train.embedding_dim},
                    {"lambda", cfg.train.triplet.lambda},
                    {"adjacency_exclusion", cfg.train.triplet.adjacency_exclusion},
                    {"mining_rounds", cfg.train.mining_rounds}}},
                  {"mdn",
                   {{"enabled", cfg.train.mdn_enabled},
                    {"epochs", cfg.train.mdn_train.epochs},
                    {"learning_rate", cfg.train.mdn_train.learning_rate},
                    {"batch_size", cfg.train.mdn_train.batch_size},
                    {"lr_decay", cfg.train.mdn_train.lr_decay},
                    {"lr_decay_interval", cfg.train.mdn_train.lr_decay_interval},
                    {"grad_clip", cfg.train.mdn_train.grad_clip},
                    {"K", cfg.train.mdn_loss.K},
                    {"beta", cfg.train.mdn_loss.beta},
                    {"heldout_fraction", cfg.train.heldout_fraction}}}};
    j["detect"] = {{"enabled", cfg.detect.enabled},
                   {"zeta", cfg.detect.detect.zeta},
                   {"adjacency_exclusion", cfg.detect.detect.adjacency_exclusion},
                   {"threshold_raw_similarity", cfg.detect.detect.threshold_raw_similarity},
                   {"gate_proposals", cfg.detect.gate_proposals},
                   {"gt_distance_threshold", cfg.detect.gt_distance_threshold},
                   {"gt_heading_threshold", cfg.detect.gt_heading_threshold}};
    j["reject"] = {{"enabled", cfg.reject.enabled},
                   {"chi2_threshold", cfg.reject.reject.chi2_threshold},
                   {"pass_rate_threshold", cfg.reject.reject.pass_rate_threshold},
                   {"max_pairings_per_proposal", cfg.reject.reject.max_pairings_per_proposal}};
    j["backend"] = {{"varrho", cfg.optimize.backend.varrho},
                    {"rho", cfg.optimize.backend.rho},
                    {"max_iterations", cfg.optimize.backend.max_iterations},
                    {"lm_lambda_init", cfg.optimize.backend.lm_lambda_init},
                    {"convergence_tol", cfg.optimize.backend.convergence_tol},
                    {"scales_multiply_information",
                     cfg.optimize.backend.scales_multiply_information},
                    {"covariance_mode", to_string(cfg.optimize.covariance_mode)}};
    j["output_dir"] = cfg.output_dir.string();
    j["seed"] = cfg.seed;
    return j;
}

inline std::uint64_t config_hash(const PipelineConfig& cfg) {
    const std::string dump = pipeline_config_to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : dump) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"simulate", "train",    "detect",
                                                "reject",   "optimize", "evaluate"};
    return names;
}

namespace stage {

inline void simulate(const PipelineConfig& cfg, const std::filesystem::path& dir) {
    const SyntheticScenario sc = generate(cfg.world);
    save_scenario(dir, cfg.world, sc);
}

inline void train(const PipelineConfig& cfg, const std::filesystem::path& dir) {
    if (!cfg.train.embedding_enabled && !cfg.train.mdn_enabled) return;
    const LoadedScenario loaded = load_scenario(dir);
    const SyntheticScenario& sc = loaded.scenario;
    nlohmann::json metrics;

    if (cfg.train.embedding_enabled) {
        std::vector<std::pair<int, int>> pairs;
        for (size_t k = 0; k < sc.proposals.size(); ++k)
            if (sc.proposal_is_true[k]) pairs.emplace_back(sc.proposals[k].i, sc.proposals[k].j);
        if (pairs.empty()) throw std::runtime_error("no true loop pairs to mine triplets from");

        Xoshiro256pp mine_rng(hash_combine(cfg.embedding_seed(), 1));
        std::vector<VectorTriplet> triplets;
        for (int round = 0; round < std::max(1, cfg.train.mining_rounds); ++round)
            for (const auto& t : mine_triplets(pairs, sc.n_frames(), cfg.train.triplet, mine_rng))
                triplets.push_back({sc.observations[t.anchor], sc.observations[t.positive],
                                    sc.observations[t.negative]});

        const EmbeddingTrainResult res = train_embedding(
            triplets, cfg.train.embedding_train, cfg.train.triplet, cfg.train.embedding_dim);
        open_out(dir / "embedding_net.json") << nlohmann::json(res.model.net).dump() << '\n';
        std::vector<std::vector<std::string>> rows;
        for (size_t e = 0; e < res.epoch_losses.size(); ++e)
            rows.push_back({std::to_string(e), fmt(res.epoch_losses[e])});
        write_csv(dir / "embedding_curve.csv", "epoch,loss", rows);
        metrics["embedding_loss_initial"] = res.epoch_losses.front();
        metrics["embedding_loss_final"] = res.epoch_losses.back();
    }

    if (cfg.train.mdn_enabled) {
        const auto data = odometry_regression_data(sc);
        // deterministic shuffled split
        Xoshiro256pp split_rng(hash_combine(cfg.mdn_seed(), 2));
        std::vector<int> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[split_rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
        const int n_held = std::max(1, static_cast<int>(data.size() * cfg.train.heldout_fraction));
        std::vector<PoseSample> train_set, held_set;
        std::vector<int> held_idx;
        for (size_t k = 0; k < order.size(); ++k) {
            if (static_cast<int>(k) < n_held) {
                held_set.push_back(data[order[k]]);
                held_idx.push_back(order[k]);
            } else {
                train_set.push_back(data[order[k]]);
            }
        }

        const MdnTrainResult res =
            train_mdn_regressor(train_set, cfg.train.mdn_train, cfg.train.mdn_loss);
        open_out(dir / "mdn_net.json") << nlohmann::json(res.model.net).dump() << '\n';
        std::vector<std::vector<std::string>> rows;
        for (size_t e = 0; e < res.epoch_losses.size(); ++e)
            rows.push_back({std::to_string(e), fmt(res.epoch_losses[e])});
        write_csv(dir / "mdn_curve.csv", "epoch,loss", rows);

        metrics["mdn_loss_initial"] = res.epoch_losses.front();
        metrics["mdn_loss_final"] = res.epoch_losses.back();
        metrics["mdn_heldout_nll"] =
            mdn_dataset_loss(res.model, held_set, cfg.train.mdn_loss.beta);
        metrics["mdn_k"] = cfg.train.mdn_loss.K;

        // predicted translation sigma vs realized translation error, held out
        std::vector<double> sigmas, errors;
        for (size_t k = 0; k < held_set.size(); ++k) {
            const auto& [feat, measured] = held_set[k];
            const auto [trans, rot] = res.model.predict(feat);
            const auto [mode, var] = mode_pose(trans, rot);
            sigmas.push_back(std::sqrt(var.head<3>().sum()));
            const Pose6 cmd = relative(sc.gt_trajectory[held_idx[k]],
                                       sc.gt_trajectory[held_idx[k] + 1]);
            errors.push_back((measured.t - cmd.t).norm());
        }
        try {
            const CorrelationResult corr = uncertainty_correlation(errors, sigmas);
            metrics["uncertainty_pearson"] = corr.pearson;
            metrics["uncertainty_spearman"] = corr.spearman;
        } catch (const std::invalid_argument&) {
            // constant predictions or errors (e.g. a homoscedastic world
            // whose held-out frames are all alike): no correlation to report
            metrics["uncertainty_pearson"] = nullptr;
            metrics["uncertainty_spearman"] = nullptr;
        }
    }

    open_out(dir / "train_metrics.json") << metrics.dump(2) << '\n';
}

inline void detect(const PipelineConfig& cfg, const std::filesystem::path& dir) {
    if (!cfg.detect.enabled) return;
    const LoadedScenario loaded = load_scenario(dir);
    const SyntheticScenario& sc = loaded.scenario;

    // embeddings: the trained projector when present, raw normalized
    // observations otherwise
    std::vector<Embedding> embeddings;
    if (cfg.train.embedding_enabled) {
        nlohmann::json j;
        open_in(dir / "embedding_net.json") >> j;
        EmbeddingNet net;
        net.net = j.get<DenseNet>();
        for (const auto& obs : sc.observations) embeddings.push_back(Embedding(net.embed(obs)));
    } else {
        for (const auto& obs : sc.observations) embeddings.push_back(Embedding(obs));
    }

    write_embeddings_jsonl(dir / "embeddings.jsonl", embeddings);
    write_similarity_csv(dir / "similarity.csv", similarity_matrix(embeddings));

    const std::vector<DetectedLoop> loops = detect_loops(embeddings, cfg.detect.detect);
    write_loops_csv(dir / "loops.csv", loops);

    // ROC of the discrepancy scores against ground-truth revisit labels,
    // over all candidate pairs outside the adjacency band
    const auto labels = gt_loop_labels(sc, cfg.detect.gt_distance_threshold,
                                       cfg.detect.gt_heading_threshold);
    std::vector<double> scores;
    std::vector<bool> truth;
    for (const auto& l : labels) {
        if (l.j - l.i <= cfg.detect.detect.adjacency_exclusion) continue;
        scores.push_back(discrepancy(embeddings[l.i], embeddings[l.j]));
        truth.push_back(l.positive);
    }
    nlohmann::json metrics;
    metrics["n_detected"] = loops.size();
    try {
        const RocResult r = roc(scores, truth);
        metrics["auc"] = r.auc;
        metrics["tpr_at_fpr20"] = r.tpr_at_fpr(0.2);
    } catch (const std::invalid_argument&) {
        metrics["auc"] = nullptr;  // no positives among the candidates
    }
    open_out(dir / "detect_metrics.json") << metrics.dump(2) << '\n';

    if (cfg.detect.gate_proposals) {
        std::set<std::pair<int, int>> detected;
        std::map<std::pair<int, int>, double> detected_score;
        for (const auto& l : loops) {
            detected.insert({l.i, l.j});
            detected_score[{l.i, l.j}] = l.score;
        }
        std::vector<LoopProposal> gated;
        std::vector<bool> gated_truth;
        for (size_t k = 0; k < sc.proposals.size(); ++k) {
            const auto key = std::pair{sc.proposals[k].i, sc.proposals[k].j};
            if (!detected.count(key)) continue;
            LoopProposal p = sc.proposals[k];
            p.score = detected_score[key];
            gated.push_back(p);
            gated_truth.push_back(sc.proposal_is_true[k]);
        }
        write_proposals_csv(dir / "gated_proposals.csv", gated, gated_truth);
    }
}

// the proposal file the back end consumes, given which stages are enabled
inline std::filesystem::path proposal_source(const PipelineConfig& cfg,
                                             const std::filesystem::path& dir) {
    if (cfg.reject.enabled) return dir / "inlier_proposals.csv";
    if (cfg.detect.enabled && cfg.detect.gate_proposals) return dir / "gated_proposals.csv";
    return dir / "proposals.csv";
}

inline void reject(const PipelineConfig& cfg, const std::filesystem::path& dir) {
    if (!cfg.reject.enabled) return;
    const LoadedScenario loaded = load_scenario(dir);
    const std::filesystem::path source = cfg.detect.enabled && cfg.detect.gate_proposals
                                             ? dir / "gated_proposals.csv"
                                             : dir / "proposals.csv";
    const auto [proposals, truth] = read_proposals_csv(source);

    RejectionConfig rcfg = cfg.reject.reject;
    rcfg.seed = cfg.reject_seed();
    const FilterResult res = filter_proposals(proposals, loaded.scenario.odometry,
                                              loaded.scenario.odometry_cov, rcfg);
    write_inliers_csv(dir / "inliers.csv", proposals, res);

    std::vector<LoopProposal> inliers;
    std::vector<bool> inlier_truth;
    int tp = 0, fp = 0, fn = 0;
    for (size_t k = 0; k < proposals.size(); ++k) {
        if (res.inlier_mask[k]) {
            inliers.push_back(proposals[k]);
            inlier_truth.push_back(truth[k]);
            (truth[k] ? tp : fp)++;
        } else if (truth[k]) {
            ++fn;
        }
    }
    write_proposals_csv(dir / "inlier_proposals.csv", inliers, inlier_truth);

    nlohmann::json metrics;
    metrics["n_inliers"] = inliers.size();
    metrics["n_outliers"] = proposals.size() - inliers.size();
    if (tp + fp > 0) metrics["precision"] = static_cast<double>(tp) / (tp + fp);
    if (tp + fn > 0) metrics["recall"] = static_cast<double>(tp) / (tp + fn);
    open_out(dir / "reject_metrics.json") << metrics.dump(2) << '\n';
}

inline FactorGraph build_graph(const PipelineConfig& cfg, const SyntheticScenario& sc,
                               const std::vector<LoopProposal>& loops) {
    FactorGraph g;
    g.nodes = compose_dead_reckoning(sc.odometry);
    const bool mdn_odom = cfg.optimize.covariance_mode == CovarianceMode::mdn_both ||
                          cfg.optimize.covariance_mode == CovarianceMode::mdn_odom_only;
    const bool mdn_loop = cfg.optimize.covariance_mode == CovarianceMode::mdn_both ||
                          cfg.optimize.covariance_mode == CovarianceMode::mdn_loop_only;
    for (int k = 0; k < static_cast<int>(sc.odometry.size()); ++k)
        g.odometry_factors.push_back(
            {k, sc.odometry[k], mdn_odom ? sc.odometry_cov[k] : Vector6::Ones()});
    for (const auto& p : loops)
        g.loop_factors.push_back({p.i, p.j, p.rel, mdn_loop ? p.cov : Vector6::Ones()});
    return g;
}

inline void optimize(const PipelineConfig& cfg, const std::filesystem::path& dir) {
    const LoadedScenario loaded = load_scenario(dir);
    const auto [loops, truth] = read_proposals_csv(proposal_source(cfg, dir));

    const FactorGraph g = build_graph(cfg, loaded.scenario, loops);
    write_g2o(dir / "graph.g2o", g);

    const OptimizeResult res = pgslam::optimize(g, cfg.optimize.backend);
    write_tum(dir / "optimized.tum", res.states);

    std::vector<std::vector<std::string>> rows;
    for (size_t k = 0; k < res.cost_trace.size(); ++k)
        rows.push_back({std::to_string(k), fmt(res.cost_trace[k])});
    write_csv(dir / "cost_trace.csv", "step,cost", rows);
}

inline void evaluate(const PipelineConfig& cfg, const std::filesystem::path& dir) {
    const LoadedScenario loaded = load_scenario(dir);
    const std::vector<Pose6> gt = loaded.scenario.gt_trajectory;
    const std::vector<Pose6> dead = compose_dead_reckoning(loaded.scenario.odometry);
    const std::vector<Pose6> opt = read_tum(dir / "optimized.tum");

    const double ate_odom = ate(dead, gt, false);
    const double ate_slam = ate(opt, gt, false);
    const RpeResult rpe_odom = rpe(dead, gt, 1);
    const RpeResult rpe_slam = rpe(opt, gt, 1);

    nlohmann::json metrics;
    metrics["ate_odom_m"] = ate_odom;
    metrics["ate_slam_m"] = ate_slam;
    metrics["gain_percent"] = ate_odom > 0.0 ? 100.0 * (ate_odom - ate_slam) / ate_odom : 0.0;
    metrics["rpe_odom_trans_m"] = rpe_odom.trans_rms;
    metrics["rpe_odom_rot_deg"] = rpe_odom.rot_rms_deg;
    metrics["rpe_slam_trans_m"] = rpe_slam.trans_rms;
    metrics["rpe_slam_rot_deg"] = rpe_slam.rot_rms_deg;
    metrics["seed"] = cfg.seed;

    for (const auto& [file, key] :
         std::vector<std::pair<const char*, const char*>>{{"train_metrics.json", "training"},
                                                          {"detect_metrics.json", "detection"},
                                                          {"reject_metrics.json", "rejection"}}) {
        if (std::filesystem::exists(dir / file)) {
            nlohmann::json sub;
            open_in(dir / file) >> sub;
            metrics[key] = sub;
        }
    }
    open_out(dir / "metrics.json") << metrics.dump(2) << '\n';

    const auto pick = [&](const char* group, const char* key) -> std::string {
        if (!metrics.contains(group) || !metrics[group].contains(key) ||
            metrics[group][key].is_null())
            return "";
        return fmt(metrics[group][key].get<double>());
    };
    write_csv(dir / "metrics.csv",
              "ate_m,rpe_trans_m,rpe_rot_deg,pearson,spearman,gain_percent",
              {{fmt(ate_slam), fmt(rpe_slam.trans_rms), fmt(rpe_slam.rot_rms_deg),
                pick("training", "uncertainty_pearson"), pick("training", "uncertainty_spearman"),
                fmt(metrics["gain_percent"].get<double>())}});

    nlohmann::json manifest;
    manifest["config_hash"] = config_hash(cfg);
    manifest["seed"] = cfg.seed;
    manifest["config"] = pipeline_config_to_json(cfg);
    open_out(dir / "run_manifest.json") << manifest.dump(2) << '\n';
}

}  // namespace stage

// Runs stages in order, stopping after `last_stage` when given. Throws
// StageError tagged with the failing stage.
inline void run_pipeline(const PipelineConfig& raw_cfg,
                         const std::optional<std::string>& last_stage = std::nullopt) {
    const PipelineConfig cfg = raw_cfg.finalized();
    const auto& names = stage_names();
    if (last_stage && std::find(names.begin(), names.end(), *last_stage) == names.end())
        throw ConfigError("unknown stage: " + *last_stage);

    std::filesystem::create_directories(cfg.output_dir);
    using StageFn = void (*)(const PipelineConfig&, const std::filesystem::path&);
    const StageFn fns[] = {stage::simulate, stage::train,    stage::detect,
                           stage::reject,   stage::optimize, stage::evaluate};
    for (size_t i = 0; i < names.size(); ++i) {
        try {
            fns[i](cfg, cfg.output_dir);
        } catch (const std::exception& e) {
            throw StageError(static_cast<int>(i), names[i], e.what());
        }
        if (last_stage && names[i] == *last_stage) break;
    }
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

enum class SweepParameter { rho, K, covariance_mode };

inline SweepParameter sweep_parameter_from_string(const std::string& s) {
    if (s == "rho") return SweepParameter::rho;
    if (s == "K") return SweepParameter::K;
    if (s == "covariance_mode") return SweepParameter::covariance_mode;
    throw ConfigError("unknown sweep parameter: " + s);
}

struct SweepRow {
    std::string value;
    std::string status;  // "ok" or the error message
    nlohmann::json metrics;
};

// One pipeline run per value under output_dir/sweep_<param>_<value>, shared
// seed; failed rows are recorded and the sweep continues.
inline std::vector<SweepRow> run_sweep(const PipelineConfig& base, SweepParameter param,
                                       const std::vector<std::string>& values) {
    if (values.empty()) throw ConfigError("sweep: empty value list");
    const std::string param_name = param == SweepParameter::rho ? "rho"
                                   : param == SweepParameter::K ? "K"
                                                                : "covariance_mode";
    std::vector<SweepRow> rows;
    for (const auto& value : values) {
        PipelineConfig cfg = base;
        switch (param) {
            case SweepParameter::rho:
                cfg.optimize.backend.rho = std::stod(value);
                break;
            case SweepParameter::K:
                cfg.train.mdn_loss.K = std::stoi(value);
                cfg.train.mdn_enabled = true;
                break;
            case SweepParameter::covariance_mode:
                cfg.optimize.covariance_mode = covariance_mode_from_string(value);
                break;
        }
        cfg.output_dir = base.output_dir / ("sweep_" + param_name + "_" + value);
        SweepRow row;
        row.value = value;
        try {
            run_pipeline(cfg);
            nlohmann::json metrics;
            open_in(cfg.output_dir / "metrics.json") >> metrics;
            row.status = "ok";
            row.metrics = metrics;
        } catch (const std::exception& e) {
            row.status = e.what();
        }
        rows.push_back(row);
    }

    // consolidated CSV
    std::vector<std::vector<std::string>> csv_rows;
    for (const auto& row : rows) {
        const auto pick = [&](const char* path1, const char* path2 = nullptr) -> std::string {
            if (row.metrics.is_null()) return "";
            const nlohmann::json* node = &row.metrics;
            if (path2) {
                if (!node->contains(path1) || !(*node)[path1].contains(path2)) return "";
                node = &(*node)[path1][path2];
            } else {
                if (!node->contains(path1)) return "";
                node = &(*node)[path1];
            }
            return node->is_number() ? fmt(node->get<double>()) : "";
        };
        csv_rows.push_back({param_name, row.value, row.status == "ok" ? "ok" : "error",
                            pick("ate_odom_m"), pick("ate_slam_m"), pick("gain_percent"),
                            pick("detection", "auc"), pick("training", "mdn_heldout_nll"),
                            pick("training", "uncertainty_pearson")});
    }
    write_csv(base.output_dir / "sweep.csv",
              "parameter,value,status,ate_odom_m,ate_slam_m,gain_percent,auc,mdn_heldout_nll,"
              "uncertainty_pearson",
              csv_rows);
    return rows;
}

}  // namespace pgslam
