#pragma once

// File interchange: TUM trajectories, g2o-compatible pose graphs
// (VERTEX_SE3:QUAT / EDGE_SE3:QUAT with diagonal information), scenario
// directories, and the small CSV/JSONL formats the pipeline stages exchange.
// Euler angles convert to quaternions only at these boundaries.

#include <Eigen/Geometry>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "geometry.hpp"
#include "loop_detect.hpp"
#include "outlier_rejection.hpp"
#include "pose_graph.hpp"
#include "simulator.hpp"

namespace pgslam {

// Shortest round-trip decimal representation.
inline std::string fmt(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    return f;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return f;
}

// --------------------------------------------------------------------------
// quaternion boundary
// --------------------------------------------------------------------------

// (qx, qy, qz, qw), canonical sign qw >= 0.
inline Eigen::Vector4d euler_to_quat(const Eigen::Vector3d& r) {
    Eigen::Quaterniond q(euler_to_matrix(r));
    q.normalize();
    if (q.w() < 0.0) q.coeffs() *= -1.0;
    return {q.x(), q.y(), q.z(), q.w()};
}

inline Eigen::Vector3d quat_to_euler(double qx, double qy, double qz, double qw) {
    Eigen::Quaterniond q(qw, qx, qy, qz);
    if (q.norm() < 1e-12) throw std::invalid_argument("quat_to_euler: zero quaternion");
    return matrix_to_euler(q.normalized().toRotationMatrix());
}

// --------------------------------------------------------------------------
// TUM trajectories: "timestamp tx ty tz qx qy qz qw"
// --------------------------------------------------------------------------

inline void write_tum(const std::filesystem::path& path, const std::vector<Pose6>& traj) {
    auto f = open_out(path);
    for (size_t k = 0; k < traj.size(); ++k) {
        const Eigen::Vector4d q = euler_to_quat(traj[k].r);
        f << fmt(static_cast<double>(k)) << ' ' << fmt(traj[k].t.x()) << ' ' << fmt(traj[k].t.y())
          << ' ' << fmt(traj[k].t.z()) << ' ' << fmt(q[0]) << ' ' << fmt(q[1]) << ' ' << fmt(q[2])
          << ' ' << fmt(q[3]) << '\n';
    }
}

inline std::vector<Pose6> read_tum(const std::filesystem::path& path) {
    auto f = open_in(path);
    std::vector<Pose6> traj;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        double ts, tx, ty, tz, qx, qy, qz, qw;
        if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
            throw std::runtime_error("malformed TUM line in " + path.string() + ": " + line);
        traj.emplace_back(Eigen::Vector3d(tx, ty, tz), quat_to_euler(qx, qy, qz, qw));
    }
    return traj;
}

// --------------------------------------------------------------------------
// g2o text format
// --------------------------------------------------------------------------

namespace detail {

// 21 upper-triangular entries (row major) of the diagonal information matrix.
inline void write_info_upper(std::ofstream& f, const Vector6& info) {
    for (int r = 0; r < 6; ++r)
        for (int c = r; c < 6; ++c) f << ' ' << fmt(r == c ? info[r] : 0.0);
}

inline Vector6 read_info_diagonal(std::istringstream& ss, const std::string& line) {
    double entries[21];
    for (double& e : entries)
        if (!(ss >> e)) throw std::runtime_error("malformed g2o information block: " + line);
    // positions of the diagonal in the row-major upper triangle
    constexpr int diag_pos[6] = {0, 6, 11, 15, 18, 20};
    Vector6 info;
    for (int d = 0; d < 6; ++d) {
        info[d] = entries[diag_pos[d]];
        if (!(info[d] > 0.0))
            throw std::runtime_error("g2o edge with nonpositive diagonal information: " + line);
    }
    return info;
}

}  // namespace detail

// Writes the graph with raw (unscaled) diagonal information = 1/cov per
// axis; the varrho/rho balance is runtime configuration, not file content.
inline void write_g2o(const std::filesystem::path& path, const FactorGraph& graph) {
    graph.validate();
    auto f = open_out(path);
    for (size_t id = 0; id < graph.nodes.size(); ++id) {
        const Pose6& p = graph.nodes[id];
        const Eigen::Vector4d q = euler_to_quat(p.r);
        f << "VERTEX_SE3:QUAT " << id << ' ' << fmt(p.t.x()) << ' ' << fmt(p.t.y()) << ' '
          << fmt(p.t.z()) << ' ' << fmt(q[0]) << ' ' << fmt(q[1]) << ' ' << fmt(q[2]) << ' '
          << fmt(q[3]) << '\n';
    }
    f << "FIX " << graph.anchor << '\n';
    const auto write_edge = [&](int i, int j, const Pose6& m, const Vector6& cov) {
        const Eigen::Vector4d q = euler_to_quat(m.r);
        f << "EDGE_SE3:QUAT " << i << ' ' << j << ' ' << fmt(m.t.x()) << ' ' << fmt(m.t.y()) << ' '
          << fmt(m.t.z()) << ' ' << fmt(q[0]) << ' ' << fmt(q[1]) << ' ' << fmt(q[2]) << ' '
          << fmt(q[3]);
        detail::write_info_upper(f, cov.cwiseInverse());
        f << '\n';
    };
    for (const auto& fac : graph.odometry_factors) write_edge(fac.i, fac.i + 1, fac.u, fac.cov);
    for (const auto& fac : graph.loop_factors) write_edge(fac.i, fac.j, fac.c, fac.cov);
}

// Edges between consecutive ids become odometry factors, all others loops.
inline FactorGraph read_g2o(const std::filesystem::path& path) {
    auto f = open_in(path);
    FactorGraph graph;
    std::vector<std::pair<int, Pose6>> vertices;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "VERTEX_SE3:QUAT") {
            int id;
            double tx, ty, tz, qx, qy, qz, qw;
            if (!(ss >> id >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
                throw std::runtime_error("malformed g2o vertex: " + line);
            vertices.emplace_back(id,
                                  Pose6(Eigen::Vector3d(tx, ty, tz), quat_to_euler(qx, qy, qz, qw)));
        } else if (tag == "EDGE_SE3:QUAT") {
            int i, j;
            double tx, ty, tz, qx, qy, qz, qw;
            if (!(ss >> i >> j >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
                throw std::runtime_error("malformed g2o edge: " + line);
            const Pose6 m(Eigen::Vector3d(tx, ty, tz), quat_to_euler(qx, qy, qz, qw));
            const Vector6 cov = detail::read_info_diagonal(ss, line).cwiseInverse();
            if (j == i + 1)
                graph.odometry_factors.push_back({i, m, cov});
            else
                graph.loop_factors.push_back({i, j, m, cov});
        } else if (tag == "FIX") {
            ss >> graph.anchor;
        } else {
            throw std::runtime_error("unsupported g2o tag: " + tag);
        }
    }
    std::sort(vertices.begin(), vertices.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (size_t k = 0; k < vertices.size(); ++k) {
        if (vertices[k].first != static_cast<int>(k))
            throw std::runtime_error("g2o vertices must be contiguous from 0");
        graph.nodes.push_back(vertices[k].second);
    }
    graph.validate();
    return graph;
}

// --------------------------------------------------------------------------
// pipeline CSV / JSONL formats
// --------------------------------------------------------------------------

inline void write_odometry_csv(const std::filesystem::path& path, const SyntheticScenario& sc) {
    auto f = open_out(path);
    f << "i,tx,ty,tz,rx,ry,rz,cov_tx,cov_ty,cov_tz,cov_rx,cov_ry,cov_rz,turn,nuc\n";
    for (size_t k = 0; k < sc.odometry.size(); ++k) {
        f << k;
        const Vector6 v = sc.odometry[k].vec();
        for (int d = 0; d < 6; ++d) f << ',' << fmt(v[d]);
        for (int d = 0; d < 6; ++d) f << ',' << fmt(sc.odometry_cov[k][d]);
        f << ',' << (sc.step_turn_flag[k] ? 1 : 0) << ',' << (sc.step_nuc_flag[k] ? 1 : 0) << '\n';
    }
}

inline void write_observations_jsonl(const std::filesystem::path& path,
                                     const std::vector<Eigen::VectorXd>& obs) {
    auto f = open_out(path);
    for (size_t k = 0; k < obs.size(); ++k) {
        nlohmann::json j{{"frame_id", k},
                         {"vector", std::vector<double>(obs[k].begin(), obs[k].end())}};
        f << j.dump() << '\n';
    }
}

inline std::vector<Eigen::VectorXd> read_observations_jsonl(const std::filesystem::path& path) {
    auto f = open_in(path);
    std::vector<Eigen::VectorXd> obs;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const auto v = j.at("vector").get<std::vector<double>>();
        const size_t id = j.at("frame_id").get<size_t>();
        if (id != obs.size()) throw std::runtime_error("observations.jsonl: frame ids not contiguous");
        obs.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()));
    }
    return obs;
}

inline void write_embeddings_jsonl(const std::filesystem::path& path,
                                   const std::vector<Embedding>& embeddings) {
    auto f = open_out(path);
    for (size_t k = 0; k < embeddings.size(); ++k) {
        nlohmann::json j{
            {"frame_id", k},
            {"vector", std::vector<double>(embeddings[k].v.begin(), embeddings[k].v.end())}};
        f << j.dump() << '\n';
    }
}

inline std::vector<Embedding> read_embeddings_jsonl(const std::filesystem::path& path) {
    std::vector<Embedding> out;
    for (const auto& v : read_observations_jsonl(path)) out.push_back(Embedding(v));
    return out;
}

inline void write_proposals_csv(const std::filesystem::path& path,
                                const std::vector<LoopProposal>& proposals,
                                const std::vector<bool>& is_true) {
    auto f = open_out(path);
    f << "i,j,tx,ty,tz,rx,ry,rz,cov_tx,cov_ty,cov_tz,cov_rx,cov_ry,cov_rz,score,is_true\n";
    for (size_t k = 0; k < proposals.size(); ++k) {
        const auto& p = proposals[k];
        f << p.i << ',' << p.j;
        const Vector6 v = p.rel.vec();
        for (int d = 0; d < 6; ++d) f << ',' << fmt(v[d]);
        for (int d = 0; d < 6; ++d) f << ',' << fmt(p.cov[d]);
        f << ',' << fmt(p.score) << ',' << (k < is_true.size() && is_true[k] ? 1 : 0) << '\n';
    }
}

inline std::pair<std::vector<LoopProposal>, std::vector<bool>> read_proposals_csv(
    const std::filesystem::path& path) {
    auto f = open_in(path);
    std::vector<LoopProposal> proposals;
    std::vector<bool> labels;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        LoopProposal p;
        Vector6 v;
        int truth;
        if (!(ss >> p.i >> p.j >> v[0] >> v[1] >> v[2] >> v[3] >> v[4] >> v[5] >> p.cov[0] >>
              p.cov[1] >> p.cov[2] >> p.cov[3] >> p.cov[4] >> p.cov[5] >> p.score >> truth))
            throw std::runtime_error("malformed proposals row: " + line);
        p.rel = Pose6::from_vec(v);
        proposals.push_back(p);
        labels.push_back(truth != 0);
    }
    return {proposals, labels};
}

inline void write_loops_csv(const std::filesystem::path& path,
                            const std::vector<DetectedLoop>& loops) {
    auto f = open_out(path);
    f << "i,j,score\n";
    for (const auto& l : loops) f << l.i << ',' << l.j << ',' << fmt(l.score) << '\n';
}

inline void write_inliers_csv(const std::filesystem::path& path,
                              const std::vector<LoopProposal>& proposals,
                              const FilterResult& filt) {
    auto f = open_out(path);
    f << "i,j,pass_rate,verdict\n";
    for (size_t k = 0; k < proposals.size(); ++k)
        f << proposals[k].i << ',' << proposals[k].j << ',' << fmt(filt.pass_rates[k]) << ','
          << (filt.inlier_mask[k] ? "inlier" : "outlier") << '\n';
}

inline void write_similarity_csv(const std::filesystem::path& path, const SimilarityMatrix& m) {
    auto f = open_out(path);
    for (int r = 0; r < m.s.rows(); ++r) {
        for (int c = 0; c < m.s.cols(); ++c) f << (c ? "," : "") << fmt(m.s(r, c));
        f << '\n';
    }
}

inline void write_csv(const std::filesystem::path& path, const std::string& header,
                      const std::vector<std::vector<std::string>>& rows) {
    auto f = open_out(path);
    f << header << '\n';
    for (const auto& row : rows) {
        for (size_t c = 0; c < row.size(); ++c) f << (c ? "," : "") << row[c];
        f << '\n';
    }
}

// --------------------------------------------------------------------------
// WorldSpec / scenario directory
// --------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const WorldSpec& spec) {
    nlohmann::json nuc = nlohmann::json::array();
    for (const auto& iv : spec.nuc_intervals) nuc.push_back({iv.start, iv.end, iv.multiplier});
    j = nlohmann::json{{"shape", to_string(spec.shape)},
                       {"n_frames", spec.n_frames},
                       {"step_length", spec.step_length},
                       {"odom_noise", {spec.odom_sigma_t, spec.odom_sigma_r}},
                       {"turn_noise_multiplier", spec.turn_noise_multiplier},
                       {"nuc_intervals", nuc},
                       {"place_grid_resolution", spec.place_grid_resolution},
                       {"observation_noise", spec.observation_noise},
                       {"observation_nuisance", spec.observation_nuisance},
                       {"loop_noise_multiplier", spec.loop_noise_multiplier},
                       {"loop_cov_overestimate", spec.loop_cov_overestimate},
                       {"false_loop_rate", spec.false_loop_rate},
                       {"false_loop_offset", spec.false_loop_offset},
                       {"max_proposals", spec.max_proposals},
                       {"seed", spec.seed}};
}

inline void from_json(const nlohmann::json& j, WorldSpec& spec) {
    spec.shape = world_shape_from_string(j.at("shape").get<std::string>());
    spec.n_frames = j.at("n_frames").get<int>();
    spec.step_length = j.at("step_length").get<double>();
    spec.odom_sigma_t = j.at("odom_noise").at(0).get<double>();
    spec.odom_sigma_r = j.at("odom_noise").at(1).get<double>();
    spec.turn_noise_multiplier = j.at("turn_noise_multiplier").get<double>();
    spec.nuc_intervals.clear();
    for (const auto& iv : j.at("nuc_intervals"))
        spec.nuc_intervals.push_back({iv.at(0).get<int>(), iv.at(1).get<int>(), iv.at(2).get<double>()});
    spec.place_grid_resolution = j.at("place_grid_resolution").get<double>();
    spec.observation_noise = j.at("observation_noise").get<double>();
    spec.observation_nuisance = j.at("observation_nuisance").get<double>();
    spec.loop_noise_multiplier = j.at("loop_noise_multiplier").get<double>();
    spec.loop_cov_overestimate = j.at("loop_cov_overestimate").get<double>();
    spec.false_loop_rate = j.at("false_loop_rate").get<double>();
    spec.false_loop_offset = j.at("false_loop_offset").get<double>();
    spec.max_proposals = j.at("max_proposals").get<int>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.validate();
}

inline void save_scenario(const std::filesystem::path& dir, const WorldSpec& spec,
                          const SyntheticScenario& sc) {
    std::filesystem::create_directories(dir);
    open_out(dir / "spec.json") << nlohmann::json(spec).dump(2) << '\n';
    write_tum(dir / "gt.tum", sc.gt_trajectory);
    write_odometry_csv(dir / "odom.csv", sc);
    write_observations_jsonl(dir / "observations.jsonl", sc.observations);
    write_proposals_csv(dir / "proposals.csv", sc.proposals, sc.proposal_is_true);
}

struct LoadedScenario {
    WorldSpec spec;
    SyntheticScenario scenario;
};

inline LoadedScenario load_scenario(const std::filesystem::path& dir) {
    LoadedScenario out;
    nlohmann::json j;
    open_in(dir / "spec.json") >> j;
    out.spec = j.get<WorldSpec>();

    SyntheticScenario& sc = out.scenario;
    sc.gt_trajectory = read_tum(dir / "gt.tum");

    auto f = open_in(dir / "odom.csv");
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        int k, turn, nuc;
        Vector6 v, cov;
        if (!(ss >> k >> v[0] >> v[1] >> v[2] >> v[3] >> v[4] >> v[5] >> cov[0] >> cov[1] >>
              cov[2] >> cov[3] >> cov[4] >> cov[5] >> turn >> nuc))
            throw std::runtime_error("malformed odom.csv row: " + line);
        sc.odometry.push_back(Pose6::from_vec(v));
        sc.odometry_cov.push_back(cov);
        sc.step_turn_flag.push_back(turn != 0);
        sc.step_nuc_flag.push_back(nuc != 0);
    }

    sc.observations = read_observations_jsonl(dir / "observations.jsonl");
    std::tie(sc.proposals, sc.proposal_is_true) = read_proposals_csv(dir / "proposals.csv");

    // exact true loops are reconstructible from gt
    for (size_t p = 0; p < sc.proposals.size(); ++p) {
        if (!sc.proposal_is_true[p]) continue;
        const auto& pr = sc.proposals[p];
        sc.true_loops.push_back(
            {pr.i, pr.j, relative(sc.gt_trajectory[pr.i], sc.gt_trajectory[pr.j])});
    }
    return out;
}

}  // namespace pgslam
