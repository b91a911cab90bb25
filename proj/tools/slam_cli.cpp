// Command-line driver for the synthetic pose-graph SLAM pipeline.
//
// Subcommands run either the whole pipeline or a single stage against a run
// directory, so stages can be inspected and re-run independently:
//
//   slam_cli pipeline --config cfg.json --output out/
//   slam_cli simulate --config cfg.json --output out/
//   slam_cli detect   --output out/          (consumes simulate's files)
//   slam_cli sweep    --param rho --values 0.5,1,2,3,5,10 --output out/
//
// Exit codes: 0 success, 2 configuration error, 3+N failure in stage N
// (stage order: simulate=0, train=1, detect=2, reject=3, optimize=4,
// evaluate=5).

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <pgslam/pipeline.hpp>

namespace {

struct CommonOptions {
    std::string config_path;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
};

pgslam::PipelineConfig load_config(const CommonOptions& opts) {
    nlohmann::json j = nlohmann::json::object();
    if (!opts.config_path.empty()) {
        std::ifstream f(opts.config_path);
        if (!f) throw pgslam::ConfigError("cannot open config file: " + opts.config_path);
        try {
            f >> j;
        } catch (const std::exception& e) {
            throw pgslam::ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
    }
    if (opts.seed) j["seed"] = *opts.seed;
    if (!opts.output_dir.empty()) j["output_dir"] = opts.output_dir;
    return pgslam::parse_pipeline_config(j);
}

void add_common(CLI::App* cmd, CommonOptions& opts) {
    cmd->add_option("--config", opts.config_path, "pipeline config JSON");
    cmd->add_option("--output", opts.output_dir, "run directory (overrides config output_dir)");
    cmd->add_option("--seed", opts.seed, "run seed (overrides config)");
}

int run_single_stage(const CommonOptions& opts, const std::string& name) {
    const pgslam::PipelineConfig cfg = load_config(opts).finalized();
    const auto& names = pgslam::stage_names();
    const auto it = std::find(names.begin(), names.end(), name);
    const int index = static_cast<int>(it - names.begin());
    std::filesystem::create_directories(cfg.output_dir);
    try {
        using Fn = void (*)(const pgslam::PipelineConfig&, const std::filesystem::path&);
        static const Fn fns[] = {pgslam::stage::simulate, pgslam::stage::train,
                                 pgslam::stage::detect,   pgslam::stage::reject,
                                 pgslam::stage::optimize, pgslam::stage::evaluate};
        fns[index](cfg, cfg.output_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: stage " << name << ": " << e.what() << "\n";
        return 3 + index;
    }
    std::cout << name << ": ok (" << cfg.output_dir.string() << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic pose-graph SLAM pipeline"};
    app.require_subcommand(1);

    CommonOptions opts;
    std::string stage_limit;
    std::string sweep_param;
    std::vector<std::string> sweep_values;

    CLI::App* pipeline = app.add_subcommand("pipeline", "run all stages");
    add_common(pipeline, opts);
    pipeline->add_option("--stage", stage_limit, "stop after this stage");

    for (const auto& name : pgslam::stage_names())
        add_common(app.add_subcommand(name, "run the " + name + " stage only"), opts);

    CLI::App* sweep = app.add_subcommand("sweep", "run the pipeline across parameter values");
    add_common(sweep, opts);
    sweep->add_option("--param", sweep_param, "rho | K | covariance_mode")->required();
    sweep->add_option("--values", sweep_values, "comma-separated values")
        ->required()
        ->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        if (pipeline->parsed()) {
            const pgslam::PipelineConfig cfg = load_config(opts);
            try {
                pgslam::run_pipeline(cfg, stage_limit.empty()
                                              ? std::nullopt
                                              : std::optional<std::string>(stage_limit));
            } catch (const pgslam::StageError& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 3 + e.stage_index;
            }
            std::cout << "pipeline: ok (" << cfg.output_dir.string() << ")\n";
            return 0;
        }

        if (sweep->parsed()) {
            const pgslam::PipelineConfig cfg = load_config(opts);
            const auto rows = pgslam::run_sweep(
                cfg, pgslam::sweep_parameter_from_string(sweep_param), sweep_values);
            int failures = 0;
            for (const auto& row : rows) {
                std::cout << sweep_param << "=" << row.value << ": " << row.status << "\n";
                if (row.status != "ok") ++failures;
            }
            std::cout << "sweep: " << (rows.size() - failures) << "/" << rows.size()
                      << " rows ok, results in " << (cfg.output_dir / "sweep.csv").string()
                      << "\n";
            return 0;
        }

        for (const auto& name : pgslam::stage_names())
            if (app.get_subcommand(name)->parsed()) return run_single_stage(opts, name);
    } catch (const pgslam::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
