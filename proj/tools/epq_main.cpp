#include "epq/errors.hpp"
#include "epq/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct GlobalOpts {
    std::string config_path;
    std::string out_override;
    std::uint64_t seed_override = 0;
    bool seed_given = false;
    int workers = 1;
};

epq::ExperimentConfig load(const GlobalOpts& opts) {
    epq::ExperimentConfig config = epq::parse_experiment_config(opts.config_path);
    if (!opts.out_override.empty()) config.output_dir = opts.out_override;
    if (opts.seed_given) config.global_seed = opts.seed_override;
    return config;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tabular offline RL laboratory: exclusively penalized "
                 "Q-learning and its CQL baseline on exactly solvable MDPs"};
    app.require_subcommand(1);

    GlobalOpts opts;
    app.add_option("--config", opts.config_path, "experiment config file")
        ->required();
    app.add_option("--out", opts.out_override, "override output directory");
    app.add_option("--seed", opts.seed_override, "override global seed")
        ->each([&](const std::string&) { opts.seed_given = true; });
    app.add_option("--workers", opts.workers, "parallel sweep workers")
        ->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen-data", "generate an offline dataset");
    auto* train = app.add_subcommand("train", "train an agent on the dataset");
    auto* bias = app.add_subcommand("bias", "measure estimation bias of an agent");
    auto* certify =
        app.add_subcommand("certify", "verify the underestimation guarantee");
    auto* scenario =
        app.add_subcommand("scenario", "run the fixed-policy pendulum battery");
    auto* sweep = app.add_subcommand("sweep", "cross hyperparameter grids");

    CLI11_PARSE(app, argc, argv);

    try {
        const epq::ExperimentConfig config = load(opts);
        if (gen->parsed()) return epq::run_gen_data(config);
        if (train->parsed()) return epq::run_train(config);
        if (bias->parsed()) return epq::run_bias(config);
        if (certify->parsed()) return epq::run_certify(config);
        if (scenario->parsed())
            return epq::run_scenario_battery(config, opts.workers);
        if (sweep->parsed()) return epq::run_sweep(config, opts.workers);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
