#pragma once

#include "epq/analysis.hpp"
#include "epq/dataset.hpp"
#include "epq/learner.hpp"
#include "epq/mdp.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace epq {

struct EnvSpec {
    std::string kind = "random"; // random | pendulum | file
    int n_states = 8;
    int n_actions = 4;
    std::uint64_t seed = 7;
    double discount = 0.9;
    int angle_bins = 21;
    int velocity_bins = 21;
    int action_bins = 17;
    std::string path; // kind = file
};

struct BehaviorSpec {
    std::string kind = "uniform"; // uniform | weights | random
    std::vector<double> weights;  // one entry per action, shared across states
    std::uint64_t seed = 1;
};

struct PolicySpec {
    std::string kind = "behavior"; // behavior | uniform | weights | random
    std::vector<double> weights;
    std::uint64_t seed = 5;
};

struct DataSpec {
    int episodes = 500;
    int horizon = 20;
    std::uint64_t seed = 11;
};

struct SweepSpec {
    std::vector<double> alpha = {20.0};
    std::vector<double> tau_over_rho = {0.2, 0.5, 1.0, 2.0, 5.0, 10.0};
    std::vector<double> c_min = {0.2};
    std::vector<double> epsilon = {2.0};
    std::vector<double> zeta = {2.0};
};

struct ScenarioSpec {
    std::vector<double> alpha_ab = {1.0, 5.0, 10.0};
    std::vector<double> alpha_c = {1.0, 2.0, 5.0};
    double tau_over_rho = 2.0;
    ScenarioSettings settings;
    std::uint64_t seed = 17;
};

struct CertifySpec {
    double xi = 0.0; // constant per-pair Bellman error bound
};

struct ExperimentConfig {
    EnvSpec env;
    BehaviorSpec behavior;
    PolicySpec policy;
    DataSpec data;
    LearnerConfig learner;
    SweepSpec sweep;
    ScenarioSpec scenario;
    CertifySpec certify;
    std::string output_dir = "out";
    std::uint64_t global_seed = 0;
};

/// Flat declarative config: `[section]` headers and `key = value` lines,
/// `#` comments. Unknown sections or keys are configuration errors.
ExperimentConfig parse_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config_text(const std::string& text);

/// Every value any module consumes, one `section.key = value` line each.
std::string echo_config(const ExperimentConfig& config);

Mdp build_environment(const EnvSpec& env);
TabularPolicy build_behavior_policy(const BehaviorSpec& spec, int n_states,
                                    int n_actions);
TabularPolicy build_policy(const PolicySpec& spec, int n_states, int n_actions);

/// Artifact paths inside the output directory.
std::string dataset_path(const ExperimentConfig& config);
std::string mdp_path(const ExperimentConfig& config);
std::string agent_path(const ExperimentConfig& config);

void save_agent(const TrainedAgent& agent, const std::string& path);
/// Loads the Q table and policy; history is not persisted.
TrainedAgent load_agent(const std::string& path);

// Command bodies behind the CLI subcommands. Each returns the process exit
// code: 0 success, 2 configuration error (thrown as exceptions by callees),
// 3 divergence guard, 4 certificate failure.
int run_gen_data(const ExperimentConfig& config);
int run_train(const ExperimentConfig& config);
int run_bias(const ExperimentConfig& config);
int run_certify(const ExperimentConfig& config);
int run_scenario_battery(const ExperimentConfig& config, int workers);
int run_sweep(const ExperimentConfig& config, int workers);

} // namespace epq
