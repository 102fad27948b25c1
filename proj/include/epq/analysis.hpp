#pragma once

#include "epq/dataset.hpp"
#include "epq/learner.hpp"
#include "epq/mdp.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace epq {

/// Per-state gap between the learned value and the true policy value,
/// measured with the exact evaluation oracle and cross-checked with
/// Monte-Carlo rollouts at the probe state.
struct BiasReport {
    Eigen::VectorXd per_state_bias;           // E_pi[Q_hat] - E_pi[Q^pi]
    double squared_bias = 0.0;                // mean of per-state squared biases
    int probe_state = 0;
    double bias_at_probe = 0.0;               // exact-oracle path
    double bias_at_probe_mc = 0.0;            // Monte-Carlo path
    double mc_stderr = 0.0;
    Eigen::VectorXd per_action_bias_at_probe; // Q_hat(probe,.) - Q^pi(probe,.)
    double alpha = 0.0;
    double tau = 0.0;
    std::string mode_label;
    std::string note;
};

BiasReport measure_bias(const TrainedAgent& agent, const Mdp& mdp, int n_rollouts,
                        std::uint64_t seed, int mc_horizon = 300);

struct FixedPointResult {
    Eigen::VectorXd v_infinity;
    Eigen::VectorXd v_policy;
    double resolvent_min_entry = 0.0;
    Eigen::VectorXd resolvent_row_sums;
};

/// Closed-form limit of repeated penalized evaluation:
/// V_inf = V^pi + (I - gamma P^pi)^{-1} (-alpha Delta). Also reports the
/// resolvent diagnostics that the underestimation argument rests on.
FixedPointResult fixed_point_closed_form(const Mdp& mdp, const TabularPolicy& policy,
                                         const Eigen::VectorXd& per_state_penalty,
                                         double alpha);

/// Smallest penalizing constant guaranteeing underestimation for the supplied
/// per-pair Bellman error bound: max_{s,a} xi(s,a) / min_s Delta(s) over the
/// given states. Infinite when some Delta vanishes while xi does not.
double alpha_threshold(const std::vector<int>& states, const TabularPolicy& policy,
                       const BehaviorEstimate& behavior, double tau,
                       const Eigen::MatrixXd& xi);

enum class CertificateOutcome { Pass, Fail, Undefined };

struct UnderestimationCertificate {
    double alpha_used = 0.0;
    double alpha_threshold_value = 0.0;
    double delta = 0.0; // probability slack; 0 in exact mode
    std::vector<int> states;
    Eigen::VectorXd margins; // V^pi(s) - V_hat(s) per dataset state
    CertificateOutcome outcome = CertificateOutcome::Undefined;
    std::string warning;
};

/// Trains to convergence in exact mode with the policy held fixed and checks
/// E_pi[Q_hat] <= E_pi[Q^pi] at every dataset state. Below the alpha
/// threshold no guarantee exists, so the certificate comes back Undefined
/// with a warning instead of an outcome.
UnderestimationCertificate verify_underestimation(const OfflineDataset& dataset,
                                                  const Mdp& mdp,
                                                  const LearnerConfig& config,
                                                  const Eigen::MatrixXd& xi,
                                                  const TabularPolicy* fixed_policy);

enum class ScenarioCase { CaseA, CaseB, CaseC };
enum class ScenarioMethod { CQL, EPQ };

std::string scenario_case_name(ScenarioCase c);
std::string scenario_method_name(ScenarioMethod m);

/// Knobs of the fixed-policy evaluation battery on the discretized pendulum.
/// Everywhere except the initial state both the policy and the behavior are
/// uniform over the torque grid; the initial-state rows are bin-integrated
/// densities chosen by the case.
struct ScenarioSettings {
    int n_angle_bins = 21;
    int n_velocity_bins = 21;
    int n_action_bins = 41;
    double discount = 0.95;
    int n_episodes = 20000;
    int horizon = 40;
    int mc_rollouts = 200;
    int mc_horizon = 300;
    int max_sweeps = 4000;
    double convergence_tol = 1e-9;
};

/// Case A: behavior Unif(-2,2), policy N(0,0.2).
/// Case B: behavior half N(-1,0.3) + half N(1,0.3), policy N(1,0.2).
/// Case C: same behavior as B, policy N(0,0.2).
BiasReport run_scenario(ScenarioCase scenario, ScenarioMethod method, double alpha,
                        double tau_over_rho, std::uint64_t seed,
                        const ScenarioSettings& settings = {});

} // namespace epq
