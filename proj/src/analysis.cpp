#include "epq/analysis.hpp"

#include "epq/penalty.hpp"
#include "epq/rng.hpp"

#include <cmath>
#include <limits>

namespace epq {

BiasReport measure_bias(const TrainedAgent& agent, const Mdp& mdp, int n_rollouts,
                        std::uint64_t seed, int mc_horizon) {
    const QFunction truth = exact_q(mdp, agent.policy);
    const Eigen::VectorXd v_hat = agent.q.state_values(agent.policy);
    const Eigen::VectorXd v_true = truth.state_values(agent.policy);

    BiasReport report;
    report.per_state_bias = v_hat - v_true;
    report.squared_bias =
        report.per_state_bias.array().square().mean();

    int probe = 0;
    mdp.initial_state_dist().maxCoeff(&probe);
    report.probe_state = probe;
    report.bias_at_probe = report.per_state_bias[probe];
    report.per_action_bias_at_probe =
        agent.q.matrix().row(probe) - truth.matrix().row(probe);

    // Monte-Carlo cross check of V^pi at the probe state.
    if (n_rollouts > 0) {
        Rng rng(seed);
        double sum = 0.0;
        double sum_sq = 0.0;
        for (int i = 0; i < n_rollouts; ++i) {
            double g = 0.0;
            double scale = 1.0;
            int s = probe;
            for (int t = 0; t < mc_horizon; ++t) {
                const int a = rng.categorical(agent.policy.row(s));
                g += scale * mdp.reward(s, a);
                scale *= mdp.discount();
                if (scale == 0.0) break;
                s = rng.categorical(mdp.transition_row(s, a));
            }
            sum += g;
            sum_sq += g * g;
        }
        const double mc_mean = sum / n_rollouts;
        double se = 0.0;
        if (n_rollouts > 1) {
            const double var = std::max(
                0.0, (sum_sq - n_rollouts * mc_mean * mc_mean) / (n_rollouts - 1));
            se = std::sqrt(var / n_rollouts);
        }
        report.bias_at_probe_mc = v_hat[probe] - mc_mean;
        report.mc_stderr = se;
    }
    return report;
}

FixedPointResult fixed_point_closed_form(const Mdp& mdp, const TabularPolicy& policy,
                                         const Eigen::VectorXd& per_state_penalty,
                                         double alpha) {
    const int S = mdp.n_states();
    const int A = mdp.n_actions();
    if (per_state_penalty.size() != S)
        throw std::invalid_argument("fixed_point_closed_form: penalty shape mismatch");

    Eigen::MatrixXd p_pi = Eigen::MatrixXd::Zero(S, S);
    Eigen::VectorXd r_pi = Eigen::VectorXd::Zero(S);
    for (int s = 0; s < S; ++s) {
        for (int a = 0; a < A; ++a) {
            const double w = policy.prob(s, a);
            if (w == 0.0) continue;
            p_pi.row(s) += w * mdp.transition_matrix().row(mdp.index(s, a));
            r_pi[s] += w * mdp.reward(s, a);
        }
    }
    const Eigen::MatrixXd system =
        Eigen::MatrixXd::Identity(S, S) - mdp.discount() * p_pi;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(system);
    const Eigen::MatrixXd resolvent = lu.inverse();
    if (!resolvent.allFinite())
        throw std::domain_error("fixed_point_closed_form: singular system");

    FixedPointResult out;
    out.v_policy = resolvent * r_pi;
    out.v_infinity = out.v_policy - alpha * (resolvent * per_state_penalty);
    out.resolvent_min_entry = resolvent.minCoeff();
    out.resolvent_row_sums = resolvent.rowwise().sum();
    return out;
}

double alpha_threshold(const std::vector<int>& states, const TabularPolicy& policy,
                       const BehaviorEstimate& behavior, double tau,
                       const Eigen::MatrixXd& xi) {
    double xi_max = 0.0;
    double delta_min = std::numeric_limits<double>::infinity();
    for (int s : states) {
        for (int a = 0; a < behavior.n_actions(); ++a)
            if (behavior.supported(s, a)) xi_max = std::max(xi_max, xi(s, a));
        delta_min =
            std::min(delta_min, average_penalty_epq(policy, behavior, s, tau));
    }
    if (xi_max == 0.0) return 0.0;
    if (!(delta_min > 0.0)) return std::numeric_limits<double>::infinity();
    return xi_max / delta_min;
}

UnderestimationCertificate verify_underestimation(const OfflineDataset& dataset,
                                                  const Mdp& mdp,
                                                  const LearnerConfig& config,
                                                  const Eigen::MatrixXd& xi,
                                                  const TabularPolicy* fixed_policy) {
    LearnerConfig run_config = config;
    run_config.policy_update = fixed_policy != nullptr
                                   ? PolicyUpdate::FixedGiven
                                   : PolicyUpdate::FixedBehavior;

    const BehaviorEstimate behavior =
        estimate_behavior(dataset, dataset.n_states, dataset.n_actions);
    UnderestimationCertificate cert;
    cert.alpha_used = config.penalty.alpha;
    cert.delta = 0.0; // exact Bellman backups carry no probability slack
    cert.states = behavior.visited_states();

    const TrainedAgent agent =
        train(dataset, run_config,
              mode_is_exact(run_config.mode) ? &mdp : nullptr, fixed_policy);
    cert.alpha_threshold_value =
        alpha_threshold(cert.states, agent.policy, behavior,
                        config.penalty.tau(dataset.n_actions), xi);

    const Eigen::VectorXd v_hat = agent.q.state_values(agent.policy);
    const Eigen::VectorXd v_true =
        exact_q(mdp, agent.policy).state_values(agent.policy);
    cert.margins.resize(static_cast<Eigen::Index>(cert.states.size()));
    for (std::size_t i = 0; i < cert.states.size(); ++i)
        cert.margins[static_cast<Eigen::Index>(i)] =
            v_true[cert.states[i]] - v_hat[cert.states[i]];

    if (cert.alpha_used < cert.alpha_threshold_value) {
        cert.outcome = CertificateOutcome::Undefined;
        cert.warning =
            "alpha below the underestimation threshold; no guarantee applies";
        return cert;
    }
    cert.outcome = (cert.margins.size() == 0 || cert.margins.minCoeff() >= -1e-8)
                       ? CertificateOutcome::Pass
                       : CertificateOutcome::Fail;
    if (agent.status == RunStatus::Diverged) {
        cert.outcome = CertificateOutcome::Fail;
        cert.warning = agent.status_note;
    }
    return cert;
}

std::string scenario_case_name(ScenarioCase c) {
    switch (c) {
        case ScenarioCase::CaseA: return "case_a";
        case ScenarioCase::CaseB: return "case_b";
        case ScenarioCase::CaseC: return "case_c";
    }
    return "unknown";
}

std::string scenario_method_name(ScenarioMethod m) {
    return m == ScenarioMethod::CQL ? "cql" : "epq";
}

namespace {

double normal_cdf(double x, double mu, double sigma) {
    return 0.5 * (1.0 + std::erf((x - mu) / (sigma * std::sqrt(2.0))));
}

/// Probability mass of the named action density over each torque bin,
/// normalized within [-2, 2].
Eigen::VectorXd discretize_density(int n_action_bins, bool bimodal, double mu,
                                   double sigma) {
    const double lo = -2.0;
    const double hi = 2.0;
    const double step = (hi - lo) / (n_action_bins - 1);
    Eigen::VectorXd mass(n_action_bins);
    for (int a = 0; a < n_action_bins; ++a) {
        const double center = lo + a * step;
        const double left = std::max(lo, center - 0.5 * step);
        const double right = std::min(hi, center + 0.5 * step);
        double m;
        if (bimodal) {
            m = 0.5 * (normal_cdf(right, -1.0, 0.3) - normal_cdf(left, -1.0, 0.3)) +
                0.5 * (normal_cdf(right, 1.0, 0.3) - normal_cdf(left, 1.0, 0.3));
        } else if (sigma <= 0.0) { // uniform over [-2, 2]
            m = (right - left) / (hi - lo);
        } else {
            m = normal_cdf(right, mu, sigma) - normal_cdf(left, mu, sigma);
        }
        mass[a] = m;
    }
    mass /= mass.sum();
    mass[n_action_bins - 1] += 1.0 - mass.sum();
    return mass;
}

} // namespace

BiasReport run_scenario(ScenarioCase scenario, ScenarioMethod method, double alpha,
                        double tau_over_rho, std::uint64_t seed,
                        const ScenarioSettings& settings) {
    const Mdp mdp = pendulum_mdp(settings.n_angle_bins, settings.n_velocity_bins,
                                 settings.n_action_bins, settings.discount);
    int initial_state = 0;
    mdp.initial_state_dist().maxCoeff(&initial_state);

    const bool bimodal = scenario != ScenarioCase::CaseA;
    const Eigen::VectorXd behavior_row =
        scenario == ScenarioCase::CaseA
            ? discretize_density(settings.n_action_bins, false, 0.0, 0.0)
            : discretize_density(settings.n_action_bins, true, 0.0, 0.3);
    const double policy_mean = scenario == ScenarioCase::CaseB ? 1.0 : 0.0;
    const Eigen::VectorXd policy_row =
        discretize_density(settings.n_action_bins, false, policy_mean, 0.2);
    (void)bimodal;

    Eigen::MatrixXd behavior_probs = Eigen::MatrixXd::Constant(
        mdp.n_states(), mdp.n_actions(), 1.0 / mdp.n_actions());
    behavior_probs.row(initial_state) = behavior_row.transpose();
    const TabularPolicy behavior_policy(std::move(behavior_probs));

    const OfflineDataset dataset = generate_dataset(
        mdp, behavior_policy, settings.n_episodes, settings.horizon, seed);
    const BehaviorEstimate behavior =
        estimate_behavior(dataset, mdp.n_states(), mdp.n_actions());

    Eigen::MatrixXd policy_probs = Eigen::MatrixXd::Constant(
        mdp.n_states(), mdp.n_actions(), 1.0 / mdp.n_actions());
    policy_probs.row(initial_state) = policy_row.transpose();
    const TabularPolicy target_policy =
        behavior.restrict_policy(TabularPolicy(std::move(policy_probs)));

    LearnerConfig config;
    config.mode =
        method == ScenarioMethod::EPQ ? Mode::EpqExact : Mode::CqlExact;
    config.penalty.alpha = alpha;
    config.penalty.tau_over_rho = tau_over_rho;
    config.policy_update = PolicyUpdate::FixedGiven;
    config.max_gradient_steps = settings.max_sweeps;
    config.convergence_tol = settings.convergence_tol;
    config.seed = seed;

    const TrainedAgent agent = train(dataset, config, &mdp, &target_policy);
    BiasReport report =
        measure_bias(agent, mdp, settings.mc_rollouts, seed + 1, settings.mc_horizon);
    report.alpha = alpha;
    report.tau = config.penalty.tau(mdp.n_actions());
    report.mode_label = mode_name(config.mode);
    report.note = scenario_case_name(scenario) + ":" + agent.status_note;
    return report;
}

} // namespace epq
