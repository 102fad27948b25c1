#pragma once

#include "epq/dataset.hpp"
#include "epq/learner.hpp"
#include "epq/mdp.hpp"
#include "epq/rng.hpp"

#include <Eigen/Dense>

namespace epq::fixtures {

/// One self-looping state, three actions, rewards (-3, +3, +2.5). The
/// behavior policy takes the bad action 99.2% of the time, so batches
/// concentrate on a single pair. With the aggressive step size in
/// divergence_config the unweighted Bellman updates overshoot on that pair,
/// while prioritized weights keep every per-pair effective step small.
inline Mdp narrow_mdp() {
    Eigen::MatrixXd p = Eigen::MatrixXd::Ones(3, 1);
    Eigen::MatrixXd r(1, 3);
    r << -3.0, 3.0, 2.5;
    Eigen::VectorXd init(1);
    init << 1.0;
    return Mdp(1, 3, p, r, 0.9, init, 3.0);
}

inline TabularPolicy narrow_behavior() {
    Eigen::MatrixXd probs(1, 3);
    probs << 0.992, 0.004, 0.004;
    return TabularPolicy(std::move(probs));
}

inline OfflineDataset narrow_dataset(std::uint64_t seed = 2024) {
    return generate_dataset(narrow_mdp(), narrow_behavior(), 12800, 1, seed);
}

/// Shared learner settings for the instability demonstration; only the mode
/// and penalty differ between the two runs.
inline LearnerConfig divergence_config(Mode mode) {
    LearnerConfig config;
    config.mode = mode;
    config.q_step_size = 2.05;
    config.batch_size = 256;
    config.max_gradient_steps = 2000;
    config.seed = 9;
    if (mode == Mode::CqlSampled || mode == Mode::CqlExact)
        config.penalty.alpha = 0.0;
    return config;
}

inline TabularPolicy random_policy(int n_states, int n_actions,
                                   std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd probs(n_states, n_actions);
    for (int s = 0; s < n_states; ++s) {
        double total = 0.0;
        for (int a = 0; a < n_actions; ++a) {
            probs(s, a) = rng.exponential();
            total += probs(s, a);
        }
        probs.row(s) /= total;
        probs(s, n_actions - 1) += 1.0 - probs.row(s).sum();
    }
    return TabularPolicy(std::move(probs));
}

/// Dataset guaranteed to cover every action at every visited state, so
/// full-support policies satisfy the penalty support precondition.
inline OfflineDataset full_coverage_dataset(const Mdp& mdp, int n_episodes,
                                            int horizon, std::uint64_t seed) {
    return generate_dataset(
        mdp, TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()), n_episodes,
        horizon, seed);
}

} // namespace epq::fixtures
