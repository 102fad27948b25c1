#pragma once

#include "epq/mdp.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace epq {

struct Transition {
    int episode;
    int step;
    int state;
    int action;
    double reward;
    int next_state;
    bool terminal;
};

/// Fixed collection of transitions; the only training input.
///
/// Per-transition truncated discounted returns are filled in by
/// compute_returns and satisfy G_t = r_t + gamma * G_{t+1} within each
/// episode (zero after the last recorded step).
struct OfflineDataset {
    std::vector<Transition> transitions;
    int n_states = 0;
    int n_actions = 0;
    double gamma = 0.0;
    std::uint64_t generator_seed = 0;
    std::optional<std::vector<double>> returns;

    std::size_t size() const { return transitions.size(); }
    bool has_returns() const { return returns.has_value(); }
};

/// Empirical conditional beta_hat(a|s) = N(s,a)/N(s) with visit counts.
/// Rows for unvisited states are undefined and must not be queried without
/// an explicit floor.
class BehaviorEstimate {
  public:
    BehaviorEstimate(Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts);

    int n_states() const { return static_cast<int>(counts_.rows()); }
    int n_actions() const { return static_cast<int>(counts_.cols()); }

    std::int64_t count(int state, int action) const { return counts_(state, action); }
    std::int64_t state_count(int state) const { return state_counts_[state]; }
    bool visited(int state) const { return state_counts_[state] > 0; }
    bool supported(int state, int action) const { return counts_(state, action) > 0; }

    /// beta_hat(a|s); throws support_error off-support or at unvisited states.
    double prob(int state, int action) const;
    double log_prob(int state, int action) const;

    /// Stress-test accessor: max(beta_hat, floor), never throws.
    double prob_with_floor(int state, int action, double floor) const;

    /// Full probability row of a visited state.
    Eigen::VectorXd row(int state) const;

    /// Zeroes policy mass outside the data support at visited states and
    /// renormalizes; rows at unvisited states are left untouched.
    TabularPolicy restrict_policy(const TabularPolicy& policy) const;

    std::vector<int> visited_states() const;

    static constexpr double default_floor = 1e-6;

  private:
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts_;
    std::vector<std::int64_t> state_counts_;
    Eigen::MatrixXd probs_;
};

OfflineDataset generate_dataset(const Mdp& mdp, const TabularPolicy& behavior,
                                int n_episodes, int horizon, std::uint64_t seed);

/// Backward recursion per episode; idempotent.
OfflineDataset compute_returns(OfflineDataset dataset);

BehaviorEstimate estimate_behavior(const OfflineDataset& dataset, int n_states,
                                   int n_actions);

void save_dataset(const OfflineDataset& dataset, const std::string& path);
OfflineDataset load_dataset(const std::string& path);

} // namespace epq
