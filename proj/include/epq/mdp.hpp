#pragma once

#include "epq/errors.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace epq {

class TabularPolicy;

/// Finite MDP with dense transition and reward tables.
///
/// The transition tensor is stored as an (S*A) x S matrix whose row s*A+a is
/// the distribution over next states for pair (s, a). Values are immutable
/// after construction and safe to share read-only across workers.
class Mdp {
  public:
    Mdp(int n_states, int n_actions, Eigen::MatrixXd transition,
        Eigen::MatrixXd reward, double discount, Eigen::VectorXd initial_state_dist,
        double r_max);

    int n_states() const { return n_states_; }
    int n_actions() const { return n_actions_; }
    double discount() const { return discount_; }
    double r_max() const { return r_max_; }

    const Eigen::VectorXd& initial_state_dist() const { return initial_; }

    /// Distribution over next states for (s, a).
    Eigen::VectorXd transition_row(int state, int action) const;
    double reward(int state, int action) const;

    const Eigen::MatrixXd& transition_matrix() const;
    const Eigen::MatrixXd& reward_matrix() const;

    /// Per-state coordinates used for cluster geometry (empty unless the
    /// environment family defines them, e.g. pendulum bin centers).
    const Eigen::MatrixXd& state_coords() const { return coords_; }
    bool has_state_coords() const { return coords_.size() > 0; }
    void set_state_coords(Eigen::MatrixXd coords);

    /// Offline-contract audit: while locked, every model accessor throws.
    /// Tests lock the model around sampled-mode training to prove that no
    /// training path reads P or R.
    void set_training_locked(bool locked) { training_locked_ = locked; }
    bool training_locked() const { return training_locked_; }

    int index(int state, int action) const { return state * n_actions_ + action; }

  private:
    void check_unlocked() const;
    void validate() const;

    int n_states_;
    int n_actions_;
    Eigen::MatrixXd transition_; // (S*A) x S
    Eigen::MatrixXd reward_;     // S x A
    double discount_;
    Eigen::VectorXd initial_;
    double r_max_;
    Eigen::MatrixXd coords_; // S x d, optional
    bool training_locked_ = false;
};

/// Per-state action distribution.
class TabularPolicy {
  public:
    explicit TabularPolicy(Eigen::MatrixXd probs);

    static TabularPolicy uniform(int n_states, int n_actions);
    static TabularPolicy point_mass(int n_states, int n_actions, int action);

    int n_states() const { return static_cast<int>(probs_.rows()); }
    int n_actions() const { return static_cast<int>(probs_.cols()); }

    double prob(int state, int action) const { return probs_(state, action); }
    Eigen::VectorXd row(int state) const { return probs_.row(state); }
    const Eigen::MatrixXd& matrix() const { return probs_; }

  private:
    Eigen::MatrixXd probs_;
};

/// Dense state-action value table.
class QFunction {
  public:
    QFunction(int n_states, int n_actions)
        : values_(Eigen::MatrixXd::Zero(n_states, n_actions)) {}
    explicit QFunction(Eigen::MatrixXd values) : values_(std::move(values)) {}

    int n_states() const { return static_cast<int>(values_.rows()); }
    int n_actions() const { return static_cast<int>(values_.cols()); }

    double value(int state, int action) const { return values_(state, action); }
    double& value(int state, int action) { return values_(state, action); }
    const Eigen::MatrixXd& matrix() const { return values_; }
    Eigen::MatrixXd& matrix() { return values_; }

    /// V(s) = sum_a pi(a|s) Q(s,a).
    Eigen::VectorXd state_values(const TabularPolicy& policy) const;

  private:
    Eigen::MatrixXd values_;
};

struct TrajectoryStep {
    int state;
    int action;
    double reward;
    int next_state;
    bool terminal;
};

using Trajectory = std::vector<TrajectoryStep>;

/// One exact application of the policy Bellman operator:
/// (B^pi Q)(s,a) = R(s,a) + gamma * sum_{s'} P(s'|s,a) sum_{a'} pi(a'|s') Q(s',a').
QFunction bellman_apply(const Mdp& mdp, const TabularPolicy& policy,
                        const QFunction& q);

/// Ground-truth Q^pi via the linear solve (I - gamma P^pi) V = R^pi followed
/// by one backup; satisfies Q = B^pi Q componentwise.
QFunction exact_q(const Mdp& mdp, const TabularPolicy& policy);

Trajectory sample_episode(const Mdp& mdp, const TabularPolicy& policy, int horizon,
                          std::uint64_t seed);

struct MonteCarloEstimate {
    double mean;
    double std_error;
    int n_rollouts;
};

/// Mean truncated return over rollouts starting from (state, action).
MonteCarloEstimate monte_carlo_q(const Mdp& mdp, const TabularPolicy& policy,
                                 int state, int action, int n_rollouts, int horizon,
                                 std::uint64_t seed);

/// Dirichlet(1,...,1) transition rows, rewards uniform in [-1, 1].
Mdp random_mdp(int n_states, int n_actions, std::uint64_t seed,
               double discount = 0.9);

/// Classic torque-limited pendulum discretized onto a finite grid. Angle bins
/// wrap around the circle, velocity clips to [-8, 8], torque grid spans
/// [-2, 2]; dynamics are deterministic bin-center to nearest-bin updates and
/// the reward is the usual negative quadratic cost. The initial state is the
/// hanging rest state.
Mdp pendulum_mdp(int n_angle_bins, int n_velocity_bins, int n_action_bins,
                 double discount = 0.95);

void save_mdp(const Mdp& mdp, const std::string& path);
Mdp load_mdp(const std::string& path);

} // namespace epq
