#pragma once

#include "epq/dataset.hpp"
#include "epq/mdp.hpp"

#include <Eigen/Dense>

#include <limits>
#include <vector>

namespace epq {

/// All knobs of the exclusive penalty and its practical estimators.
///
/// The threshold tau is specified as a multiple of rho = log(1/n_actions),
/// the log-density of the uniform action distribution. rho is negative, so
/// larger multiples mean lower thresholds and weaker penalties; any multiple
/// <= 0 keeps the full penalty everywhere (the CQL limit).
struct PenaltyConfig {
    double alpha = 20.0;
    double tau_over_rho = 2.0;
    double c_min = 0.2;
    double epsilon_radius = 2.0;
    double zeta = 2.0;
    bool use_pd = true;

    double rho(int n_actions) const { return -std::log(static_cast<double>(n_actions)); }
    double tau(int n_actions) const { return tau_over_rho * rho(n_actions); }

    void validate() const;
};

/// Amount of adaptive penalty: min(1, exp(-(log_beta - tau))).
/// Equals 1 exactly when log_beta <= tau and decays as the data log-density
/// rises above the threshold.
double adaptive_amount(double log_beta, double tau);

/// f_tau(s) = E_{a~pi}[adaptive_amount(log beta_hat(a|s), tau)], the exact
/// expectation over the discrete action set.
double adaptation_factor(const TabularPolicy& policy, const BehaviorEstimate& behavior,
                         int state, double tau);

/// pi(a|s)/beta_hat(a|s) - 1.
double penalty_term(const TabularPolicy& policy, const BehaviorEstimate& behavior,
                    int state, int action);

/// The exclusive penalty: adaptation factor times penalty term.
double exclusive_penalty(const TabularPolicy& policy, const BehaviorEstimate& behavior,
                         int state, int action, double tau);

/// Average penalty over policy actions, f_tau(s) * sum_a (pi-beta)^2/beta.
double average_penalty_epq(const TabularPolicy& policy,
                           const BehaviorEstimate& behavior, int state, double tau);

/// Same with the adaptation factor pinned to 1.
double average_penalty_cql(const TabularPolicy& policy,
                           const BehaviorEstimate& behavior, int state);

/// Per-pair penalty table: f_tau * (pi/beta_hat - 1) on supported pairs of
/// visited states, zero elsewhere. with_adaptation=false pins f_tau to 1.
/// Positive policy mass off the data support raises a support error.
Eigen::MatrixXd exclusive_penalty_matrix(const TabularPolicy& policy,
                                         const BehaviorEstimate& behavior, double tau,
                                         bool with_adaptation);

/// Average penalty Delta(s) = E_{a~pi}[penalty(s, a)]; zero at unvisited
/// states where no penalty applies.
Eigen::VectorXd average_penalty_vector(const TabularPolicy& policy,
                                       const BehaviorEstimate& behavior, double tau,
                                       bool with_adaptation);

/// Row proportional to beta_hat(a|s) * exp(score(a)/zeta), normalized over
/// the data support. Off-support entries stay zero.
Eigen::VectorXd prioritized_behavior(const BehaviorEstimate& behavior,
                                     const Eigen::Ref<const Eigen::VectorXd>& scores,
                                     int state, double zeta);

/// w(s,a) = exp(score(s,a)) / E_{a'~beta_hat}[exp(score(s,a'))].
double is_weight_exact(const BehaviorEstimate& behavior, const QFunction& scores,
                       int state, int action);

/// Full row of exact IS weights at a visited state (zero off-support).
Eigen::VectorXd is_weight_exact_row(const BehaviorEstimate& behavior,
                                    const QFunction& scores, int state);

double clip_weight(double w, double c_min);

enum class ClusterMetric {
    EuclideanCoords, // distance on embedded state coordinates (one-hot fallback)
    ExactMatch,      // discrete states: a cluster is one state's transitions
};

/// Radius clusters over the distinct states of a dataset. Membership is a
/// state-level relation: the cluster of a transition contains every
/// transition whose state lies within radius of its own.
class ClusterIndex {
  public:
    ClusterMetric metric() const { return metric_; }
    double d_bar_closest() const { return d_bar_closest_; }
    double radius() const { return radius_; }

    const std::vector<int>& distinct_states() const { return distinct_states_; }
    const std::vector<int>& neighbor_states(int state) const;

    /// Transition indices forming the cluster of transition t.
    std::vector<int> members_of(const OfflineDataset& dataset, int t) const;

    friend ClusterIndex build_cluster_index(const OfflineDataset& dataset,
                                            double epsilon_radius,
                                            ClusterMetric metric,
                                            const Eigen::MatrixXd& state_coords);

  private:
    ClusterMetric metric_ = ClusterMetric::ExactMatch;
    double d_bar_closest_ = 0.0;
    double radius_ = 0.0;
    std::vector<int> distinct_states_;
    std::vector<int> state_to_distinct_;          // -1 when absent
    std::vector<std::vector<int>> neighbors_;     // distinct idx -> state ids
    std::vector<std::vector<int>> transitions_by_distinct_;

    friend class ClusteredWeights;
    friend std::vector<double> is_weight_clustered(const OfflineDataset& dataset,
                                                   const ClusterIndex& index,
                                                   double zeta);
};

/// state_coords may be empty, in which case states embed one-hot (distance
/// sqrt(2) between any two distinct states).
ClusterIndex build_cluster_index(const OfflineDataset& dataset, double epsilon_radius,
                                 ClusterMetric metric,
                                 const Eigen::MatrixXd& state_coords = {});

/// Per-transition weights exp(G/zeta) / mean over cluster members of
/// exp(G'/zeta); requires computed returns.
std::vector<double> is_weight_clustered(const OfflineDataset& dataset,
                                        const ClusterIndex& index, double zeta);

/// Per-pair score log( mean over transitions at (s,a) of exp(G/zeta) );
/// NaN at pairs absent from the dataset. Feeding this table to
/// is_weight_exact reproduces clustered weights on exact-match clusters when
/// returns are constant within each pair.
Eigen::MatrixXd return_score_table(const OfflineDataset& dataset, double zeta);

} // namespace epq
