#pragma once

#include "epq/dataset.hpp"
#include "epq/mdp.hpp"
#include "epq/penalty.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace epq {

enum class Mode { EpqExact, EpqSampled, CqlExact, CqlSampled };
enum class PolicyUpdate { FixedBehavior, FixedGiven, Improve };
enum class PenaltyBracket { PolicyExpectation, LogSumExp };
enum class RunStatus { Converged, BudgetExhausted, Diverged };

bool mode_is_exact(Mode mode);
bool mode_is_epq(Mode mode);
std::string mode_name(Mode mode);

struct LearnerConfig {
    Mode mode = Mode::EpqSampled;
    PenaltyConfig penalty;
    double q_step_size = 0.5;
    double policy_temperature = 0.5;
    double ema_rate = 0.005;
    int batch_size = 256;
    int n_action_samples = 10;
    int max_gradient_steps = 20000;
    double convergence_tol = 1e-10;
    std::uint64_t seed = 0;
    PolicyUpdate policy_update = PolicyUpdate::Improve;
    PenaltyBracket bracket = PenaltyBracket::LogSumExp;
    int policy_period = 1; // policy refresh every k Q updates

    void validate() const;
};

struct StepRecord {
    int step;
    double loss;
    double mean_abs_penalty;
    double mean_f_tau;
    double mean_w;
    double delta_q_sup;
    double probe_value;
};

struct TrainedAgent {
    QFunction q;
    QFunction target_q;
    TabularPolicy policy;
    std::vector<StepRecord> history;
    RunStatus status = RunStatus::BudgetExhausted;
    std::string status_note;
    int probe_state = 0;
};

/// One synchronous penalized sweep: B^pi Q - alpha * P_tau on data-supported
/// pairs, plain Bellman backup elsewhere. With alpha = 0 this is exactly
/// bellman_apply.
QFunction epq_exact_iterate(const QFunction& q, const Mdp& model,
                            const TabularPolicy& policy,
                            const BehaviorEstimate& behavior,
                            const PenaltyConfig& penalty);

/// Same sweep with the adaptation factor pinned to 1.
QFunction cql_exact_iterate(const QFunction& q, const Mdp& model,
                            const TabularPolicy& policy,
                            const BehaviorEstimate& behavior, double alpha);

/// Closed-form Boltzmann maximizer of the entropy-regularized objective:
/// pi(a|s) proportional to exp(Q(s,a)/temperature).
TabularPolicy policy_improve(const QFunction& q, double temperature);

/// Boltzmann rows over the data support at visited states; over all actions
/// at unvisited ones.
TabularPolicy policy_improve_restricted(const QFunction& q, double temperature,
                                        const BehaviorEstimate& support);

QFunction ema_update(const QFunction& target_q, const QFunction& q, double rate);

/// Two-population estimate of log sum_a exp Q(s,a): n_samples draws from the
/// policy and n_samples from the uniform distribution, each importance
/// corrected. Deterministic given the seed.
double log_sum_exp_estimate(const QFunction& q, int state,
                            const TabularPolicy& policy, int n_samples,
                            std::uint64_t seed);

struct LossGrad {
    double loss = 0.0;
    Eigen::MatrixXd grad;
    // Batch diagnostics filled by sampled_loss for the metrics stream.
    double mean_abs_penalty = 0.0;
    double mean_f_tau = 0.0;
    double mean_w = 0.0;
};

/// Batch value loss: clipped-weight Bellman error plus the weighted exclusive
/// penalty bracket, with its analytic gradient with respect to every Q-table
/// entry. `weights` are per-transition IS weights aligned with the dataset;
/// the Bellman target is built from target_q and is treated as constant.
LossGrad sampled_loss(const QFunction& q, const QFunction& target_q,
                      const OfflineDataset& dataset, std::span<const int> batch,
                      const TabularPolicy& policy, const BehaviorEstimate& behavior,
                      const std::vector<double>& weights,
                      const LearnerConfig& config);

/// Frozen full-batch quantities shared by the two algebraic forms of the
/// prioritized penalized loss: state frequencies, live-Q IS weights, the
/// Bellman backup of the target table, and the per-pair penalty.
struct FullBatchContext {
    Eigen::VectorXd state_weight;    // empirical state distribution over the data
    Eigen::MatrixXd behavior_probs;  // beta_hat rows (zero rows off the data)
    Eigen::MatrixXd is_weights;      // w(s,a), frozen at the reference Q
    Eigen::MatrixXd prioritized;     // beta_hat^Q = beta_hat * w
    Eigen::VectorXd adaptation;      // f_tau(s)
    Eigen::MatrixXd bellman_target;  // (B^pi target_q)(s,a)
    Eigen::MatrixXd penalty_pd;      // f_tau * (pi/beta_hat^Q - 1)
    Eigen::MatrixXd policy_probs;
    double alpha = 0.0;
};

FullBatchContext make_full_batch_context(const Mdp& model,
                                         const OfflineDataset& dataset,
                                         const TabularPolicy& policy,
                                         const BehaviorEstimate& behavior,
                                         const QFunction& reference_q,
                                         const QFunction& target_q, double alpha,
                                         double tau);

/// (1/2) E_{s~D, a~beta_hat^Q}[(Q - {B^pi Q_target - alpha P_PD})^2].
LossGrad compact_full_batch_loss(const FullBatchContext& ctx, const QFunction& q);

/// E_{s~D, a~beta_hat}[w * {(1/2)(Q - B^pi Q_target)^2
///                          + alpha f_tau (E_{a'~pi}[Q] - Q)}].
LossGrad expanded_full_batch_loss(const FullBatchContext& ctx, const QFunction& q);

/// Full training loop over an offline dataset. Exact modes sweep the
/// penalized operator on the supplied model until the sup-norm change falls
/// below convergence_tol; sampled modes run the gradient-step budget on
/// batches. Training halts with a divergence report if the sup norm of Q
/// exceeds 10 * r_max / (1 - gamma).
TrainedAgent train(const OfflineDataset& dataset, const LearnerConfig& config,
                   const Mdp* model = nullptr,
                   const TabularPolicy* fixed_policy = nullptr,
                   const std::vector<double>* precomputed_weights = nullptr);

/// Per-step metrics stream with the fixed column order declared in SCHEMA.
void write_metrics_csv(const std::vector<StepRecord>& history,
                       const std::string& path);

} // namespace epq
