#include "epq/learner.hpp"

#include "epq/errors.hpp"
#include "epq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace epq {

bool mode_is_exact(Mode mode) {
    return mode == Mode::EpqExact || mode == Mode::CqlExact;
}

bool mode_is_epq(Mode mode) {
    return mode == Mode::EpqExact || mode == Mode::EpqSampled;
}

std::string mode_name(Mode mode) {
    switch (mode) {
        case Mode::EpqExact: return "epq-exact";
        case Mode::EpqSampled: return "epq-sampled";
        case Mode::CqlExact: return "cql-exact";
        case Mode::CqlSampled: return "cql-sampled";
    }
    return "unknown";
}

void LearnerConfig::validate() const {
    penalty.validate();
    if (!(q_step_size > 0.0))
        throw std::invalid_argument("LearnerConfig: q_step_size must be > 0");
    if (!(policy_temperature > 0.0))
        throw std::invalid_argument("LearnerConfig: policy_temperature must be > 0");
    if (!(ema_rate > 0.0 && ema_rate <= 1.0))
        throw std::invalid_argument("LearnerConfig: ema_rate must lie in (0, 1]");
    if (batch_size < 1)
        throw std::invalid_argument("LearnerConfig: batch_size must be >= 1");
    if (n_action_samples < 1)
        throw std::invalid_argument("LearnerConfig: n_action_samples must be >= 1");
    if (max_gradient_steps < 1)
        throw std::invalid_argument("LearnerConfig: max_gradient_steps must be >= 1");
    if (policy_period < 1)
        throw std::invalid_argument("LearnerConfig: policy_period must be >= 1");
}

namespace {

Eigen::VectorXd boltzmann_row(const Eigen::VectorXd& scores,
                              const std::vector<int>& actions, int n_actions) {
    double shift = -std::numeric_limits<double>::infinity();
    int top = actions.front();
    for (int a : actions) {
        if (scores[a] > shift) {
            shift = scores[a];
            top = a;
        }
    }
    Eigen::VectorXd row = Eigen::VectorXd::Zero(n_actions);
    double total = 0.0;
    for (int a : actions) {
        row[a] = std::exp(scores[a] - shift);
        total += row[a];
    }
    row /= total;
    // Roundoff lands on the dominant entry, which can absorb it.
    row[top] += 1.0 - row.sum();
    return row;
}

/// beta_hat rows at visited states, uniform rows elsewhere.
TabularPolicy behavior_as_policy(const BehaviorEstimate& behavior) {
    Eigen::MatrixXd probs = Eigen::MatrixXd::Constant(
        behavior.n_states(), behavior.n_actions(), 1.0 / behavior.n_actions());
    for (int s = 0; s < behavior.n_states(); ++s)
        if (behavior.visited(s)) probs.row(s) = behavior.row(s);
    return TabularPolicy(std::move(probs));
}

int most_frequent_state(const OfflineDataset& dataset) {
    std::vector<std::int64_t> counts(dataset.n_states, 0);
    for (const Transition& t : dataset.transitions) counts[t.state] += 1;
    int best = 0;
    for (int s = 1; s < dataset.n_states; ++s)
        if (counts[s] > counts[best]) best = s;
    return best;
}

double dataset_r_max(const OfflineDataset& dataset) {
    double r = 0.0;
    for (const Transition& t : dataset.transitions)
        r = std::max(r, std::abs(t.reward));
    return r;
}

} // namespace

QFunction epq_exact_iterate(const QFunction& q, const Mdp& model,
                            const TabularPolicy& policy,
                            const BehaviorEstimate& behavior,
                            const PenaltyConfig& penalty) {
    QFunction next = bellman_apply(model, policy, q);
    if (penalty.alpha != 0.0) {
        const Eigen::MatrixXd p = exclusive_penalty_matrix(
            policy, behavior, penalty.tau(model.n_actions()), true);
        next.matrix() -= penalty.alpha * p;
    }
    return next;
}

QFunction cql_exact_iterate(const QFunction& q, const Mdp& model,
                            const TabularPolicy& policy,
                            const BehaviorEstimate& behavior, double alpha) {
    QFunction next = bellman_apply(model, policy, q);
    if (alpha != 0.0) {
        const Eigen::MatrixXd p =
            exclusive_penalty_matrix(policy, behavior, 0.0, false);
        next.matrix() -= alpha * p;
    }
    return next;
}

TabularPolicy policy_improve(const QFunction& q, double temperature) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("policy_improve: temperature must be > 0");
    const int S = q.n_states();
    const int A = q.n_actions();
    std::vector<int> all(A);
    for (int a = 0; a < A; ++a) all[a] = a;
    Eigen::MatrixXd probs(S, A);
    for (int s = 0; s < S; ++s)
        probs.row(s) =
            boltzmann_row(q.matrix().row(s) / temperature, all, A).transpose();
    return TabularPolicy(std::move(probs));
}

TabularPolicy policy_improve_restricted(const QFunction& q, double temperature,
                                        const BehaviorEstimate& support) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("policy_improve: temperature must be > 0");
    const int S = q.n_states();
    const int A = q.n_actions();
    std::vector<int> all(A);
    for (int a = 0; a < A; ++a) all[a] = a;
    Eigen::MatrixXd probs(S, A);
    for (int s = 0; s < S; ++s) {
        std::vector<int> actions;
        if (support.visited(s)) {
            for (int a = 0; a < A; ++a)
                if (support.supported(s, a)) actions.push_back(a);
        } else {
            actions = all;
        }
        probs.row(s) =
            boltzmann_row(q.matrix().row(s) / temperature, actions, A).transpose();
    }
    return TabularPolicy(std::move(probs));
}

QFunction ema_update(const QFunction& target_q, const QFunction& q, double rate) {
    if (!(rate > 0.0 && rate <= 1.0))
        throw std::invalid_argument("ema_update: rate must lie in (0, 1]");
    return QFunction((1.0 - rate) * target_q.matrix() + rate * q.matrix());
}

double log_sum_exp_estimate(const QFunction& q, int state,
                            const TabularPolicy& policy, int n_samples,
                            std::uint64_t seed) {
    if (n_samples < 2)
        throw std::invalid_argument("log_sum_exp_estimate: n_samples must be >= 2");
    const int A = q.n_actions();
    Rng rng(seed);
    std::vector<double> terms;
    terms.reserve(2 * static_cast<std::size_t>(n_samples));
    const double log_uniform = -std::log(static_cast<double>(A));
    const Eigen::VectorXd policy_row = policy.row(state);
    for (int i = 0; i < n_samples; ++i) {
        const int a = rng.categorical(policy_row);
        terms.push_back(q.value(state, a) - std::log(policy_row[a]));
    }
    for (int i = 0; i < n_samples; ++i) {
        const int a = rng.uniform_int(A);
        terms.push_back(q.value(state, a) - log_uniform);
    }
    const double shift = *std::max_element(terms.begin(), terms.end());
    double total = 0.0;
    for (double t : terms) total += std::exp(t - shift);
    return shift + std::log(total) - std::log(2.0 * n_samples);
}

LossGrad sampled_loss(const QFunction& q, const QFunction& target_q,
                      const OfflineDataset& dataset, std::span<const int> batch,
                      const TabularPolicy& policy, const BehaviorEstimate& behavior,
                      const std::vector<double>& weights,
                      const LearnerConfig& config) {
    if (batch.empty())
        throw std::invalid_argument("sampled_loss: empty batch");
    if (weights.size() != dataset.transitions.size())
        throw std::invalid_argument("sampled_loss: weight vector shape mismatch");
    const int S = q.n_states();
    const int A = q.n_actions();
    const bool is_epq = mode_is_epq(config.mode);
    const double alpha = config.penalty.alpha;
    const double c_min = is_epq ? config.penalty.c_min : 1.0;
    const double tau = config.penalty.tau(A);
    const double gamma = dataset.gamma;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    // E_{a'~pi}[target(s', a')] for every state, used by every Bellman target.
    const Eigen::VectorXd target_v =
        (target_q.matrix().array() * policy.matrix().array()).rowwise().sum();

    // Lazy per-state caches for the penalty bracket and adaptation factor.
    std::vector<char> have_state(S, 0);
    Eigen::MatrixXd bracket_grad = Eigen::MatrixXd::Zero(S, A);
    Eigen::VectorXd bracket_value = Eigen::VectorXd::Zero(S);
    Eigen::VectorXd f_tau = Eigen::VectorXd::Ones(S);
    auto prime_state = [&](int s) {
        if (have_state[s]) return;
        have_state[s] = 1;
        if (config.bracket == PenaltyBracket::LogSumExp) {
            const double shift = q.matrix().row(s).maxCoeff();
            double total = 0.0;
            for (int a = 0; a < A; ++a)
                total += std::exp(q.value(s, a) - shift);
            bracket_value[s] = shift + std::log(total);
            for (int a = 0; a < A; ++a)
                bracket_grad(s, a) = std::exp(q.value(s, a) - shift) / total;
        } else {
            bracket_value[s] = policy.row(s).dot(q.matrix().row(s));
            bracket_grad.row(s) = policy.row(s).transpose();
        }
        if (is_epq) f_tau[s] = adaptation_factor(policy, behavior, s, tau);
    };

    LossGrad out;
    out.loss = 0.0;
    out.grad = Eigen::MatrixXd::Zero(S, A);
    double abs_penalty_sum = 0.0;
    double f_sum = 0.0;
    double w_sum = 0.0;
    for (int idx : batch) {
        const Transition& t = dataset.transitions.at(idx);
        const double w = weights[idx];
        const double y = t.reward + gamma * target_v[t.next_state];
        const double residual = q.value(t.state, t.action) - y;
        const double w_clip = std::max(c_min, w);
        out.loss += inv_b * 0.5 * w_clip * residual * residual;
        out.grad(t.state, t.action) += inv_b * w_clip * residual;
        w_sum += w;
        if (alpha != 0.0) {
            prime_state(t.state);
            const double f = f_tau[t.state];
            const double pen =
                w * f * (bracket_value[t.state] - q.value(t.state, t.action));
            out.loss += inv_b * alpha * pen;
            out.grad.row(t.state) +=
                inv_b * alpha * w * f * bracket_grad.row(t.state);
            out.grad(t.state, t.action) -= inv_b * alpha * w * f;
            abs_penalty_sum += std::abs(pen);
            f_sum += f;
        } else {
            f_sum += 1.0;
        }
    }
    out.mean_abs_penalty = abs_penalty_sum * inv_b;
    out.mean_f_tau = f_sum * inv_b;
    out.mean_w = w_sum * inv_b;
    return out;
}

FullBatchContext make_full_batch_context(const Mdp& model,
                                         const OfflineDataset& dataset,
                                         const TabularPolicy& policy,
                                         const BehaviorEstimate& behavior,
                                         const QFunction& reference_q,
                                         const QFunction& target_q, double alpha,
                                         double tau) {
    const int S = model.n_states();
    const int A = model.n_actions();
    FullBatchContext ctx;
    ctx.alpha = alpha;
    ctx.policy_probs = policy.matrix();
    ctx.state_weight = Eigen::VectorXd::Zero(S);
    for (const Transition& t : dataset.transitions)
        ctx.state_weight[t.state] += 1.0;
    ctx.state_weight /= static_cast<double>(dataset.transitions.size());

    ctx.behavior_probs = Eigen::MatrixXd::Zero(S, A);
    ctx.is_weights = Eigen::MatrixXd::Zero(S, A);
    ctx.prioritized = Eigen::MatrixXd::Zero(S, A);
    ctx.adaptation = Eigen::VectorXd::Ones(S);
    ctx.penalty_pd = Eigen::MatrixXd::Zero(S, A);
    ctx.bellman_target = bellman_apply(model, policy, target_q).matrix();
    for (int s = 0; s < S; ++s) {
        if (!behavior.visited(s)) continue;
        ctx.behavior_probs.row(s) = behavior.row(s).transpose();
        ctx.is_weights.row(s) =
            is_weight_exact_row(behavior, reference_q, s).transpose();
        ctx.adaptation[s] = adaptation_factor(policy, behavior, s, tau);
        for (int a = 0; a < A; ++a) {
            ctx.prioritized(s, a) = ctx.behavior_probs(s, a) * ctx.is_weights(s, a);
            if (ctx.prioritized(s, a) > 0.0) {
                ctx.penalty_pd(s, a) =
                    ctx.adaptation[s] *
                    (policy.prob(s, a) / ctx.prioritized(s, a) - 1.0);
            } else if (policy.prob(s, a) > 0.0) {
                throw support_error(
                    "full batch context: policy action " + std::to_string(a) +
                    " unsupported at state " + std::to_string(s));
            }
        }
    }
    return ctx;
}

LossGrad compact_full_batch_loss(const FullBatchContext& ctx, const QFunction& q) {
    const int S = q.n_states();
    const int A = q.n_actions();
    LossGrad out;
    out.loss = 0.0;
    out.grad = Eigen::MatrixXd::Zero(S, A);
    for (int s = 0; s < S; ++s) {
        const double ds = ctx.state_weight[s];
        if (ds == 0.0) continue;
        for (int a = 0; a < A; ++a) {
            const double mass = ctx.prioritized(s, a);
            if (mass == 0.0) continue;
            const double y =
                ctx.bellman_target(s, a) - ctx.alpha * ctx.penalty_pd(s, a);
            const double residual = q.value(s, a) - y;
            out.loss += ds * mass * 0.5 * residual * residual;
            out.grad(s, a) += ds * mass * residual;
        }
    }
    return out;
}

LossGrad expanded_full_batch_loss(const FullBatchContext& ctx, const QFunction& q) {
    const int S = q.n_states();
    const int A = q.n_actions();
    LossGrad out;
    out.loss = 0.0;
    out.grad = Eigen::MatrixXd::Zero(S, A);
    for (int s = 0; s < S; ++s) {
        const double ds = ctx.state_weight[s];
        if (ds == 0.0) continue;
        const double f = ctx.adaptation[s];
        const double policy_q = ctx.policy_probs.row(s).dot(q.matrix().row(s));
        for (int a = 0; a < A; ++a) {
            const double mass = ctx.behavior_probs(s, a) * ctx.is_weights(s, a);
            if (mass > 0.0) {
                const double residual = q.value(s, a) - ctx.bellman_target(s, a);
                out.loss += ds * mass * 0.5 * residual * residual;
                out.grad(s, a) += ds * mass * residual;
                out.loss += ds * ctx.alpha * f * mass * (policy_q - q.value(s, a));
                out.grad(s, a) -= ds * ctx.alpha * f * mass;
            }
            out.grad(s, a) += ds * ctx.alpha * f * ctx.policy_probs(s, a);
        }
    }
    return out;
}

namespace {

struct ExactStats {
    double loss;
    double mean_abs_penalty;
    double mean_f_tau;
};

} // namespace

TrainedAgent train(const OfflineDataset& dataset, const LearnerConfig& config,
                   const Mdp* model, const TabularPolicy* fixed_policy,
                   const std::vector<double>* precomputed_weights) {
    config.validate();
    if (dataset.transitions.empty())
        throw std::invalid_argument("train: dataset is empty");
    const bool exact = mode_is_exact(config.mode);
    const bool is_epq = mode_is_epq(config.mode);
    if (exact && model == nullptr)
        throw std::invalid_argument("train: exact modes require the support model");
    if (exact && (model->n_states() != dataset.n_states ||
                  model->n_actions() != dataset.n_actions))
        throw std::invalid_argument("train: dataset/model dimension mismatch");
    if (config.policy_update == PolicyUpdate::FixedGiven && fixed_policy == nullptr)
        throw std::invalid_argument("train: fixed policy requested but not given");

    const int S = dataset.n_states;
    const int A = dataset.n_actions;
    const BehaviorEstimate behavior = estimate_behavior(dataset, S, A);
    const double gamma = exact ? model->discount() : dataset.gamma;
    const double r_max = exact ? model->r_max() : dataset_r_max(dataset);
    const double guard = 10.0 * r_max / (1.0 - gamma);
    const double tau = config.penalty.tau(A);

    TabularPolicy policy = [&] {
        switch (config.policy_update) {
            case PolicyUpdate::FixedBehavior: return behavior_as_policy(behavior);
            case PolicyUpdate::FixedGiven:
                return behavior.restrict_policy(*fixed_policy);
            case PolicyUpdate::Improve: return behavior_as_policy(behavior);
        }
        return behavior_as_policy(behavior);
    }();

    TrainedAgent agent{QFunction(S, A), QFunction(S, A), policy, {},
                       RunStatus::BudgetExhausted, "", most_frequent_state(dataset)};
    agent.history.reserve(std::min(config.max_gradient_steps, 1 << 20));

    const std::vector<int> visited = behavior.visited_states();
    std::size_t supported_pairs = 0;
    for (int s : visited)
        for (int a = 0; a < A; ++a)
            if (behavior.supported(s, a)) ++supported_pairs;

    auto probe_value = [&](const QFunction& q) {
        return agent.policy.row(agent.probe_state).dot(
            q.matrix().row(agent.probe_state));
    };

    if (exact) {
        Eigen::MatrixXd penalty_matrix = Eigen::MatrixXd::Zero(S, A);
        double mean_f = 1.0;
        auto refresh_penalty = [&]() {
            penalty_matrix =
                exclusive_penalty_matrix(agent.policy, behavior, tau, is_epq);
            if (is_epq) {
                double f_total = 0.0;
                for (int s : visited)
                    f_total += adaptation_factor(agent.policy, behavior, s, tau);
                mean_f = visited.empty() ? 1.0 : f_total / visited.size();
            } else {
                mean_f = 1.0;
            }
        };
        refresh_penalty();
        for (int step = 0; step < config.max_gradient_steps; ++step) {
            if (config.policy_update == PolicyUpdate::Improve &&
                step % config.policy_period == 0) {
                agent.policy = policy_improve_restricted(
                    agent.q, config.policy_temperature, behavior);
                refresh_penalty();
            }
            QFunction next = bellman_apply(*model, agent.policy, agent.q);
            next.matrix() -= config.penalty.alpha * penalty_matrix;

            const Eigen::MatrixXd diff = next.matrix() - agent.q.matrix();
            const double delta_sup = diff.cwiseAbs().maxCoeff();
            double loss = 0.0;
            double abs_pen = 0.0;
            for (int s : visited) {
                for (int a = 0; a < A; ++a) {
                    if (!behavior.supported(s, a)) continue;
                    loss += 0.5 * diff(s, a) * diff(s, a);
                    abs_pen += std::abs(penalty_matrix(s, a));
                }
            }
            loss /= static_cast<double>(supported_pairs);
            abs_pen /= static_cast<double>(supported_pairs);
            agent.q = std::move(next);
            agent.history.push_back(StepRecord{step, loss, abs_pen, mean_f, 1.0, delta_sup,
                                     probe_value(agent.q)});
            if (agent.q.matrix().cwiseAbs().maxCoeff() > guard) {
                agent.status = RunStatus::Diverged;
                agent.status_note = "sup norm of Q exceeded " +
                                    std::to_string(guard) + " at sweep " +
                                    std::to_string(step);
                break;
            }
            if (delta_sup < config.convergence_tol) {
                agent.status = RunStatus::Converged;
                agent.status_note =
                    "converged after " + std::to_string(step + 1) + " sweeps";
                break;
            }
        }
        agent.target_q = agent.q;
        return agent;
    }

    // Sampled mode: batches, EMA target, clipped prioritized weights.
    OfflineDataset with_returns;
    const OfflineDataset* data = &dataset;
    std::vector<double> weights;
    if (precomputed_weights != nullptr) {
        weights = *precomputed_weights;
    } else if (is_epq && config.penalty.use_pd) {
        if (!dataset.has_returns()) {
            with_returns = compute_returns(dataset);
            data = &with_returns;
        }
        const ClusterIndex index =
            build_cluster_index(*data, config.penalty.epsilon_radius,
                                ClusterMetric::ExactMatch);
        weights = is_weight_clustered(*data, index, config.penalty.zeta);
    } else {
        weights.assign(dataset.transitions.size(), 1.0);
    }
    if (weights.size() != dataset.transitions.size())
        throw std::invalid_argument("train: precomputed weight size mismatch");

    Rng rng(config.seed);
    const int n = static_cast<int>(data->transitions.size());
    std::vector<int> batch(config.batch_size);
    for (int step = 0; step < config.max_gradient_steps; ++step) {
        if (config.policy_update == PolicyUpdate::Improve &&
            step % config.policy_period == 0) {
            agent.policy = policy_improve_restricted(
                agent.q, config.policy_temperature, behavior);
        }
        for (int& b : batch) b = rng.uniform_int(n);
        const LossGrad lg = sampled_loss(agent.q, agent.target_q, *data, batch,
                                         agent.policy, behavior, weights, config);
        agent.q.matrix() -= config.q_step_size * lg.grad;
        agent.target_q = ema_update(agent.target_q, agent.q, config.ema_rate);
        const double delta_sup =
            config.q_step_size * lg.grad.cwiseAbs().maxCoeff();
        agent.history.push_back(StepRecord{step, lg.loss, lg.mean_abs_penalty, lg.mean_f_tau,
                                 lg.mean_w, delta_sup, probe_value(agent.q)});
        if (agent.q.matrix().cwiseAbs().maxCoeff() > guard) {
            agent.status = RunStatus::Diverged;
            agent.status_note = "sup norm of Q exceeded " + std::to_string(guard) +
                                " at step " + std::to_string(step);
            break;
        }
    }
    if (agent.status != RunStatus::Diverged)
        agent.status_note = "completed " +
                            std::to_string(agent.history.size()) +
                            " gradient steps";
    return agent;
}

void write_metrics_csv(const std::vector<StepRecord>& history,
                       const std::string& path) {
    std::ofstream file(path, std::ios::binary);
    if (!file)
        throw std::runtime_error("write_metrics_csv: cannot open " + path);
    file << "step,loss,mean_abs_penalty,mean_f_tau,mean_w,delta_q_sup\n";
    char buf[256];
    for (const StepRecord& r : history) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      r.step, r.loss, r.mean_abs_penalty, r.mean_f_tau, r.mean_w,
                      r.delta_q_sup);
        file << buf;
    }
}

} // namespace epq
