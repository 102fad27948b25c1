#include "epq/penalty.hpp"

#include "epq/errors.hpp"

#include <algorithm>
#include <cmath>

namespace epq {

void PenaltyConfig::validate() const {
    if (!(alpha >= 0.0))
        throw std::invalid_argument("PenaltyConfig: alpha must be >= 0");
    if (!(c_min > 0.0 && c_min <= 1.0))
        throw std::invalid_argument("PenaltyConfig: c_min must lie in (0, 1]");
    if (!(zeta > 0.0))
        throw std::invalid_argument("PenaltyConfig: zeta must be > 0");
    if (!(epsilon_radius > 0.0))
        throw std::invalid_argument("PenaltyConfig: epsilon_radius must be > 0");
}

double adaptive_amount(double log_beta, double tau) {
    if (!std::isfinite(log_beta))
        throw std::invalid_argument("adaptive_amount: log_beta must be finite");
    if (log_beta <= tau) return 1.0;
    return std::exp(tau - log_beta);
}

double adaptation_factor(const TabularPolicy& policy, const BehaviorEstimate& behavior,
                         int state, double tau) {
    double f = 0.0;
    for (int a = 0; a < policy.n_actions(); ++a) {
        const double p = policy.prob(state, a);
        if (p == 0.0) continue;
        if (!behavior.supported(state, a))
            throw support_error("adaptation_factor: policy action " +
                                std::to_string(a) + " unsupported at state " +
                                std::to_string(state));
        f += p * adaptive_amount(behavior.log_prob(state, a), tau);
    }
    // The expectation lies in (0, 1]; rounding in the policy row must not
    // push it past the upper end.
    return std::min(f, 1.0);
}

double penalty_term(const TabularPolicy& policy, const BehaviorEstimate& behavior,
                    int state, int action) {
    return policy.prob(state, action) / behavior.prob(state, action) - 1.0;
}

double exclusive_penalty(const TabularPolicy& policy, const BehaviorEstimate& behavior,
                         int state, int action, double tau) {
    return adaptation_factor(policy, behavior, state, tau) *
           penalty_term(policy, behavior, state, action);
}

double average_penalty_cql(const TabularPolicy& policy,
                           const BehaviorEstimate& behavior, int state) {
    double delta = 0.0;
    for (int a = 0; a < policy.n_actions(); ++a) {
        const double p = policy.prob(state, a);
        if (p == 0.0) continue;
        delta += p * penalty_term(policy, behavior, state, a);
    }
    return delta;
}

double average_penalty_epq(const TabularPolicy& policy,
                           const BehaviorEstimate& behavior, int state, double tau) {
    return adaptation_factor(policy, behavior, state, tau) *
           average_penalty_cql(policy, behavior, state);
}

Eigen::MatrixXd exclusive_penalty_matrix(const TabularPolicy& policy,
                                         const BehaviorEstimate& behavior, double tau,
                                         bool with_adaptation) {
    const int S = behavior.n_states();
    const int A = behavior.n_actions();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(S, A);
    for (int s = 0; s < S; ++s) {
        if (!behavior.visited(s)) continue;
        const double f =
            with_adaptation ? adaptation_factor(policy, behavior, s, tau) : 1.0;
        for (int a = 0; a < A; ++a) {
            if (behavior.supported(s, a)) {
                out(s, a) = f * penalty_term(policy, behavior, s, a);
            } else if (policy.prob(s, a) > 0.0) {
                throw support_error("penalty matrix: policy action " +
                                    std::to_string(a) + " unsupported at state " +
                                    std::to_string(s));
            }
        }
    }
    return out;
}

Eigen::VectorXd average_penalty_vector(const TabularPolicy& policy,
                                       const BehaviorEstimate& behavior, double tau,
                                       bool with_adaptation) {
    const int S = behavior.n_states();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(S);
    for (int s = 0; s < S; ++s) {
        if (!behavior.visited(s)) continue;
        out[s] = with_adaptation ? average_penalty_epq(policy, behavior, s, tau)
                                 : average_penalty_cql(policy, behavior, s);
    }
    return out;
}

Eigen::VectorXd prioritized_behavior(const BehaviorEstimate& behavior,
                                     const Eigen::Ref<const Eigen::VectorXd>& scores,
                                     int state, double zeta) {
    if (!behavior.visited(state))
        throw support_error("prioritized_behavior: state " + std::to_string(state) +
                            " has empty support");
    if (scores.size() != behavior.n_actions())
        throw std::invalid_argument("prioritized_behavior: score row shape mismatch");
    const int A = behavior.n_actions();
    double shift = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < A; ++a)
        if (behavior.supported(state, a)) shift = std::max(shift, scores[a] / zeta);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(A);
    double total = 0.0;
    for (int a = 0; a < A; ++a) {
        if (!behavior.supported(state, a)) continue;
        out[a] = behavior.prob(state, a) * std::exp(scores[a] / zeta - shift);
        total += out[a];
    }
    out /= total;
    return out;
}

double is_weight_exact(const BehaviorEstimate& behavior, const QFunction& scores,
                       int state, int action) {
    if (!behavior.supported(state, action))
        throw support_error("is_weight_exact: pair (" + std::to_string(state) + ", " +
                            std::to_string(action) + ") off support");
    double shift = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < behavior.n_actions(); ++a)
        if (behavior.supported(state, a))
            shift = std::max(shift, scores.value(state, a));
    double denom = 0.0;
    for (int a = 0; a < behavior.n_actions(); ++a)
        if (behavior.supported(state, a))
            denom += behavior.prob(state, a) * std::exp(scores.value(state, a) - shift);
    return std::exp(scores.value(state, action) - shift) / denom;
}

Eigen::VectorXd is_weight_exact_row(const BehaviorEstimate& behavior,
                                    const QFunction& scores, int state) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(behavior.n_actions());
    for (int a = 0; a < behavior.n_actions(); ++a)
        if (behavior.supported(state, a))
            out[a] = is_weight_exact(behavior, scores, state, a);
    return out;
}

double clip_weight(double w, double c_min) {
    if (!(w >= 0.0))
        throw std::invalid_argument("clip_weight: weight must be >= 0");
    return std::max(c_min, w);
}

const std::vector<int>& ClusterIndex::neighbor_states(int state) const {
    if (state < 0 || state >= static_cast<int>(state_to_distinct_.size()) ||
        state_to_distinct_[state] < 0)
        throw std::invalid_argument("ClusterIndex: state " + std::to_string(state) +
                                    " not present in the indexed dataset");
    return neighbors_[state_to_distinct_[state]];
}

std::vector<int> ClusterIndex::members_of(const OfflineDataset& dataset,
                                          int t) const {
    const int state = dataset.transitions.at(t).state;
    std::vector<int> out;
    for (int nbr : neighbor_states(state)) {
        const auto& ts = transitions_by_distinct_[state_to_distinct_[nbr]];
        out.insert(out.end(), ts.begin(), ts.end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

ClusterIndex build_cluster_index(const OfflineDataset& dataset, double epsilon_radius,
                                 ClusterMetric metric,
                                 const Eigen::MatrixXd& state_coords) {
    if (dataset.transitions.empty())
        throw std::invalid_argument("build_cluster_index: dataset is empty");
    if (!(epsilon_radius > 0.0))
        throw std::invalid_argument("build_cluster_index: epsilon must be > 0");

    ClusterIndex index;
    index.metric_ = metric;
    index.state_to_distinct_.assign(dataset.n_states, -1);
    for (const Transition& t : dataset.transitions) {
        if (index.state_to_distinct_[t.state] < 0) {
            index.state_to_distinct_[t.state] =
                static_cast<int>(index.distinct_states_.size());
            index.distinct_states_.push_back(t.state);
        }
    }
    std::sort(index.distinct_states_.begin(), index.distinct_states_.end());
    for (std::size_t i = 0; i < index.distinct_states_.size(); ++i)
        index.state_to_distinct_[index.distinct_states_[i]] = static_cast<int>(i);

    const int n_distinct = static_cast<int>(index.distinct_states_.size());
    index.transitions_by_distinct_.assign(n_distinct, {});
    for (std::size_t t = 0; t < dataset.transitions.size(); ++t)
        index.transitions_by_distinct_
            [index.state_to_distinct_[dataset.transitions[t].state]]
                .push_back(static_cast<int>(t));

    index.neighbors_.assign(n_distinct, {});
    if (metric == ClusterMetric::ExactMatch) {
        // Discrete states: the cluster of (s, a) is exactly state s's data.
        index.d_bar_closest_ = 0.0;
        index.radius_ = 0.0;
        for (int i = 0; i < n_distinct; ++i)
            index.neighbors_[i] = {index.distinct_states_[i]};
        return index;
    }

    if (n_distinct < 2)
        throw std::invalid_argument(
            "build_cluster_index: need at least 2 distinct states");

    auto embed = [&](int state) -> Eigen::VectorXd {
        if (state_coords.size() > 0) return state_coords.row(state);
        Eigen::VectorXd one_hot = Eigen::VectorXd::Zero(dataset.n_states);
        one_hot[state] = 1.0;
        return one_hot;
    };

    Eigen::MatrixXd dist(n_distinct, n_distinct);
    double nearest_sum = 0.0;
    for (int i = 0; i < n_distinct; ++i) {
        const Eigen::VectorXd ci = embed(index.distinct_states_[i]);
        double nearest = std::numeric_limits<double>::infinity();
        for (int j = 0; j < n_distinct; ++j) {
            if (j == i) {
                dist(i, i) = 0.0;
                continue;
            }
            if (j < i) {
                dist(i, j) = dist(j, i);
            } else {
                dist(i, j) = (ci - embed(index.distinct_states_[j])).norm();
            }
            nearest = std::min(nearest, dist(i, j));
        }
        nearest_sum += nearest;
    }
    index.d_bar_closest_ = nearest_sum / n_distinct;
    if (index.d_bar_closest_ <= 0.0)
        throw degenerate_geometry_error(
            "build_cluster_index: all states share one coordinate");
    index.radius_ = epsilon_radius * index.d_bar_closest_;
    for (int i = 0; i < n_distinct; ++i)
        for (int j = 0; j < n_distinct; ++j)
            if (dist(i, j) <= index.radius_)
                index.neighbors_[i].push_back(index.distinct_states_[j]);
    return index;
}

std::vector<double> is_weight_clustered(const OfflineDataset& dataset,
                                        const ClusterIndex& index, double zeta) {
    if (!dataset.has_returns())
        throw std::invalid_argument("is_weight_clustered: returns not computed");
    if (!(zeta > 0.0))
        throw std::invalid_argument("is_weight_clustered: zeta must be > 0");
    const std::vector<double>& g = *dataset.returns;
    const int n_distinct = static_cast<int>(index.distinct_states_.size());

    // Per distinct state: shifted mean of exp(G/zeta) over its cluster.
    std::vector<double> shift(n_distinct, -std::numeric_limits<double>::infinity());
    for (int i = 0; i < n_distinct; ++i)
        for (int nbr : index.neighbors_[i])
            for (int t : index.transitions_by_distinct_[index.state_to_distinct_[nbr]])
                shift[i] = std::max(shift[i], g[t] / zeta);
    std::vector<double> mean_exp(n_distinct, 0.0);
    for (int i = 0; i < n_distinct; ++i) {
        double total = 0.0;
        std::size_t count = 0;
        for (int nbr : index.neighbors_[i]) {
            const auto& ts =
                index.transitions_by_distinct_[index.state_to_distinct_[nbr]];
            for (int t : ts) total += std::exp(g[t] / zeta - shift[i]);
            count += ts.size();
        }
        mean_exp[i] = total / static_cast<double>(count);
    }

    std::vector<double> weights(dataset.transitions.size());
    for (std::size_t t = 0; t < dataset.transitions.size(); ++t) {
        const int i = index.state_to_distinct_[dataset.transitions[t].state];
        weights[t] = std::exp(g[t] / zeta - shift[i]) / mean_exp[i];
    }
    return weights;
}

Eigen::MatrixXd return_score_table(const OfflineDataset& dataset, double zeta) {
    if (!dataset.has_returns())
        throw std::invalid_argument("return_score_table: returns not computed");
    const std::vector<double>& g = *dataset.returns;
    Eigen::MatrixXd shift = Eigen::MatrixXd::Constant(
        dataset.n_states, dataset.n_actions,
        -std::numeric_limits<double>::infinity());
    for (std::size_t t = 0; t < dataset.transitions.size(); ++t) {
        const Transition& tr = dataset.transitions[t];
        shift(tr.state, tr.action) =
            std::max(shift(tr.state, tr.action), g[t] / zeta);
    }
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(dataset.n_states, dataset.n_actions);
    Eigen::MatrixXd count = Eigen::MatrixXd::Zero(dataset.n_states, dataset.n_actions);
    for (std::size_t t = 0; t < dataset.transitions.size(); ++t) {
        const Transition& tr = dataset.transitions[t];
        sum(tr.state, tr.action) +=
            std::exp(g[t] / zeta - shift(tr.state, tr.action));
        count(tr.state, tr.action) += 1.0;
    }
    Eigen::MatrixXd score = Eigen::MatrixXd::Constant(
        dataset.n_states, dataset.n_actions, std::numeric_limits<double>::quiet_NaN());
    for (int s = 0; s < dataset.n_states; ++s)
        for (int a = 0; a < dataset.n_actions; ++a)
            if (count(s, a) > 0.0)
                score(s, a) = shift(s, a) + std::log(sum(s, a) / count(s, a));
    return score;
}

} // namespace epq
