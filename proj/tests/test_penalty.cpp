#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "epq/errors.hpp"
#include "epq/penalty.hpp"
#include "epq/rng.hpp"

#include <cmath>

using namespace epq;

namespace {

BehaviorEstimate estimate_from_counts(std::vector<std::vector<std::int64_t>> rows) {
    const int S = static_cast<int>(rows.size());
    const int A = static_cast<int>(rows[0].size());
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts(S, A);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) counts(s, a) = rows[s][a];
    return BehaviorEstimate(std::move(counts));
}

TabularPolicy row_policy(std::vector<double> probs) {
    Eigen::MatrixXd m(1, static_cast<int>(probs.size()));
    for (std::size_t a = 0; a < probs.size(); ++a) m(0, a) = probs[a];
    return TabularPolicy(std::move(m));
}

Eigen::VectorXd random_simplex(Rng& rng, int n) {
    Eigen::VectorXd v(n);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        v[i] = rng.exponential();
        total += v[i];
    }
    v /= total;
    v[n - 1] += 1.0 - v.sum();
    return v;
}

} // namespace

TEST_CASE("adaptive_amount boundary, clipped branch, and closed form") {
    const double tau = -1.3;
    CHECK(adaptive_amount(tau, tau) == 1.0);
    CHECK(adaptive_amount(tau - 3.0, tau) == 1.0);
    CHECK(adaptive_amount(tau + 1.0, tau) ==
          doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(adaptive_amount(tau + 1.0, tau) == doctest::Approx(0.36787944117144233));
    CHECK_THROWS_AS(adaptive_amount(std::nan(""), tau), std::invalid_argument);
}

TEST_CASE("adaptive_amount is monotone in both arguments") {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        const double tau = rng.uniform(-6.0, 0.0);
        const double a = rng.uniform(-8.0, 0.0);
        const double b = rng.uniform(-8.0, 0.0);
        const double lo = std::min(a, b), hi = std::max(a, b);
        CHECK(adaptive_amount(hi, tau) <= adaptive_amount(lo, tau));
        CHECK(adaptive_amount(a, tau) <= adaptive_amount(a, tau + 0.5));
    }
}

TEST_CASE("adaptation_factor matches scalar oracles") {
    // beta_hat = (1/4, 3/4); tau = log(3/4) - 1 puts action 1 one unit above
    // the threshold and clips action 0 at 1.
    const BehaviorEstimate behavior = estimate_from_counts({{1, 3}});
    const double tau = std::log(0.75) - 1.0;
    const TabularPolicy uniform = row_policy({0.5, 0.5});
    CHECK(adaptation_factor(uniform, behavior, 0, tau) ==
          doctest::Approx((1.0 + std::exp(-1.0)) / 2.0).epsilon(1e-12));
    CHECK(adaptation_factor(uniform, behavior, 0, tau) ==
          doctest::Approx(0.6839397205857212));

    // Point mass two units above the threshold.
    const TabularPolicy point = row_policy({0.0, 1.0});
    CHECK(adaptation_factor(point, behavior, 0, std::log(0.75) - 2.0) ==
          doctest::Approx(std::exp(-2.0)).epsilon(1e-12));

    // Everything at or below the threshold keeps the full penalty.
    CHECK(adaptation_factor(uniform, behavior, 0, 0.0) == 1.0);
}

TEST_CASE("adaptation_factor names unsupported actions") {
    const BehaviorEstimate behavior = estimate_from_counts({{2, 0}});
    const TabularPolicy pi = row_policy({0.5, 0.5});
    CHECK_THROWS_WITH_AS(adaptation_factor(pi, behavior, 0, -1.0),
                         doctest::Contains("action 1"), support_error);
}

TEST_CASE("penalty_term identities") {
    const BehaviorEstimate behavior = estimate_from_counts({{1, 3}});
    const TabularPolicy matching = row_policy({0.25, 0.75});
    CHECK(penalty_term(matching, behavior, 0, 0) == doctest::Approx(0.0));
    CHECK(penalty_term(matching, behavior, 0, 1) == doctest::Approx(0.0));

    const TabularPolicy pi = row_policy({0.5, 0.5});
    CHECK(penalty_term(pi, behavior, 0, 0) == doctest::Approx(1.0));

    // Zero mean under beta_hat for any policy row.
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const int A = 2 + static_cast<int>(rng.uniform() * 5);
        std::vector<std::vector<std::int64_t>> counts(1, std::vector<std::int64_t>(A));
        for (int a = 0; a < A; ++a)
            counts[0][a] = 1 + static_cast<std::int64_t>(rng.uniform() * 20);
        const BehaviorEstimate b = estimate_from_counts(counts);
        Eigen::MatrixXd probs(1, A);
        probs.row(0) = random_simplex(rng, A).transpose();
        const TabularPolicy p(probs);
        double mean = 0.0;
        for (int a = 0; a < A; ++a) mean += b.prob(0, a) * penalty_term(p, b, 0, a);
        CHECK(std::abs(mean) < 1e-12);
    }
}

TEST_CASE("exclusive_penalty factorizes and vanishes when pi equals beta_hat") {
    const BehaviorEstimate behavior = estimate_from_counts({{1, 3}});
    const TabularPolicy pi = row_policy({0.5, 0.5});
    const double tau = std::log(0.75) - 1.0;
    for (int a = 0; a < 2; ++a)
        CHECK(exclusive_penalty(pi, behavior, 0, a, tau) ==
              doctest::Approx(adaptation_factor(pi, behavior, 0, tau) *
                              penalty_term(pi, behavior, 0, a)));

    // tau >= 0 forces the factor to 1: the per-pair CQL penalty exactly.
    for (int a = 0; a < 2; ++a)
        CHECK(exclusive_penalty(pi, behavior, 0, a, 0.0) ==
              doctest::Approx(penalty_term(pi, behavior, 0, a)));

    const TabularPolicy matching = row_policy({0.25, 0.75});
    for (int a = 0; a < 2; ++a)
        CHECK(exclusive_penalty(matching, behavior, 0, a, tau) ==
              doctest::Approx(0.0));
}

TEST_CASE("exclusive penalty never exceeds the raw penalty term") {
    Rng rng(23);
    for (int i = 0; i < 100000; ++i) {
        const int A = 2 + static_cast<int>(rng.uniform() * 4);
        std::vector<std::vector<std::int64_t>> counts(1, std::vector<std::int64_t>(A));
        for (int a = 0; a < A; ++a)
            counts[0][a] = 1 + static_cast<std::int64_t>(rng.uniform() * 30);
        const BehaviorEstimate b = estimate_from_counts(counts);
        Eigen::MatrixXd probs(1, A);
        probs.row(0) = random_simplex(rng, A).transpose();
        const TabularPolicy p(probs);
        const double tau = rng.uniform(-8.0, 0.5);
        const int a = static_cast<int>(rng.uniform() * A);
        CHECK(std::abs(exclusive_penalty(p, b, 0, a, tau)) <=
              std::abs(penalty_term(p, b, 0, a)) + 1e-15);
    }
}

TEST_CASE("average penalties: scalar oracle and paper identities") {
    const BehaviorEstimate behavior = estimate_from_counts({{1, 1}});
    const TabularPolicy pi = row_policy({0.9, 0.1});
    // (0.4^2 / 0.5) * 2 = 0.64
    CHECK(average_penalty_cql(pi, behavior, 0) == doctest::Approx(0.64).epsilon(1e-12));
    CHECK(average_penalty_epq(pi, behavior, 0, 0.0) == doctest::Approx(0.64));

    const double tau = std::log(0.5) - 0.7;
    CHECK(average_penalty_epq(pi, behavior, 0, tau) ==
          doctest::Approx(adaptation_factor(pi, behavior, 0, tau) *
                          average_penalty_cql(pi, behavior, 0)));

    const TabularPolicy matching = row_policy({0.5, 0.5});
    CHECK(average_penalty_epq(matching, behavior, 0, tau) == doctest::Approx(0.0));
    CHECK(average_penalty_cql(matching, behavior, 0) == doctest::Approx(0.0));
}

TEST_CASE("positivity and dominance over random simplex pairs") {
    Rng rng(31);
    for (int i = 0; i < 100000; ++i) {
        const int A = 2 + static_cast<int>(rng.uniform() * 4);
        std::vector<std::vector<std::int64_t>> counts(1, std::vector<std::int64_t>(A));
        for (int a = 0; a < A; ++a)
            counts[0][a] = 1 + static_cast<std::int64_t>(rng.uniform() * 40);
        const BehaviorEstimate b = estimate_from_counts(counts);
        Eigen::MatrixXd probs(1, A);
        probs.row(0) = random_simplex(rng, A).transpose();
        const TabularPolicy p(probs);
        const double tau = rng.uniform(-8.0, 0.5);
        const double epq = average_penalty_epq(p, b, 0, tau);
        const double cql = average_penalty_cql(p, b, 0);
        CHECK(epq >= -1e-12);
        CHECK(cql >= -1e-12);
        CHECK(epq <= cql + 1e-12);
    }
}

TEST_CASE("adaptation factor is monotone along the threshold grid") {
    const BehaviorEstimate behavior = estimate_from_counts({{5, 9, 2, 14}});
    const TabularPolicy pi = row_policy({0.1, 0.4, 0.25, 0.25});
    const double rho = -std::log(4.0);
    double previous = 2.0;
    for (double c : {0.2, 0.5, 1.0, 2.0, 5.0, 10.0}) {
        const double f = adaptation_factor(pi, behavior, 0, c * rho);
        CHECK(f <= previous + 1e-15);
        previous = f;
    }
}

TEST_CASE("prioritized_behavior symmetry, temperature limit, and oracle") {
    const BehaviorEstimate uniform = estimate_from_counts({{3, 3}});
    Eigen::VectorXd equal(2);
    equal << 0.7, 0.7;
    const Eigen::VectorXd same = prioritized_behavior(uniform, equal, 0, 1.0);
    CHECK(same[0] == doctest::Approx(0.5).epsilon(1e-15));

    Eigen::VectorXd scores(2);
    scores << std::log(2.0), 0.0;
    const Eigen::VectorXd row = prioritized_behavior(uniform, scores, 0, 1.0);
    CHECK(row[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(row[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    const Eigen::VectorXd cold = prioritized_behavior(uniform, scores, 0, 1e9);
    CHECK(std::abs(cold[0] - 0.5) < 1e-9);

    // Support never grows.
    const BehaviorEstimate partial = estimate_from_counts({{4, 0, 2}});
    Eigen::VectorXd s3(3);
    s3 << 1.0, 100.0, 0.0;
    const Eigen::VectorXd out = prioritized_behavior(partial, s3, 0, 1.0);
    CHECK(out[1] == 0.0);
    CHECK(out.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("is_weight_exact symmetry, oracle, and normalization") {
    const BehaviorEstimate uniform = estimate_from_counts({{5, 5}});
    QFunction q(1, 2);
    CHECK(is_weight_exact(uniform, q, 0, 0) == doctest::Approx(1.0));

    q.value(0, 0) = std::log(2.0);
    CHECK(is_weight_exact(uniform, q, 0, 0) == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(is_weight_exact(uniform, q, 0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    Rng rng(47);
    for (int i = 0; i < 500; ++i) {
        const int A = 2 + static_cast<int>(rng.uniform() * 5);
        std::vector<std::vector<std::int64_t>> counts(1, std::vector<std::int64_t>(A));
        for (int a = 0; a < A; ++a)
            counts[0][a] = 1 + static_cast<std::int64_t>(rng.uniform() * 10);
        const BehaviorEstimate b = estimate_from_counts(counts);
        QFunction scores(1, A);
        for (int a = 0; a < A; ++a) scores.value(0, a) = rng.uniform(-30.0, 30.0);
        double mean = 0.0;
        for (int a = 0; a < A; ++a)
            mean += b.prob(0, a) * is_weight_exact(b, scores, 0, a);
        CHECK(std::abs(mean - 1.0) < 1e-12);
    }
}

TEST_CASE("clip_weight floor, pass-through, monotone") {
    CHECK(clip_weight(0.0, 0.2) == 0.2);
    CHECK(clip_weight(1.5, 0.2) == 1.5);
    CHECK_THROWS_AS(clip_weight(-0.1, 0.2), std::invalid_argument);
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        const double w1 = rng.uniform(0.0, 5.0);
        const double w2 = rng.uniform(0.0, 5.0);
        const double lo = std::min(w1, w2), hi = std::max(w1, w2);
        CHECK(clip_weight(lo, 0.3) <= clip_weight(hi, 0.3));
    }
}

namespace {

OfflineDataset dataset_from_steps(int n_states, int n_actions, double gamma,
                                  std::vector<Transition> steps) {
    OfflineDataset d;
    d.n_states = n_states;
    d.n_actions = n_actions;
    d.gamma = gamma;
    d.transitions = std::move(steps);
    return d;
}

} // namespace

TEST_CASE("cluster radius limits: exact matches and the whole dataset") {
    const Mdp mdp = pendulum_mdp(7, 9, 5);
    const OfflineDataset data = generate_dataset(
        mdp, TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()), 30, 12, 8);

    const ClusterIndex tight = build_cluster_index(
        data, 1e-9, ClusterMetric::EuclideanCoords, mdp.state_coords());
    for (int s : tight.distinct_states()) {
        REQUIRE(tight.neighbor_states(s).size() == 1);
        CHECK(tight.neighbor_states(s)[0] == s);
    }

    const ClusterIndex loose = build_cluster_index(
        data, 1e9, ClusterMetric::EuclideanCoords, mdp.state_coords());
    for (int s : loose.distinct_states())
        CHECK(loose.neighbor_states(s).size() == loose.distinct_states().size());
}

TEST_CASE("cluster membership agrees with a brute-force pairwise scan") {
    const Mdp mdp = pendulum_mdp(7, 9, 5);
    const OfflineDataset data = generate_dataset(
        mdp, TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()), 40, 12, 21);
    const ClusterIndex index = build_cluster_index(
        data, 2.0, ClusterMetric::EuclideanCoords, mdp.state_coords());

    // Reference radius from first principles.
    std::vector<int> distinct = index.distinct_states();
    double nearest_sum = 0.0;
    for (int s : distinct) {
        double nearest = 1e300;
        for (int t : distinct) {
            if (t == s) continue;
            nearest = std::min(
                nearest,
                (mdp.state_coords().row(s) - mdp.state_coords().row(t)).norm());
        }
        nearest_sum += nearest;
    }
    const double radius = 2.0 * nearest_sum / distinct.size();
    CHECK(index.radius() == doctest::Approx(radius).epsilon(1e-12));

    for (std::size_t t = 0; t < data.size(); ++t) {
        std::vector<int> expected;
        for (std::size_t u = 0; u < data.size(); ++u) {
            const double d = (mdp.state_coords().row(data.transitions[t].state) -
                              mdp.state_coords().row(data.transitions[u].state))
                                 .norm();
            if (d <= radius) expected.push_back(static_cast<int>(u));
        }
        CHECK(index.members_of(data, static_cast<int>(t)) == expected);
    }
}

TEST_CASE("cluster construction rejects degenerate input") {
    OfflineDataset one = dataset_from_steps(
        2, 1, 0.9, {{0, 0, 0, 0, 1.0, 0, false}, {0, 1, 0, 0, 1.0, 0, false}});
    CHECK_THROWS_AS(
        build_cluster_index(one, 2.0, ClusterMetric::EuclideanCoords),
        std::invalid_argument);
    // Identical coordinates for every state.
    OfflineDataset two = dataset_from_steps(
        2, 1, 0.9, {{0, 0, 0, 0, 1.0, 1, false}, {0, 1, 1, 0, 1.0, 0, false}});
    Eigen::MatrixXd coords = Eigen::MatrixXd::Zero(2, 2);
    CHECK_THROWS_AS(
        build_cluster_index(two, 2.0, ClusterMetric::EuclideanCoords, coords),
        degenerate_geometry_error);
}

TEST_CASE("clustered weights: symmetry and singleton cases") {
    OfflineDataset data = dataset_from_steps(2, 2, 0.0,
                                             {{0, 0, 0, 0, 0.5, 0, false},
                                              {0, 1, 0, 1, 0.5, 0, false},
                                              {1, 0, 1, 0, -1.0, 1, false}});
    data = compute_returns(data);
    const ClusterIndex index =
        build_cluster_index(data, 2.0, ClusterMetric::ExactMatch);
    const std::vector<double> w = is_weight_clustered(data, index, 2.0);
    CHECK(w[0] == doctest::Approx(1.0)); // equal returns within the cluster
    CHECK(w[1] == doctest::Approx(1.0));
    CHECK(w[2] == doctest::Approx(1.0)); // singleton cluster
}

TEST_CASE("exact-match clustered weights equal exact IS weights") {
    // With zero discount the return of every transition is its immediate
    // reward, so the per-pair score table reproduces per-transition weights.
    const Mdp mdp = random_mdp(4, 3, 77, 0.0);
    OfflineDataset data = compute_returns(generate_dataset(
        mdp, TabularPolicy::uniform(4, 3), 50, 8, 5));
    const BehaviorEstimate behavior = estimate_behavior(data, 4, 3);
    const ClusterIndex index =
        build_cluster_index(data, 2.0, ClusterMetric::ExactMatch);
    const double zeta = 2.0;
    const std::vector<double> clustered = is_weight_clustered(data, index, zeta);
    const QFunction scores(return_score_table(data, zeta));
    for (std::size_t t = 0; t < data.size(); ++t) {
        const Transition& tr = data.transitions[t];
        const double exact = is_weight_exact(behavior, scores, tr.state, tr.action);
        CHECK(std::abs(clustered[t] - exact) < 1e-10);
    }
}

TEST_CASE("clustered weights have unit mean under the data at every state") {
    const Mdp mdp = random_mdp(5, 3, 91, 0.9);
    OfflineDataset data = compute_returns(generate_dataset(
        mdp, TabularPolicy::uniform(5, 3), 40, 10, 15));
    const ClusterIndex index =
        build_cluster_index(data, 2.0, ClusterMetric::ExactMatch);
    const std::vector<double> w = is_weight_clustered(data, index, 2.0);
    std::vector<double> sums(5, 0.0);
    std::vector<int> counts(5, 0);
    for (std::size_t t = 0; t < data.size(); ++t) {
        sums[data.transitions[t].state] += w[t];
        counts[data.transitions[t].state] += 1;
    }
    for (int s = 0; s < 5; ++s) {
        if (counts[s] == 0) continue;
        CHECK(std::abs(sums[s] / counts[s] - 1.0) < 1e-12);
    }
}

TEST_CASE("penalty config validation") {
    PenaltyConfig config;
    config.validate();
    CHECK(config.tau(4) == doctest::Approx(2.0 * -std::log(4.0)));
    config.c_min = 0.0;
    CHECK_THROWS_AS(config.validate(), std::invalid_argument);
    config.c_min = 0.2;
    config.alpha = -1.0;
    CHECK_THROWS_AS(config.validate(), std::invalid_argument);
    config.alpha = 1.0;
    config.zeta = 0.0;
    CHECK_THROWS_AS(config.validate(), std::invalid_argument);
}
