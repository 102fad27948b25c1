#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "epq/dataset.hpp"
#include "epq/errors.hpp"
#include "epq/mdp.hpp"

#include <filesystem>
#include <fstream>

using namespace epq;

namespace {

Mdp two_action_loop(double gamma) {
    Eigen::MatrixXd p(2, 1);
    p << 1.0, 1.0;
    Eigen::MatrixXd r(1, 2);
    r << 0.25, -0.5;
    Eigen::VectorXd init(1);
    init << 1.0;
    return Mdp(1, 2, p, r, gamma, init, 0.5);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("generate_dataset rejects an empty request") {
    const Mdp mdp = two_action_loop(0.9);
    const TabularPolicy b = TabularPolicy::uniform(1, 2);
    CHECK_THROWS_AS(generate_dataset(mdp, b, 0, 5, 1), std::invalid_argument);
    CHECK_THROWS_AS(generate_dataset(mdp, b, 5, 0, 1), std::invalid_argument);
}

TEST_CASE("deterministic pieces give identical episodes") {
    const Mdp mdp = two_action_loop(0.9);
    const TabularPolicy b = TabularPolicy::point_mass(1, 2, 1);
    const OfflineDataset data = generate_dataset(mdp, b, 4, 6, 77);
    for (const Transition& t : data.transitions) {
        CHECK(t.state == 0);
        CHECK(t.action == 1);
        CHECK(t.reward == doctest::Approx(-0.5));
    }
}

TEST_CASE("episode bookkeeping is consistent") {
    const Mdp mdp = random_mdp(5, 3, 31);
    const TabularPolicy b = TabularPolicy::uniform(5, 3);
    const OfflineDataset data = generate_dataset(mdp, b, 20, 15, 5);
    REQUIRE(data.size() == 300);
    for (std::size_t i = 0; i + 1 < data.size(); ++i) {
        const Transition& t = data.transitions[i];
        const Transition& next = data.transitions[i + 1];
        if (t.episode == next.episode) {
            CHECK(next.step == t.step + 1);
            CHECK(next.state == t.next_state);
        } else {
            CHECK(next.episode == t.episode + 1);
            CHECK(next.step == 0);
        }
    }
}

TEST_CASE("uniform behavior estimates close to uniform") {
    const Mdp mdp = two_action_loop(0.9);
    const TabularPolicy b = TabularPolicy::uniform(1, 2);
    const OfflineDataset data = generate_dataset(mdp, b, 10, 1000, 13);
    const BehaviorEstimate est = estimate_behavior(data, 1, 2);
    CHECK(std::abs(est.prob(0, 0) - 0.5) < 0.02);
}

TEST_CASE("compute_returns zero rewards and two-step recursion") {
    OfflineDataset zero;
    zero.n_states = 1;
    zero.n_actions = 1;
    zero.gamma = 0.9;
    zero.transitions = {{0, 0, 0, 0, 0.0, 0, false}, {0, 1, 0, 0, 0.0, 0, false}};
    const OfflineDataset with = compute_returns(zero);
    CHECK((*with.returns)[0] == 0.0);
    CHECK((*with.returns)[1] == 0.0);

    OfflineDataset pair;
    pair.n_states = 1;
    pair.n_actions = 1;
    pair.gamma = 0.5;
    pair.transitions = {{0, 0, 0, 0, 1.0, 0, false}, {0, 1, 0, 0, 1.0, 0, false}};
    const OfflineDataset out = compute_returns(pair);
    CHECK((*out.returns)[0] == doctest::Approx(1.5));
    CHECK((*out.returns)[1] == doctest::Approx(1.0));
}

TEST_CASE("compute_returns satisfies the recursion at every interior step") {
    const Mdp mdp = random_mdp(6, 3, 41, 0.85);
    const TabularPolicy b = TabularPolicy::uniform(6, 3);
    const OfflineDataset data =
        compute_returns(generate_dataset(mdp, b, 30, 12, 19));
    const std::vector<double>& g = *data.returns;
    for (std::size_t i = 0; i + 1 < data.size(); ++i) {
        const Transition& t = data.transitions[i];
        const Transition& next = data.transitions[i + 1];
        if (t.episode != next.episode) continue;
        CHECK(g[i] ==
              doctest::Approx(t.reward + data.gamma * g[i + 1]).epsilon(1e-10));
    }
    // Idempotent.
    const OfflineDataset again = compute_returns(data);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK((*again.returns)[i] == g[i]);
}

TEST_CASE("estimate_behavior single transition and exact ratios") {
    OfflineDataset data;
    data.n_states = 2;
    data.n_actions = 2;
    data.gamma = 0.9;
    data.transitions = {{0, 0, 0, 1, 0.0, 0, false}};
    const BehaviorEstimate single = estimate_behavior(data, 2, 2);
    CHECK(single.prob(0, 1) == 1.0);
    CHECK(single.supported(0, 1));
    CHECK_FALSE(single.supported(0, 0));
    CHECK_FALSE(single.visited(1));

    data.transitions = {{0, 0, 0, 0, 0.0, 0, false},
                        {0, 1, 0, 0, 0.0, 0, false},
                        {0, 2, 0, 0, 0.0, 0, false},
                        {0, 3, 0, 1, 0.0, 0, false}};
    const BehaviorEstimate est = estimate_behavior(data, 2, 2);
    CHECK(est.prob(0, 0) == 0.75);
    CHECK(est.prob(0, 1) == 0.25);
    CHECK(est.row(0).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("estimate rows converge at the root-N rate") {
    const Mdp mdp = two_action_loop(0.9);
    const TabularPolicy b = TabularPolicy::uniform(1, 2);
    auto deviation = [&](int steps, std::uint64_t seed) {
        const OfflineDataset data = generate_dataset(mdp, b, 1, steps, seed);
        const BehaviorEstimate est = estimate_behavior(data, 1, 2);
        return std::abs(est.prob(0, 0) - 0.5);
    };
    // Average a few seeds so the comparison tracks the rate, not one draw.
    double small = 0.0, large = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        small += deviation(100, 100 + s);
        large += deviation(10000, 200 + s);
    }
    CHECK(large < small / 2.0);
}

TEST_CASE("support errors and floor behavior") {
    OfflineDataset data;
    data.n_states = 2;
    data.n_actions = 2;
    data.gamma = 0.9;
    data.transitions = {{0, 0, 0, 0, 0.0, 0, false}};
    const BehaviorEstimate est = estimate_behavior(data, 2, 2);
    CHECK_THROWS_AS(est.prob(1, 0), support_error);
    CHECK_THROWS_AS(est.prob(0, 1), support_error);
    CHECK_THROWS_AS(est.row(1), support_error);
    CHECK(est.prob_with_floor(1, 0, 1e-6) == 1e-6);
    CHECK(est.prob_with_floor(0, 1, 1e-6) == 1e-6);
    CHECK(est.prob_with_floor(0, 0, 1e-6) == 1.0);
}

TEST_CASE("restrict_policy renormalizes onto the data support") {
    OfflineDataset data;
    data.n_states = 2;
    data.n_actions = 3;
    data.gamma = 0.9;
    data.transitions = {{0, 0, 0, 0, 0.0, 0, false}, {0, 1, 0, 2, 0.0, 0, false}};
    const BehaviorEstimate est = estimate_behavior(data, 2, 3);
    const TabularPolicy restricted =
        est.restrict_policy(TabularPolicy::uniform(2, 3));
    CHECK(restricted.prob(0, 0) == doctest::Approx(0.5));
    CHECK(restricted.prob(0, 1) == 0.0);
    CHECK(restricted.prob(0, 2) == doctest::Approx(0.5));
    // Unvisited states keep their original row.
    CHECK(restricted.prob(1, 1) == doctest::Approx(1.0 / 3));
}

TEST_CASE("dataset serialization round trip") {
    const Mdp mdp = random_mdp(4, 3, 29);
    const TabularPolicy b = TabularPolicy::uniform(4, 3);
    const OfflineDataset data = generate_dataset(mdp, b, 7, 9, 63);
    const std::string path = temp_path("epq_dataset_roundtrip.txt");
    save_dataset(data, path);
    const OfflineDataset loaded = load_dataset(path);
    REQUIRE(loaded.size() == data.size());
    CHECK(loaded.n_states == data.n_states);
    CHECK(loaded.n_actions == data.n_actions);
    CHECK(loaded.gamma == data.gamma);
    CHECK(loaded.generator_seed == data.generator_seed);
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(loaded.transitions[i].episode == data.transitions[i].episode);
        CHECK(loaded.transitions[i].step == data.transitions[i].step);
        CHECK(loaded.transitions[i].state == data.transitions[i].state);
        CHECK(loaded.transitions[i].action == data.transitions[i].action);
        CHECK(loaded.transitions[i].reward == data.transitions[i].reward);
        CHECK(loaded.transitions[i].next_state == data.transitions[i].next_state);
    }
    std::filesystem::remove(path);
}

TEST_CASE("truncated and malformed files are rejected whole") {
    const Mdp mdp = random_mdp(3, 2, 17);
    const OfflineDataset data =
        generate_dataset(mdp, TabularPolicy::uniform(3, 2), 3, 4, 3);
    const std::string path = temp_path("epq_dataset_truncated.txt");
    save_dataset(data, path);

    // Drop the last line; the header count no longer matches.
    std::ifstream in(path);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    in.close();
    const auto cut = all.rfind('\n', all.size() - 2);
    std::ofstream out(path, std::ios::binary);
    out << all.substr(0, cut + 1);
    out.close();
    CHECK_THROWS_AS(load_dataset(path), parse_error);

    std::ofstream bad(path, std::ios::binary);
    bad << "epq-dataset-v1 3 2 0.9 3 1\n";
    bad << "0 0 nonsense 1 0.5 2 0\n";
    bad.close();
    CHECK_THROWS_AS(load_dataset(path), parse_error);
    std::filesystem::remove(path);
}
