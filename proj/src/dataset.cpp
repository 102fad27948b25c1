#include "epq/dataset.hpp"

#include "epq/errors.hpp"
#include "epq/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace epq {

BehaviorEstimate::BehaviorEstimate(
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts)
    : counts_(std::move(counts)) {
    const int S = n_states();
    const int A = n_actions();
    state_counts_.assign(S, 0);
    probs_ = Eigen::MatrixXd::Zero(S, A);
    for (int s = 0; s < S; ++s) {
        std::int64_t total = 0;
        for (int a = 0; a < A; ++a) {
            if (counts_(s, a) < 0)
                throw std::invalid_argument("BehaviorEstimate: negative count");
            total += counts_(s, a);
        }
        state_counts_[s] = total;
        if (total > 0)
            for (int a = 0; a < A; ++a)
                probs_(s, a) = static_cast<double>(counts_(s, a)) /
                               static_cast<double>(total);
    }
}

double BehaviorEstimate::prob(int state, int action) const {
    if (!visited(state))
        throw support_error("behavior estimate undefined at unvisited state " +
                            std::to_string(state));
    if (!supported(state, action))
        throw support_error("action " + std::to_string(action) +
                            " unsupported at state " + std::to_string(state));
    return probs_(state, action);
}

double BehaviorEstimate::log_prob(int state, int action) const {
    return std::log(prob(state, action));
}

double BehaviorEstimate::prob_with_floor(int state, int action,
                                         double floor) const {
    if (!visited(state)) return floor;
    return std::max(probs_(state, action), floor);
}

Eigen::VectorXd BehaviorEstimate::row(int state) const {
    if (!visited(state))
        throw support_error("behavior estimate undefined at unvisited state " +
                            std::to_string(state));
    return probs_.row(state);
}

TabularPolicy BehaviorEstimate::restrict_policy(const TabularPolicy& policy) const {
    if (policy.n_states() != n_states() || policy.n_actions() != n_actions())
        throw std::invalid_argument("restrict_policy: shape mismatch");
    Eigen::MatrixXd out = policy.matrix();
    for (int s = 0; s < n_states(); ++s) {
        if (!visited(s)) continue;
        double kept = 0.0;
        for (int a = 0; a < n_actions(); ++a) {
            if (!supported(s, a)) out(s, a) = 0.0;
            kept += out(s, a);
        }
        if (kept <= 0.0) {
            // Policy had no mass on the data support; fall back to beta_hat.
            out.row(s) = probs_.row(s);
        } else {
            out.row(s) /= kept;
            int top = 0;
            out.row(s).maxCoeff(&top);
            out(s, top) += 1.0 - out.row(s).sum();
        }
    }
    return TabularPolicy(std::move(out));
}

std::vector<int> BehaviorEstimate::visited_states() const {
    std::vector<int> out;
    for (int s = 0; s < n_states(); ++s)
        if (visited(s)) out.push_back(s);
    return out;
}

OfflineDataset generate_dataset(const Mdp& mdp, const TabularPolicy& behavior,
                                int n_episodes, int horizon, std::uint64_t seed) {
    if (n_episodes < 1)
        throw std::invalid_argument("generate_dataset: n_episodes must be >= 1");
    if (horizon < 1)
        throw std::invalid_argument("generate_dataset: horizon must be >= 1");
    if (behavior.n_states() != mdp.n_states() ||
        behavior.n_actions() != mdp.n_actions())
        throw std::invalid_argument("generate_dataset: behavior shape mismatch");

    Rng rng(seed);
    OfflineDataset out;
    out.n_states = mdp.n_states();
    out.n_actions = mdp.n_actions();
    out.gamma = mdp.discount();
    out.generator_seed = seed;
    out.transitions.reserve(static_cast<std::size_t>(n_episodes) * horizon);
    for (int ep = 0; ep < n_episodes; ++ep) {
        int state = rng.categorical(mdp.initial_state_dist());
        for (int t = 0; t < horizon; ++t) {
            const int action = rng.categorical(behavior.row(state));
            const int next = rng.categorical(mdp.transition_row(state, action));
            out.transitions.push_back(
                {ep, t, state, action, mdp.reward(state, action), next, false});
            state = next;
        }
    }
    return out;
}

OfflineDataset compute_returns(OfflineDataset dataset) {
    std::vector<double> g(dataset.transitions.size(), 0.0);
    // Transitions are stored episode-major in step order; walk backward.
    for (std::size_t i = dataset.transitions.size(); i-- > 0;) {
        const Transition& t = dataset.transitions[i];
        double tail = 0.0;
        if (i + 1 < dataset.transitions.size()) {
            const Transition& next = dataset.transitions[i + 1];
            if (next.episode == t.episode) tail = g[i + 1];
        }
        g[i] = t.reward + dataset.gamma * tail;
    }
    dataset.returns = std::move(g);
    return dataset;
}

BehaviorEstimate estimate_behavior(const OfflineDataset& dataset, int n_states,
                                   int n_actions) {
    if (dataset.transitions.empty())
        throw std::invalid_argument("estimate_behavior: dataset is empty");
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts =
        Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(n_states,
                                                                          n_actions);
    for (const Transition& t : dataset.transitions) {
        if (t.state < 0 || t.state >= n_states || t.action < 0 ||
            t.action >= n_actions)
            throw std::invalid_argument("estimate_behavior: index out of bounds");
        counts(t.state, t.action) += 1;
    }
    return BehaviorEstimate(std::move(counts));
}

void save_dataset(const OfflineDataset& dataset, const std::string& path) {
    std::string out;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", dataset.gamma);
    out += "epq-dataset-v1 " + std::to_string(dataset.n_states) + " " +
           std::to_string(dataset.n_actions) + " " + buf + " " +
           std::to_string(dataset.generator_seed) + " " +
           std::to_string(dataset.transitions.size()) + "\n";
    for (const Transition& t : dataset.transitions) {
        std::snprintf(buf, sizeof(buf), "%.17g", t.reward);
        out += std::to_string(t.episode) + " " + std::to_string(t.step) + " " +
               std::to_string(t.state) + " " + std::to_string(t.action) + " " +
               buf + " " + std::to_string(t.next_state) + " " +
               (t.terminal ? "1" : "0") + "\n";
    }
    std::ofstream file(path, std::ios::binary);
    if (!file)
        throw std::runtime_error("save_dataset: cannot open " + path);
    file << out;
}

OfflineDataset load_dataset(const std::string& path) {
    std::ifstream file(path);
    if (!file)
        throw std::runtime_error("load_dataset: cannot open " + path);
    std::string line;
    if (!std::getline(file, line))
        throw parse_error("load_dataset: empty file");
    std::istringstream header(line);
    std::string magic;
    OfflineDataset out;
    std::size_t expected = 0;
    header >> magic >> out.n_states >> out.n_actions >> out.gamma >>
        out.generator_seed >> expected;
    if (magic != "epq-dataset-v1")
        throw parse_error("load_dataset: unknown format version in header");
    if (header.fail())
        throw parse_error("load_dataset: bad header at line 1");

    out.transitions.reserve(expected);
    int line_no = 1;
    while (std::getline(file, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream in(line);
        Transition t{};
        int terminal = 0;
        in >> t.episode >> t.step >> t.state >> t.action >> t.reward >>
            t.next_state >> terminal;
        if (in.fail())
            throw parse_error("load_dataset: malformed record at line " +
                              std::to_string(line_no));
        t.terminal = terminal != 0;
        if (t.state < 0 || t.state >= out.n_states || t.action < 0 ||
            t.action >= out.n_actions || t.next_state < 0 ||
            t.next_state >= out.n_states)
            throw parse_error("load_dataset: index out of bounds at line " +
                              std::to_string(line_no));
        out.transitions.push_back(t);
    }
    if (out.transitions.size() != expected)
        throw parse_error("load_dataset: expected " + std::to_string(expected) +
                          " transitions, found " +
                          std::to_string(out.transitions.size()));
    return out;
}

} // namespace epq
