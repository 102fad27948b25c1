#include "epq/experiment.hpp"

#include "epq/errors.hpp"
#include "epq/penalty.hpp"
#include "epq/rng.hpp"

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace epq {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string format_list(const std::vector<double>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i > 0) out += " ";
        out += format_double(values[i]);
    }
    return out;
}

/// Raw `[section] key = value` storage with strict consumption tracking.
class ConfigMap {
  public:
    static ConfigMap parse(std::istream& in) {
        ConfigMap map;
        std::string line;
        std::string section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto comment = line.find('#');
            if (comment != std::string::npos) line = line.substr(0, comment);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw parse_error("config: bad section header at line " +
                                      std::to_string(line_no));
                section = trim(line.substr(1, line.size() - 2));
                map.sections_[section];
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos || section.empty())
                throw parse_error("config: expected key = value at line " +
                                  std::to_string(line_no));
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw parse_error("config: empty key at line " +
                                  std::to_string(line_no));
            map.sections_[section][key] = value;
        }
        return map;
    }

    bool has(const std::string& section, const std::string& key) const {
        const auto s = sections_.find(section);
        return s != sections_.end() && s->second.count(key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
        consumed_.insert(section + "." + key);
        if (!has(section, key)) return fallback;
        return sections_.at(section).at(key);
    }

    double get_double(const std::string& section, const std::string& key,
                      double fallback) const {
        const std::string raw = get_string(section, key, "");
        if (raw.empty()) return fallback;
        std::size_t pos = 0;
        const double v = std::stod(raw, &pos);
        if (pos != raw.size())
            throw std::invalid_argument("config: bad number for " + section + "." +
                                        key);
        return v;
    }

    int get_int(const std::string& section, const std::string& key,
                int fallback) const {
        const std::string raw = get_string(section, key, "");
        if (raw.empty()) return fallback;
        return static_cast<int>(std::stoll(raw));
    }

    std::uint64_t get_seed(const std::string& section, const std::string& key,
                           std::uint64_t fallback) const {
        const std::string raw = get_string(section, key, "");
        if (raw.empty()) return fallback;
        return static_cast<std::uint64_t>(std::stoull(raw));
    }

    bool get_bool(const std::string& section, const std::string& key,
                  bool fallback) const {
        const std::string raw = get_string(section, key, "");
        if (raw.empty()) return fallback;
        if (raw == "true" || raw == "1") return true;
        if (raw == "false" || raw == "0") return false;
        throw std::invalid_argument("config: bad boolean for " + section + "." + key);
    }

    std::vector<double> get_list(const std::string& section, const std::string& key,
                                 const std::vector<double>& fallback) const {
        const std::string raw = get_string(section, key, "");
        if (raw.empty()) return fallback;
        std::vector<double> out;
        std::istringstream in(raw);
        double v;
        while (in >> v) out.push_back(v);
        if (!in.eof())
            throw std::invalid_argument("config: bad list for " + section + "." + key);
        return out;
    }

    void check_all_consumed() const {
        for (const auto& [section, keys] : sections_)
            for (const auto& [key, value] : keys)
                if (consumed_.count(section + "." + key) == 0)
                    throw std::invalid_argument("config: unknown key " + section +
                                                "." + key);
    }

  private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
    mutable std::set<std::string> consumed_;
};

Mode parse_mode(const std::string& name) {
    if (name == "epq-exact") return Mode::EpqExact;
    if (name == "epq-sampled") return Mode::EpqSampled;
    if (name == "cql-exact") return Mode::CqlExact;
    if (name == "cql-sampled") return Mode::CqlSampled;
    throw std::invalid_argument("config: unknown learner mode " + name);
}

PolicyUpdate parse_policy_update(const std::string& name) {
    if (name == "improve") return PolicyUpdate::Improve;
    if (name == "fixed-behavior") return PolicyUpdate::FixedBehavior;
    if (name == "fixed-given") return PolicyUpdate::FixedGiven;
    throw std::invalid_argument("config: unknown policy_update " + name);
}

std::string policy_update_name(PolicyUpdate u) {
    switch (u) {
        case PolicyUpdate::Improve: return "improve";
        case PolicyUpdate::FixedBehavior: return "fixed-behavior";
        case PolicyUpdate::FixedGiven: return "fixed-given";
    }
    return "improve";
}

PenaltyBracket parse_bracket(const std::string& name) {
    if (name == "log-sum-exp") return PenaltyBracket::LogSumExp;
    if (name == "policy-expectation") return PenaltyBracket::PolicyExpectation;
    throw std::invalid_argument("config: unknown bracket " + name);
}

std::string bracket_name(PenaltyBracket b) {
    return b == PenaltyBracket::LogSumExp ? "log-sum-exp" : "policy-expectation";
}

ExperimentConfig from_map(const ConfigMap& map) {
    ExperimentConfig cfg;
    cfg.env.kind = map.get_string("env", "kind", cfg.env.kind);
    cfg.env.n_states = map.get_int("env", "n_states", cfg.env.n_states);
    cfg.env.n_actions = map.get_int("env", "n_actions", cfg.env.n_actions);
    cfg.env.seed = map.get_seed("env", "seed", cfg.env.seed);
    cfg.env.discount = map.get_double("env", "discount", cfg.env.discount);
    cfg.env.angle_bins = map.get_int("env", "angle_bins", cfg.env.angle_bins);
    cfg.env.velocity_bins =
        map.get_int("env", "velocity_bins", cfg.env.velocity_bins);
    cfg.env.action_bins = map.get_int("env", "action_bins", cfg.env.action_bins);
    cfg.env.path = map.get_string("env", "path", cfg.env.path);

    cfg.behavior.kind = map.get_string("behavior", "kind", cfg.behavior.kind);
    cfg.behavior.weights = map.get_list("behavior", "weights", cfg.behavior.weights);
    cfg.behavior.seed = map.get_seed("behavior", "seed", cfg.behavior.seed);

    cfg.policy.kind = map.get_string("policy", "kind", cfg.policy.kind);
    cfg.policy.weights = map.get_list("policy", "weights", cfg.policy.weights);
    cfg.policy.seed = map.get_seed("policy", "seed", cfg.policy.seed);

    cfg.data.episodes = map.get_int("data", "episodes", cfg.data.episodes);
    cfg.data.horizon = map.get_int("data", "horizon", cfg.data.horizon);
    cfg.data.seed = map.get_seed("data", "seed", cfg.data.seed);

    cfg.learner.mode = parse_mode(
        map.get_string("learner", "mode", mode_name(cfg.learner.mode)));
    cfg.learner.q_step_size =
        map.get_double("learner", "q_step_size", cfg.learner.q_step_size);
    cfg.learner.policy_temperature = map.get_double(
        "learner", "policy_temperature", cfg.learner.policy_temperature);
    cfg.learner.ema_rate = map.get_double("learner", "ema_rate", cfg.learner.ema_rate);
    cfg.learner.batch_size = map.get_int("learner", "batch_size", cfg.learner.batch_size);
    cfg.learner.n_action_samples =
        map.get_int("learner", "n_action_samples", cfg.learner.n_action_samples);
    cfg.learner.max_gradient_steps =
        map.get_int("learner", "max_gradient_steps", cfg.learner.max_gradient_steps);
    cfg.learner.convergence_tol =
        map.get_double("learner", "convergence_tol", cfg.learner.convergence_tol);
    cfg.learner.seed = map.get_seed("learner", "seed", cfg.learner.seed);
    cfg.learner.policy_update = parse_policy_update(map.get_string(
        "learner", "policy_update", policy_update_name(cfg.learner.policy_update)));
    cfg.learner.bracket = parse_bracket(
        map.get_string("learner", "bracket", bracket_name(cfg.learner.bracket)));
    cfg.learner.policy_period =
        map.get_int("learner", "policy_period", cfg.learner.policy_period);

    cfg.learner.penalty.alpha =
        map.get_double("penalty", "alpha", cfg.learner.penalty.alpha);
    cfg.learner.penalty.tau_over_rho =
        map.get_double("penalty", "tau_over_rho", cfg.learner.penalty.tau_over_rho);
    cfg.learner.penalty.c_min =
        map.get_double("penalty", "c_min", cfg.learner.penalty.c_min);
    cfg.learner.penalty.epsilon_radius =
        map.get_double("penalty", "epsilon", cfg.learner.penalty.epsilon_radius);
    cfg.learner.penalty.zeta =
        map.get_double("penalty", "zeta", cfg.learner.penalty.zeta);
    cfg.learner.penalty.use_pd =
        map.get_bool("penalty", "use_pd", cfg.learner.penalty.use_pd);

    cfg.sweep.alpha = map.get_list("sweep", "alpha", cfg.sweep.alpha);
    cfg.sweep.tau_over_rho =
        map.get_list("sweep", "tau_over_rho", cfg.sweep.tau_over_rho);
    cfg.sweep.c_min = map.get_list("sweep", "c_min", cfg.sweep.c_min);
    cfg.sweep.epsilon = map.get_list("sweep", "epsilon", cfg.sweep.epsilon);
    cfg.sweep.zeta = map.get_list("sweep", "zeta", cfg.sweep.zeta);

    cfg.scenario.alpha_ab = map.get_list("scenario", "alpha", cfg.scenario.alpha_ab);
    cfg.scenario.alpha_c =
        map.get_list("scenario", "alpha_case_c", cfg.scenario.alpha_c);
    cfg.scenario.tau_over_rho =
        map.get_double("scenario", "tau_over_rho", cfg.scenario.tau_over_rho);
    cfg.scenario.seed = map.get_seed("scenario", "seed", cfg.scenario.seed);
    cfg.scenario.settings.n_angle_bins =
        map.get_int("scenario", "angle_bins", cfg.scenario.settings.n_angle_bins);
    cfg.scenario.settings.n_velocity_bins = map.get_int(
        "scenario", "velocity_bins", cfg.scenario.settings.n_velocity_bins);
    cfg.scenario.settings.n_action_bins = map.get_int(
        "scenario", "action_bins", cfg.scenario.settings.n_action_bins);
    cfg.scenario.settings.discount =
        map.get_double("scenario", "discount", cfg.scenario.settings.discount);
    cfg.scenario.settings.n_episodes =
        map.get_int("scenario", "episodes", cfg.scenario.settings.n_episodes);
    cfg.scenario.settings.horizon =
        map.get_int("scenario", "horizon", cfg.scenario.settings.horizon);
    cfg.scenario.settings.mc_rollouts =
        map.get_int("scenario", "mc_rollouts", cfg.scenario.settings.mc_rollouts);
    cfg.scenario.settings.mc_horizon =
        map.get_int("scenario", "mc_horizon", cfg.scenario.settings.mc_horizon);
    cfg.scenario.settings.max_sweeps =
        map.get_int("scenario", "max_sweeps", cfg.scenario.settings.max_sweeps);

    cfg.certify.xi = map.get_double("certify", "xi", cfg.certify.xi);

    cfg.output_dir = map.get_string("output", "dir", cfg.output_dir);
    cfg.global_seed = map.get_seed("output", "seed", cfg.global_seed);

    map.check_all_consumed();
    cfg.learner.validate();
    return cfg;
}

std::uint64_t mix_seed(std::uint64_t section_seed, std::uint64_t global_seed) {
    return section_seed ^ (global_seed * 0x9e3779b97f4a7c15ULL);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error("cannot open " + path);
    file << text;
}

void write_config_echo(const ExperimentConfig& config) {
    write_text(config.output_dir + "/config_echo.txt", echo_config(config));
}

} // namespace

ExperimentConfig parse_experiment_config(const std::string& path) {
    std::ifstream file(path);
    if (!file)
        throw std::invalid_argument("config: cannot open " + path);
    return from_map(ConfigMap::parse(file));
}

ExperimentConfig parse_experiment_config_text(const std::string& text) {
    std::istringstream in(text);
    return from_map(ConfigMap::parse(in));
}

std::string echo_config(const ExperimentConfig& c) {
    std::ostringstream out;
    out << "env.kind = " << c.env.kind << "\n";
    out << "env.n_states = " << c.env.n_states << "\n";
    out << "env.n_actions = " << c.env.n_actions << "\n";
    out << "env.seed = " << c.env.seed << "\n";
    out << "env.discount = " << format_double(c.env.discount) << "\n";
    out << "env.angle_bins = " << c.env.angle_bins << "\n";
    out << "env.velocity_bins = " << c.env.velocity_bins << "\n";
    out << "env.action_bins = " << c.env.action_bins << "\n";
    out << "env.path = " << c.env.path << "\n";
    out << "behavior.kind = " << c.behavior.kind << "\n";
    out << "behavior.weights = " << format_list(c.behavior.weights) << "\n";
    out << "behavior.seed = " << c.behavior.seed << "\n";
    out << "policy.kind = " << c.policy.kind << "\n";
    out << "policy.weights = " << format_list(c.policy.weights) << "\n";
    out << "policy.seed = " << c.policy.seed << "\n";
    out << "data.episodes = " << c.data.episodes << "\n";
    out << "data.horizon = " << c.data.horizon << "\n";
    out << "data.seed = " << c.data.seed << "\n";
    out << "learner.mode = " << mode_name(c.learner.mode) << "\n";
    out << "learner.q_step_size = " << format_double(c.learner.q_step_size) << "\n";
    out << "learner.policy_temperature = "
        << format_double(c.learner.policy_temperature) << "\n";
    out << "learner.ema_rate = " << format_double(c.learner.ema_rate) << "\n";
    out << "learner.batch_size = " << c.learner.batch_size << "\n";
    out << "learner.n_action_samples = " << c.learner.n_action_samples << "\n";
    out << "learner.max_gradient_steps = " << c.learner.max_gradient_steps << "\n";
    out << "learner.convergence_tol = " << format_double(c.learner.convergence_tol)
        << "\n";
    out << "learner.seed = " << c.learner.seed << "\n";
    out << "learner.policy_update = " << policy_update_name(c.learner.policy_update)
        << "\n";
    out << "learner.bracket = " << bracket_name(c.learner.bracket) << "\n";
    out << "learner.policy_period = " << c.learner.policy_period << "\n";
    out << "penalty.alpha = " << format_double(c.learner.penalty.alpha) << "\n";
    out << "penalty.tau_over_rho = " << format_double(c.learner.penalty.tau_over_rho)
        << "\n";
    out << "penalty.c_min = " << format_double(c.learner.penalty.c_min) << "\n";
    out << "penalty.epsilon = " << format_double(c.learner.penalty.epsilon_radius)
        << "\n";
    out << "penalty.zeta = " << format_double(c.learner.penalty.zeta) << "\n";
    out << "penalty.use_pd = " << (c.learner.penalty.use_pd ? "true" : "false")
        << "\n";
    out << "sweep.alpha = " << format_list(c.sweep.alpha) << "\n";
    out << "sweep.tau_over_rho = " << format_list(c.sweep.tau_over_rho) << "\n";
    out << "sweep.c_min = " << format_list(c.sweep.c_min) << "\n";
    out << "sweep.epsilon = " << format_list(c.sweep.epsilon) << "\n";
    out << "sweep.zeta = " << format_list(c.sweep.zeta) << "\n";
    out << "scenario.alpha = " << format_list(c.scenario.alpha_ab) << "\n";
    out << "scenario.alpha_case_c = " << format_list(c.scenario.alpha_c) << "\n";
    out << "scenario.tau_over_rho = " << format_double(c.scenario.tau_over_rho)
        << "\n";
    out << "scenario.seed = " << c.scenario.seed << "\n";
    out << "scenario.angle_bins = " << c.scenario.settings.n_angle_bins << "\n";
    out << "scenario.velocity_bins = " << c.scenario.settings.n_velocity_bins << "\n";
    out << "scenario.action_bins = " << c.scenario.settings.n_action_bins << "\n";
    out << "scenario.discount = " << format_double(c.scenario.settings.discount)
        << "\n";
    out << "scenario.episodes = " << c.scenario.settings.n_episodes << "\n";
    out << "scenario.horizon = " << c.scenario.settings.horizon << "\n";
    out << "scenario.mc_rollouts = " << c.scenario.settings.mc_rollouts << "\n";
    out << "scenario.mc_horizon = " << c.scenario.settings.mc_horizon << "\n";
    out << "scenario.max_sweeps = " << c.scenario.settings.max_sweeps << "\n";
    out << "certify.xi = " << format_double(c.certify.xi) << "\n";
    out << "output.dir = " << c.output_dir << "\n";
    out << "output.seed = " << c.global_seed << "\n";
    return out.str();
}

Mdp build_environment(const EnvSpec& env) {
    if (env.kind == "random")
        return random_mdp(env.n_states, env.n_actions, env.seed, env.discount);
    if (env.kind == "pendulum")
        return pendulum_mdp(env.angle_bins, env.velocity_bins, env.action_bins,
                            env.discount);
    if (env.kind == "file") {
        if (env.path.empty())
            throw std::invalid_argument("config: env.path required for kind=file");
        return load_mdp(env.path);
    }
    throw std::invalid_argument("config: unknown env kind " + env.kind);
}

namespace {

TabularPolicy policy_from_spec(const std::string& kind,
                               const std::vector<double>& weights,
                               std::uint64_t seed, int n_states, int n_actions) {
    if (kind == "uniform") return TabularPolicy::uniform(n_states, n_actions);
    if (kind == "weights") {
        if (static_cast<int>(weights.size()) != n_actions)
            throw std::invalid_argument(
                "config: weights must list one value per action");
        Eigen::VectorXd row(n_actions);
        for (int a = 0; a < n_actions; ++a) {
            if (weights[a] < 0.0)
                throw std::invalid_argument("config: negative action weight");
            row[a] = weights[a];
        }
        row /= row.sum();
        row[n_actions - 1] += 1.0 - row.sum();
        Eigen::MatrixXd probs(n_states, n_actions);
        probs.rowwise() = row.transpose();
        return TabularPolicy(std::move(probs));
    }
    if (kind == "random") {
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
    throw std::invalid_argument("config: unknown policy kind " + kind);
}

} // namespace

TabularPolicy build_behavior_policy(const BehaviorSpec& spec, int n_states,
                                    int n_actions) {
    return policy_from_spec(spec.kind, spec.weights, spec.seed, n_states, n_actions);
}

TabularPolicy build_policy(const PolicySpec& spec, int n_states, int n_actions) {
    if (spec.kind == "behavior")
        throw std::invalid_argument(
            "config: policy kind 'behavior' resolves inside the learner");
    return policy_from_spec(spec.kind, spec.weights, spec.seed, n_states, n_actions);
}

std::string dataset_path(const ExperimentConfig& config) {
    return config.output_dir + "/dataset.txt";
}

std::string mdp_path(const ExperimentConfig& config) {
    return config.output_dir + "/mdp.txt";
}

std::string agent_path(const ExperimentConfig& config) {
    return config.output_dir + "/agent.txt";
}

void save_agent(const TrainedAgent& agent, const std::string& path) {
    std::string out;
    const int S = agent.q.n_states();
    const int A = agent.q.n_actions();
    std::string status = "budget";
    if (agent.status == RunStatus::Converged) status = "converged";
    if (agent.status == RunStatus::Diverged) status = "diverged";
    out += "epq-agent-v1 " + std::to_string(S) + " " + std::to_string(A) + " " +
           std::to_string(agent.probe_state) + " " + status + "\n";
    for (int s = 0; s < S; ++s) {
        out += "Q " + std::to_string(s);
        for (int a = 0; a < A; ++a) out += " " + format_double(agent.q.value(s, a));
        out += "\n";
    }
    for (int s = 0; s < S; ++s) {
        out += "P " + std::to_string(s);
        for (int a = 0; a < A; ++a)
            out += " " + format_double(agent.policy.prob(s, a));
        out += "\n";
    }
    write_text(path, out);
}

TrainedAgent load_agent(const std::string& path) {
    std::ifstream file(path);
    if (!file) throw std::runtime_error("load_agent: cannot open " + path);
    std::string line;
    if (!std::getline(file, line)) throw parse_error("load_agent: empty file");
    std::istringstream header(line);
    std::string magic, status;
    int S = 0, A = 0, probe = 0;
    header >> magic >> S >> A >> probe >> status;
    if (magic != "epq-agent-v1" || header.fail())
        throw parse_error("load_agent: bad header");
    Eigen::MatrixXd q(S, A);
    Eigen::MatrixXd p(S, A);
    for (int s = 0; s < S; ++s) {
        if (!std::getline(file, line)) throw parse_error("load_agent: truncated");
        std::istringstream in(line);
        std::string tag;
        int rs;
        in >> tag >> rs;
        for (int a = 0; a < A; ++a)
            if (!(in >> q(s, a))) throw parse_error("load_agent: bad Q row");
    }
    for (int s = 0; s < S; ++s) {
        if (!std::getline(file, line)) throw parse_error("load_agent: truncated");
        std::istringstream in(line);
        std::string tag;
        int rs;
        in >> tag >> rs;
        for (int a = 0; a < A; ++a)
            if (!(in >> p(s, a))) throw parse_error("load_agent: bad policy row");
    }
    TrainedAgent agent{QFunction(std::move(q)), QFunction(S, A),
                       TabularPolicy(std::move(p)), {},
                       RunStatus::BudgetExhausted, "loaded from " + path, probe};
    if (status == "converged") agent.status = RunStatus::Converged;
    if (status == "diverged") agent.status = RunStatus::Diverged;
    agent.target_q = agent.q;
    return agent;
}

int run_gen_data(const ExperimentConfig& config) {
    std::filesystem::create_directories(config.output_dir);
    const Mdp mdp = build_environment(config.env);
    const TabularPolicy behavior =
        build_behavior_policy(config.behavior, mdp.n_states(), mdp.n_actions());
    const OfflineDataset dataset =
        generate_dataset(mdp, behavior, config.data.episodes, config.data.horizon,
                         mix_seed(config.data.seed, config.global_seed));
    save_dataset(dataset, dataset_path(config));
    save_mdp(mdp, mdp_path(config));
    write_config_echo(config);

    const BehaviorEstimate estimate =
        estimate_behavior(dataset, mdp.n_states(), mdp.n_actions());
    std::int64_t covered = 0;
    for (int s = 0; s < mdp.n_states(); ++s)
        for (int a = 0; a < mdp.n_actions(); ++a)
            if (estimate.supported(s, a)) ++covered;
    const double coverage =
        static_cast<double>(covered) /
        (static_cast<double>(mdp.n_states()) * mdp.n_actions());
    std::cout << "episodes=" << config.data.episodes
              << " transitions=" << dataset.size()
              << " coverage=" << format_double(coverage) << "\n";
    return 0;
}

int run_train(const ExperimentConfig& config) {
    std::filesystem::create_directories(config.output_dir);
    const OfflineDataset dataset = load_dataset(dataset_path(config));

    LearnerConfig learner = config.learner;
    learner.seed = mix_seed(learner.seed, config.global_seed);

    std::optional<Mdp> model;
    if (mode_is_exact(learner.mode)) model = build_environment(config.env);

    std::optional<TabularPolicy> fixed;
    if (learner.policy_update == PolicyUpdate::FixedGiven)
        fixed = build_policy(config.policy, dataset.n_states, dataset.n_actions);

    const TrainedAgent agent =
        train(dataset, learner, model ? &*model : nullptr,
              fixed ? &*fixed : nullptr);
    save_agent(agent, agent_path(config));
    write_metrics_csv(agent.history, config.output_dir + "/metrics.csv");
    write_config_echo(config);
    std::cout << "status=" << agent.status_note << "\n";
    return agent.status == RunStatus::Diverged ? 3 : 0;
}

int run_bias(const ExperimentConfig& config) {
    std::filesystem::create_directories(config.output_dir);
    const TrainedAgent agent = load_agent(agent_path(config));
    const Mdp mdp = build_environment(config.env);
    const BiasReport report = measure_bias(
        agent, mdp, config.scenario.settings.mc_rollouts,
        mix_seed(config.scenario.seed, config.global_seed),
        config.scenario.settings.mc_horizon);

    std::string states_csv = "state,bias\n";
    for (int s = 0; s < mdp.n_states(); ++s)
        states_csv += std::to_string(s) + "," +
                      format_double(report.per_state_bias[s]) + "\n";
    write_text(config.output_dir + "/bias_states.csv", states_csv);

    std::string actions_csv = "action,bias\n";
    for (int a = 0; a < mdp.n_actions(); ++a)
        actions_csv += std::to_string(a) + "," +
                       format_double(report.per_action_bias_at_probe[a]) + "\n";
    write_text(config.output_dir + "/bias_actions.csv", actions_csv);

    std::string summary =
        "alpha,tau,mode,probe_state,bias,bias_mc,mc_stderr,squared_bias\n";
    summary += format_double(config.learner.penalty.alpha) + "," +
               format_double(config.learner.penalty.tau(mdp.n_actions())) + "," +
               mode_name(config.learner.mode) + "," +
               std::to_string(report.probe_state) + "," +
               format_double(report.bias_at_probe) + "," +
               format_double(report.bias_at_probe_mc) + "," +
               format_double(report.mc_stderr) + "," +
               format_double(report.squared_bias) + "\n";
    write_text(config.output_dir + "/bias_summary.csv", summary);
    write_config_echo(config);
    std::cout << "bias_at_probe=" << format_double(report.bias_at_probe) << "\n";
    return 0;
}

int run_certify(const ExperimentConfig& config) {
    std::filesystem::create_directories(config.output_dir);
    const OfflineDataset dataset = load_dataset(dataset_path(config));
    const Mdp mdp = build_environment(config.env);
    const Eigen::MatrixXd xi = Eigen::MatrixXd::Constant(
        dataset.n_states, dataset.n_actions, config.certify.xi);

    std::optional<TabularPolicy> fixed;
    if (config.policy.kind != "behavior")
        fixed = build_policy(config.policy, dataset.n_states, dataset.n_actions);

    const UnderestimationCertificate cert = verify_underestimation(
        dataset, mdp, config.learner, xi, fixed ? &*fixed : nullptr);

    std::string outcome = "undefined";
    if (cert.outcome == CertificateOutcome::Pass) outcome = "pass";
    if (cert.outcome == CertificateOutcome::Fail) outcome = "fail";
    std::string summary =
        "alpha_used,alpha_threshold,delta,n_states,min_margin,outcome\n";
    const double min_margin =
        cert.margins.size() > 0 ? cert.margins.minCoeff() : 0.0;
    summary += format_double(cert.alpha_used) + "," +
               format_double(cert.alpha_threshold_value) + "," +
               format_double(cert.delta) + "," +
               std::to_string(cert.states.size()) + "," +
               format_double(min_margin) + "," + outcome + "\n";
    write_text(config.output_dir + "/certificate.csv", summary);

    std::string margins = "state,margin\n";
    for (std::size_t i = 0; i < cert.states.size(); ++i)
        margins += std::to_string(cert.states[i]) + "," +
                   format_double(cert.margins[static_cast<Eigen::Index>(i)]) + "\n";
    write_text(config.output_dir + "/margins.csv", margins);
    write_config_echo(config);
    std::cout << "certificate=" << outcome
              << (cert.warning.empty() ? "" : " warning=" + cert.warning) << "\n";
    return cert.outcome == CertificateOutcome::Pass ? 0 : 4;
}

namespace {

/// Runs cells on a small worker pool; results land in submission order.
template <typename Cell, typename Fn>
std::vector<std::string> run_cells(const std::vector<Cell>& cells, int workers,
                                   Fn&& body) {
    std::vector<std::string> rows(cells.size());
    std::vector<std::string> errors(cells.size());
    std::atomic<std::size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                rows[i] = body(cells[i]);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    const int n_workers =
        std::max(1, std::min<int>(workers, static_cast<int>(cells.size())));
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    for (const std::string& e : errors)
        if (!e.empty()) throw std::runtime_error(e);
    return rows;
}

} // namespace

int run_scenario_battery(const ExperimentConfig& config, int workers) {
    std::filesystem::create_directories(config.output_dir);
    struct Cell {
        ScenarioCase scenario;
        ScenarioMethod method;
        double alpha;
    };
    std::vector<Cell> cells;
    for (ScenarioCase c :
         {ScenarioCase::CaseA, ScenarioCase::CaseB, ScenarioCase::CaseC}) {
        const std::vector<double>& grid =
            c == ScenarioCase::CaseC ? config.scenario.alpha_c
                                     : config.scenario.alpha_ab;
        for (ScenarioMethod m : {ScenarioMethod::CQL, ScenarioMethod::EPQ})
            for (double alpha : grid) cells.push_back({c, m, alpha});
    }
    const std::uint64_t seed = mix_seed(config.scenario.seed, config.global_seed);
    const std::vector<std::string> rows =
        run_cells(cells, workers, [&](const Cell& cell) {
            const BiasReport report =
                run_scenario(cell.scenario, cell.method, cell.alpha,
                             config.scenario.tau_over_rho, seed,
                             config.scenario.settings);
            return format_double(report.alpha) + "," + format_double(report.tau) +
                   "," + format_double(report.bias_at_probe) + "," +
                   format_double(report.squared_bias) + "," +
                   format_double(report.mc_stderr);
        });

    // One file per (case, method) pair, rows in alpha order.
    std::size_t i = 0;
    for (ScenarioCase c :
         {ScenarioCase::CaseA, ScenarioCase::CaseB, ScenarioCase::CaseC}) {
        const std::vector<double>& grid =
            c == ScenarioCase::CaseC ? config.scenario.alpha_c
                                     : config.scenario.alpha_ab;
        for (ScenarioMethod m : {ScenarioMethod::CQL, ScenarioMethod::EPQ}) {
            std::string csv = "alpha,tau,bias,squared_bias,stderr\n";
            for (std::size_t k = 0; k < grid.size(); ++k) csv += rows[i++] + "\n";
            write_text(config.output_dir + "/scenario_" + scenario_case_name(c) +
                           "_" + scenario_method_name(m) + ".csv",
                       csv);
        }
    }
    write_config_echo(config);
    std::cout << "scenario cells=" << cells.size() << "\n";
    return 0;
}

int run_sweep(const ExperimentConfig& config, int workers) {
    std::filesystem::create_directories(config.output_dir);
    const OfflineDataset dataset = load_dataset(dataset_path(config));
    std::optional<Mdp> model;
    if (mode_is_exact(config.learner.mode)) model = build_environment(config.env);
    std::optional<TabularPolicy> fixed;
    if (config.learner.policy_update == PolicyUpdate::FixedGiven)
        fixed = build_policy(config.policy, dataset.n_states, dataset.n_actions);

    struct Cell {
        double alpha, tau_over_rho, c_min, epsilon, zeta;
    };
    std::vector<Cell> cells;
    for (double a : config.sweep.alpha)
        for (double t : config.sweep.tau_over_rho)
            for (double c : config.sweep.c_min)
                for (double e : config.sweep.epsilon)
                    for (double z : config.sweep.zeta)
                        cells.push_back({a, t, c, e, z});

    const std::vector<std::string> rows =
        run_cells(cells, workers, [&](const Cell& cell) {
            LearnerConfig learner = config.learner;
            learner.seed = mix_seed(learner.seed, config.global_seed);
            learner.penalty.alpha = cell.alpha;
            learner.penalty.tau_over_rho = cell.tau_over_rho;
            learner.penalty.c_min = cell.c_min;
            learner.penalty.epsilon_radius = cell.epsilon;
            learner.penalty.zeta = cell.zeta;
            const TrainedAgent agent =
                train(dataset, learner, model ? &*model : nullptr,
                      fixed ? &*fixed : nullptr);
            const StepRecord& last = agent.history.back();
            std::string status = "budget";
            if (agent.status == RunStatus::Converged) status = "converged";
            if (agent.status == RunStatus::Diverged) status = "diverged";
            return format_double(cell.alpha) + "," +
                   format_double(cell.tau_over_rho) + "," +
                   format_double(learner.penalty.tau(dataset.n_actions)) + "," +
                   format_double(cell.c_min) + "," + format_double(cell.epsilon) +
                   "," + format_double(cell.zeta) + "," + mode_name(learner.mode) +
                   "," + status + "," + std::to_string(agent.history.size()) + "," +
                   format_double(last.loss) + "," + format_double(last.mean_f_tau) +
                   "," + format_double(last.mean_w) + "," +
                   format_double(last.mean_abs_penalty) + "," +
                   format_double(last.delta_q_sup);
        });

    std::string csv =
        "alpha,tau_over_rho,tau,c_min,epsilon,zeta,mode,status,steps,final_loss,"
        "mean_f_tau,mean_w,mean_abs_penalty,final_delta_q_sup\n";
    for (const std::string& row : rows) csv += row + "\n";
    write_text(config.output_dir + "/sweep.csv", csv);
    write_config_echo(config);
    std::cout << "sweep cells=" << cells.size() << "\n";
    return 0;
}

} // namespace epq
