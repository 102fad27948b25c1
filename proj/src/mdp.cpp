#include "epq/mdp.hpp"

#include "epq/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace epq {

namespace {

constexpr double kProbTol = 1e-12;

void format_value(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

} // namespace

Mdp::Mdp(int n_states, int n_actions, Eigen::MatrixXd transition,
         Eigen::MatrixXd reward, double discount, Eigen::VectorXd initial_state_dist,
         double r_max)
    : n_states_(n_states),
      n_actions_(n_actions),
      transition_(std::move(transition)),
      reward_(std::move(reward)),
      discount_(discount),
      initial_(std::move(initial_state_dist)),
      r_max_(r_max) {
    validate();
}

void Mdp::validate() const {
    if (n_states_ < 1 || n_actions_ < 1)
        throw std::invalid_argument("Mdp: need at least one state and action");
    if (transition_.rows() != static_cast<Eigen::Index>(n_states_) * n_actions_ ||
        transition_.cols() != n_states_)
        throw std::invalid_argument("Mdp: transition tensor shape mismatch");
    if (reward_.rows() != n_states_ || reward_.cols() != n_actions_)
        throw std::invalid_argument("Mdp: reward table shape mismatch");
    if (initial_.size() != n_states_)
        throw std::invalid_argument("Mdp: initial distribution shape mismatch");
    if (!(discount_ >= 0.0 && discount_ < 1.0))
        throw std::invalid_argument("Mdp: discount must lie in [0, 1)");
    if (!(r_max_ >= 0.0) || !std::isfinite(r_max_))
        throw std::invalid_argument("Mdp: r_max must be finite and nonnegative");
    for (Eigen::Index r = 0; r < transition_.rows(); ++r) {
        if (transition_.row(r).minCoeff() < 0.0)
            throw std::invalid_argument("Mdp: negative transition probability");
        if (std::abs(transition_.row(r).sum() - 1.0) > kProbTol)
            throw std::invalid_argument("Mdp: transition row does not sum to 1");
    }
    if (reward_.cwiseAbs().maxCoeff() > r_max_ + kProbTol)
        throw std::invalid_argument("Mdp: reward exceeds declared r_max");
    if (initial_.minCoeff() < 0.0 || std::abs(initial_.sum() - 1.0) > kProbTol)
        throw std::invalid_argument("Mdp: initial distribution invalid");
}

void Mdp::check_unlocked() const {
    if (training_locked_)
        throw std::logic_error(
            "offline contract violation: model accessed while locked");
}

Eigen::VectorXd Mdp::transition_row(int state, int action) const {
    check_unlocked();
    return transition_.row(index(state, action));
}

double Mdp::reward(int state, int action) const {
    check_unlocked();
    return reward_(state, action);
}

const Eigen::MatrixXd& Mdp::transition_matrix() const {
    check_unlocked();
    return transition_;
}

const Eigen::MatrixXd& Mdp::reward_matrix() const {
    check_unlocked();
    return reward_;
}

void Mdp::set_state_coords(Eigen::MatrixXd coords) {
    if (coords.rows() != n_states_)
        throw std::invalid_argument("Mdp: coordinate rows must match n_states");
    coords_ = std::move(coords);
}

TabularPolicy::TabularPolicy(Eigen::MatrixXd probs) : probs_(std::move(probs)) {
    for (Eigen::Index s = 0; s < probs_.rows(); ++s) {
        if (probs_.row(s).minCoeff() < 0.0)
            throw std::invalid_argument("TabularPolicy: negative probability");
        if (std::abs(probs_.row(s).sum() - 1.0) > kProbTol)
            throw std::invalid_argument("TabularPolicy: row does not sum to 1");
    }
}

TabularPolicy TabularPolicy::uniform(int n_states, int n_actions) {
    return TabularPolicy(Eigen::MatrixXd::Constant(n_states, n_actions,
                                                   1.0 / n_actions));
}

TabularPolicy TabularPolicy::point_mass(int n_states, int n_actions, int action) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n_states, n_actions);
    p.col(action).setOnes();
    return TabularPolicy(std::move(p));
}

Eigen::VectorXd QFunction::state_values(const TabularPolicy& policy) const {
    if (policy.n_states() != n_states() || policy.n_actions() != n_actions())
        throw std::invalid_argument("state_values: policy shape mismatch");
    return (values_.array() * policy.matrix().array()).rowwise().sum();
}

QFunction bellman_apply(const Mdp& mdp, const TabularPolicy& policy,
                        const QFunction& q) {
    if (policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() ||
        q.n_states() != mdp.n_states() || q.n_actions() != mdp.n_actions())
        throw std::invalid_argument("bellman_apply: shape mismatch");
    const Eigen::VectorXd v = q.state_values(policy);
    Eigen::VectorXd backed = mdp.transition_matrix() * v; // (S*A)
    Eigen::MatrixXd next = mdp.reward_matrix();
    const int a_count = mdp.n_actions();
    for (int s = 0; s < mdp.n_states(); ++s)
        for (int a = 0; a < a_count; ++a)
            next(s, a) += mdp.discount() * backed[s * a_count + a];
    return QFunction(std::move(next));
}

QFunction exact_q(const Mdp& mdp, const TabularPolicy& policy) {
    const int S = mdp.n_states();
    const int A = mdp.n_actions();
    if (policy.n_states() != S || policy.n_actions() != A)
        throw std::invalid_argument("exact_q: policy shape mismatch");

    // State transition matrix under pi and the policy-averaged reward.
    Eigen::MatrixXd p_pi = Eigen::MatrixXd::Zero(S, S);
    Eigen::VectorXd r_pi = Eigen::VectorXd::Zero(S);
    for (int s = 0; s < S; ++s) {
        for (int a = 0; a < A; ++a) {
            const double w = policy.prob(s, a);
            if (w == 0.0) continue;
            p_pi.row(s) += w * mdp.transition_matrix().row(mdp.index(s, a));
            r_pi[s] += w * mdp.reward(s, a);
        }
    }
    Eigen::MatrixXd system = Eigen::MatrixXd::Identity(S, S) - mdp.discount() * p_pi;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(system);
    const Eigen::VectorXd v = lu.solve(r_pi);
    if (!v.allFinite())
        throw std::domain_error("exact_q: singular evaluation system");

    Eigen::VectorXd backed = mdp.transition_matrix() * v;
    Eigen::MatrixXd values = mdp.reward_matrix();
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a)
            values(s, a) += mdp.discount() * backed[s * A + a];
    return QFunction(std::move(values));
}

Trajectory sample_episode(const Mdp& mdp, const TabularPolicy& policy, int horizon,
                          std::uint64_t seed) {
    if (horizon < 1)
        throw std::invalid_argument("sample_episode: horizon must be >= 1");
    if (policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions())
        throw std::invalid_argument("sample_episode: policy shape mismatch");
    Rng rng(seed);
    Trajectory out;
    out.reserve(horizon);
    int state = rng.categorical(mdp.initial_state_dist());
    for (int t = 0; t < horizon; ++t) {
        const int action = rng.categorical(policy.row(state));
        const int next = rng.categorical(mdp.transition_row(state, action));
        out.push_back({state, action, mdp.reward(state, action), next, false});
        state = next;
    }
    return out;
}

MonteCarloEstimate monte_carlo_q(const Mdp& mdp, const TabularPolicy& policy,
                                 int state, int action, int n_rollouts, int horizon,
                                 std::uint64_t seed) {
    if (n_rollouts < 1 || horizon < 1)
        throw std::invalid_argument("monte_carlo_q: need rollouts and horizon >= 1");
    Rng rng(seed);
    double sum = 0.0;
    double sum_sq = 0.0;
    for (int i = 0; i < n_rollouts; ++i) {
        double g = 0.0;
        double scale = 1.0;
        int s = state;
        int a = action;
        for (int t = 0; t < horizon; ++t) {
            g += scale * mdp.reward(s, a);
            scale *= mdp.discount();
            if (scale == 0.0) break;
            s = rng.categorical(mdp.transition_row(s, a));
            a = rng.categorical(policy.row(s));
        }
        sum += g;
        sum_sq += g * g;
    }
    const double mean = sum / n_rollouts;
    double stderr_ = 0.0;
    if (n_rollouts > 1) {
        const double var =
            std::max(0.0, (sum_sq - n_rollouts * mean * mean) / (n_rollouts - 1));
        stderr_ = std::sqrt(var / n_rollouts);
    }
    return {mean, stderr_, n_rollouts};
}

Mdp random_mdp(int n_states, int n_actions, std::uint64_t seed, double discount) {
    if (n_states < 1 || n_actions < 1)
        throw std::invalid_argument("random_mdp: dimensions must be >= 1");
    Rng rng(seed);
    Eigen::MatrixXd transition(n_states * n_actions, n_states);
    for (Eigen::Index r = 0; r < transition.rows(); ++r) {
        double total = 0.0;
        for (int s = 0; s < n_states; ++s) {
            const double e = rng.exponential();
            transition(r, s) = e;
            total += e;
        }
        transition.row(r) /= total;
        // Absorb normalization roundoff so the row sums at 1e-12.
        transition(r, n_states - 1) += 1.0 - transition.row(r).sum();
    }
    Eigen::MatrixXd reward(n_states, n_actions);
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a)
            reward(s, a) = rng.uniform(-1.0, 1.0);
    Eigen::VectorXd initial =
        Eigen::VectorXd::Constant(n_states, 1.0 / n_states);
    initial[n_states - 1] += 1.0 - initial.sum();
    return Mdp(n_states, n_actions, std::move(transition), std::move(reward),
               discount, std::move(initial), 1.0);
}

namespace {

double wrap_angle(double theta) {
    const double two_pi = 2.0 * M_PI;
    double w = std::fmod(theta + M_PI, two_pi);
    if (w < 0.0) w += two_pi;
    return w - M_PI;
}

} // namespace

Mdp pendulum_mdp(int n_angle_bins, int n_velocity_bins, int n_action_bins,
                 double discount) {
    if (n_angle_bins < 2 || n_velocity_bins < 2 || n_action_bins < 2)
        throw std::invalid_argument("pendulum_mdp: all bin counts must be >= 2");

    constexpr double kGravity = 10.0;
    constexpr double kMass = 1.0;
    constexpr double kLength = 1.0;
    constexpr double kDt = 0.05;
    constexpr double kMaxSpeed = 8.0;
    constexpr double kMaxTorque = 2.0;
    // One decision holds the torque for several integrator steps; a single
    // 0.05 s step moves the velocity less than half a bin on default grids,
    // which would freeze the rounded dynamics.
    constexpr int kSubsteps = 4;

    const int S = n_angle_bins * n_velocity_bins;
    const int A = n_action_bins;

    std::vector<double> angle(n_angle_bins);
    for (int i = 0; i < n_angle_bins; ++i)
        angle[i] = -M_PI + i * (2.0 * M_PI / n_angle_bins);
    std::vector<double> vel(n_velocity_bins);
    for (int j = 0; j < n_velocity_bins; ++j)
        vel[j] = -kMaxSpeed + j * (2.0 * kMaxSpeed / (n_velocity_bins - 1));
    std::vector<double> torque(A);
    for (int a = 0; a < A; ++a)
        torque[a] = -kMaxTorque + a * (2.0 * kMaxTorque / (A - 1));

    auto nearest_angle = [&](double th) {
        th = wrap_angle(th);
        const double width = 2.0 * M_PI / n_angle_bins;
        int idx = static_cast<int>(std::lround((th + M_PI) / width));
        return ((idx % n_angle_bins) + n_angle_bins) % n_angle_bins;
    };
    auto nearest_vel = [&](double td) {
        td = std::clamp(td, -kMaxSpeed, kMaxSpeed);
        const double width = 2.0 * kMaxSpeed / (n_velocity_bins - 1);
        const int idx = static_cast<int>(std::lround((td + kMaxSpeed) / width));
        return std::clamp(idx, 0, n_velocity_bins - 1);
    };

    Eigen::MatrixXd transition = Eigen::MatrixXd::Zero(S * A, S);
    Eigen::MatrixXd reward(S, A);
    Eigen::MatrixXd coords(S, 2);
    for (int i = 0; i < n_angle_bins; ++i) {
        for (int j = 0; j < n_velocity_bins; ++j) {
            const int s = i * n_velocity_bins + j;
            coords(s, 0) = angle[i];
            coords(s, 1) = vel[j];
            for (int a = 0; a < A; ++a) {
                const double th = angle[i];
                const double td = vel[j];
                const double u = torque[a];
                const double cost =
                    th * th + 0.1 * td * td + 0.001 * u * u;
                reward(s, a) = -cost;
                double new_th = th;
                double new_td = td;
                for (int k = 0; k < kSubsteps; ++k) {
                    new_td += (3.0 * kGravity / (2.0 * kLength) * std::sin(new_th) +
                               3.0 / (kMass * kLength * kLength) * u) *
                              kDt;
                    new_td = std::clamp(new_td, -kMaxSpeed, kMaxSpeed);
                    new_th += new_td * kDt;
                }
                const int target =
                    nearest_angle(new_th) * n_velocity_bins + nearest_vel(new_td);
                transition(s * A + a, target) = 1.0;
            }
        }
    }

    const double r_max =
        M_PI * M_PI + 0.1 * kMaxSpeed * kMaxSpeed + 0.001 * kMaxTorque * kMaxTorque;
    Eigen::VectorXd initial = Eigen::VectorXd::Zero(S);
    initial[0 * n_velocity_bins + (n_velocity_bins - 1) / 2] = 1.0; // hanging rest
    Mdp mdp(S, A, std::move(transition), std::move(reward), discount,
            std::move(initial), r_max);
    mdp.set_state_coords(std::move(coords));
    return mdp;
}

void save_mdp(const Mdp& mdp, const std::string& path) {
    std::string out;
    out += "epq-mdp-v1 " + std::to_string(mdp.n_states()) + " " +
           std::to_string(mdp.n_actions()) + " ";
    format_value(out, mdp.discount());
    out += " ";
    format_value(out, mdp.r_max());
    out += " ";
    out += std::to_string(mdp.has_state_coords() ? mdp.state_coords().cols() : 0);
    out += "\n";

    out += "init";
    for (int s = 0; s < mdp.n_states(); ++s) {
        out += " ";
        format_value(out, mdp.initial_state_dist()[s]);
    }
    out += "\n";
    for (int s = 0; s < mdp.n_states(); ++s) {
        for (int a = 0; a < mdp.n_actions(); ++a) {
            out += "P " + std::to_string(s) + " " + std::to_string(a);
            const Eigen::VectorXd row = mdp.transition_row(s, a);
            for (int t = 0; t < mdp.n_states(); ++t) {
                out += " ";
                format_value(out, row[t]);
            }
            out += "\n";
        }
    }
    for (int s = 0; s < mdp.n_states(); ++s) {
        out += "R " + std::to_string(s);
        for (int a = 0; a < mdp.n_actions(); ++a) {
            out += " ";
            format_value(out, mdp.reward(s, a));
        }
        out += "\n";
    }
    if (mdp.has_state_coords()) {
        for (int s = 0; s < mdp.n_states(); ++s) {
            out += "C " + std::to_string(s);
            for (Eigen::Index d = 0; d < mdp.state_coords().cols(); ++d) {
                out += " ";
                format_value(out, mdp.state_coords()(s, d));
            }
            out += "\n";
        }
    }
    std::ofstream file(path, std::ios::binary);
    if (!file)
        throw std::runtime_error("save_mdp: cannot open " + path);
    file << out;
}

Mdp load_mdp(const std::string& path) {
    std::ifstream file(path);
    if (!file)
        throw std::runtime_error("load_mdp: cannot open " + path);
    std::string line;
    int line_no = 0;
    auto next_line = [&]() {
        if (!std::getline(file, line))
            throw parse_error("load_mdp: unexpected end of file at line " +
                              std::to_string(line_no + 1));
        ++line_no;
    };

    next_line();
    std::istringstream header(line);
    std::string magic;
    int S = 0, A = 0, coord_dim = 0;
    double gamma = 0.0, r_max = 0.0;
    header >> magic >> S >> A >> gamma >> r_max >> coord_dim;
    if (magic != "epq-mdp-v1" || header.fail())
        throw parse_error("load_mdp: bad header at line 1");

    next_line();
    std::istringstream init_in(line);
    std::string tag;
    init_in >> tag;
    if (tag != "init") throw parse_error("load_mdp: expected init at line 2");
    Eigen::VectorXd initial(S);
    for (int s = 0; s < S; ++s)
        if (!(init_in >> initial[s]))
            throw parse_error("load_mdp: truncated init row at line 2");

    Eigen::MatrixXd transition(S * A, S);
    for (int s = 0; s < S; ++s) {
        for (int a = 0; a < A; ++a) {
            next_line();
            std::istringstream in(line);
            int rs = 0, ra = 0;
            in >> tag >> rs >> ra;
            if (tag != "P" || rs != s || ra != a)
                throw parse_error("load_mdp: bad P record at line " +
                                  std::to_string(line_no));
            for (int t = 0; t < S; ++t)
                if (!(in >> transition(s * A + a, t)))
                    throw parse_error("load_mdp: truncated P row at line " +
                                      std::to_string(line_no));
        }
    }
    Eigen::MatrixXd reward(S, A);
    for (int s = 0; s < S; ++s) {
        next_line();
        std::istringstream in(line);
        int rs = 0;
        in >> tag >> rs;
        if (tag != "R" || rs != s)
            throw parse_error("load_mdp: bad R record at line " +
                              std::to_string(line_no));
        for (int a = 0; a < A; ++a)
            if (!(in >> reward(s, a)))
                throw parse_error("load_mdp: truncated R row at line " +
                                  std::to_string(line_no));
    }
    Mdp mdp(S, A, std::move(transition), std::move(reward), gamma,
            std::move(initial), r_max);
    if (coord_dim > 0) {
        Eigen::MatrixXd coords(S, coord_dim);
        for (int s = 0; s < S; ++s) {
            next_line();
            std::istringstream in(line);
            int rs = 0;
            in >> tag >> rs;
            if (tag != "C" || rs != s)
                throw parse_error("load_mdp: bad C record at line " +
                                  std::to_string(line_no));
            for (int d = 0; d < coord_dim; ++d)
                if (!(in >> coords(s, d)))
                    throw parse_error("load_mdp: truncated C row at line " +
                                      std::to_string(line_no));
        }
        mdp.set_state_coords(std::move(coords));
    }
    return mdp;
}

} // namespace epq
