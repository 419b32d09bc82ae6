#include "cavia/metarl.hpp"

#include <cmath>
#include <exception>
#include <numbers>
#include <ostream>
#include <thread>

#include "cavia/checkpoint.hpp"
#include "cavia/errors.hpp"

namespace cavia::rl {

using models::Architecture;

// ---- environment ---------------------------------------------------------------

Navigation2DEnv::Navigation2DEnv(Vec2 goal, NavigationParams params) : goal_(goal), params_(params) {
    if (params_.horizon == 0) throw ConfigError("navigation horizon must be positive");
    if (!(params_.action_clip > 0.0)) throw ConfigError("action clip must be positive");
}

void Navigation2DEnv::reset() {
    state_ = {0.0, 0.0};
    t_ = 0;
}

Navigation2DEnv::Step Navigation2DEnv::step(const Vec2& action) {
    if (t_ >= params_.horizon) throw ContractError("step after the end of the episode");
    for (int d = 0; d < 2; ++d) state_[d] += std::clamp(action[d], -params_.action_clip, params_.action_clip);
    ++t_;
    const double dist = std::hypot(state_[0] - goal_[0], state_[1] - goal_[1]);
    return {state_, -dist, t_ >= params_.horizon || dist < params_.goal_radius};
}

Vec2 sample_goal(Rng& rng, const NavigationParams& params) {
    std::uniform_real_distribution<double> u(-params.goal_range, params.goal_range);
    const double x = u(rng);
    return {x, u(rng)};
}

// ---- policy ----------------------------------------------------------------------

std::vector<Array> GaussianPolicy::meta_parameters() const {
    std::vector<Array> out = mean.theta().values();
    out.push_back(log_std);
    return out;
}

void GaussianPolicy::set_meta_parameters(const std::vector<Array>& values) {
    if (values.size() != mean.theta().size() + 1) throw DimensionError("wrong number of policy tensors");
    for (std::size_t i = 0; i < mean.theta().size(); ++i) {
        if (values[i].shape != mean.theta()[i].shape) throw DimensionError("policy tensor shape mismatch");
        mean.theta()[i] = values[i];
    }
    if (values.back().shape != log_std.shape) throw DimensionError("log_std shape mismatch");
    log_std = values.back();
}

GaussianPolicy make_navigation_policy(std::size_t context_dim, std::uint64_t seed, std::size_t hidden,
                                      bool meta_learned_context) {
    Architecture arch;
    arch.input_dim = 2;
    arch.output_dim = 2;
    arch.hidden = {hidden, hidden};
    arch.context_dim = context_dim;
    arch.activation = models::Activation::relu;
    arch.context_role = meta_learned_context ? models::ContextRole::meta_learned : models::ContextRole::adapted;
    return {models::init_theta(arch, seed), Array(Shape{2}, 0.0)};
}

// ---- trajectories ----------------------------------------------------------------

std::vector<double> Trajectory::episode_returns() const {
    std::vector<double> out;
    for (std::size_t e = 0; e < episodes(); ++e) {
        double s = 0.0;
        for (std::size_t t = segment_begin[e]; t < segment_begin[e + 1]; ++t) s += rewards[t];
        out.push_back(s);
    }
    return out;
}

double Trajectory::mean_episode_return() const {
    const auto r = episode_returns();
    if (r.empty()) throw ContractError("trajectory has no episodes");
    double s = 0.0;
    for (double v : r) s += v;
    return s / static_cast<double>(r.size());
}

Trajectory collect_rollout(const GaussianPolicy& policy, const Vec2& goal, std::size_t interactions, Rng& rng,
                           const NavigationParams& params) {
    if (interactions == 0) throw ContractError("rollout needs at least one interaction");
    const std::size_t h = params.horizon;
    const std::size_t episodes = (interactions + h - 1) / h;
    const Array sigma = [&] {
        Array s = policy.log_std;
        for (double& v : s.data) v = std::exp(v);
        return s;
    }();

    struct Slot {
        Navigation2DEnv env;
        std::size_t limit;
        bool active = true;
        std::vector<double> s, a, s2, r;
    };
    std::vector<Slot> slots;
    for (std::size_t e = 0; e < episodes; ++e) {
        Slot slot{Navigation2DEnv(goal, params), std::min(h, interactions - e * h), true, {}, {}, {}, {}};
        slot.env.reset();
        slots.push_back(std::move(slot));
    }

    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::size_t> live;
    for (std::size_t t = 0; t < h; ++t) {
        live.clear();
        for (std::size_t e = 0; e < episodes; ++e)
            if (slots[e].active) live.push_back(e);
        if (live.empty()) break;
        Array x(Shape{live.size(), 2});
        for (std::size_t i = 0; i < live.size(); ++i) {
            x.at(i, 0) = slots[live[i]].env.state()[0];
            x.at(i, 1) = slots[live[i]].env.state()[1];
        }
        Array mu;
        try {
            mu = policy.mean.forward(x);
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("non-finite action mean: ") + e.what(), static_cast<long>(t));
        }
        for (std::size_t i = 0; i < live.size(); ++i) {
            Slot& slot = slots[live[i]];
            Vec2 a;
            for (int d = 0; d < 2; ++d) a[d] = mu.at(i, d) + sigma[d] * normal(rng);
            const Vec2 s = slot.env.state();
            const auto step = slot.env.step(a);
            slot.s.insert(slot.s.end(), s.begin(), s.end());
            slot.a.insert(slot.a.end(), a.begin(), a.end());
            slot.s2.insert(slot.s2.end(), step.next_state.begin(), step.next_state.end());
            slot.r.push_back(step.reward);
            if (step.done || slot.r.size() >= slot.limit) slot.active = false;
        }
    }

    Trajectory tau;
    std::vector<double> s, a, s2;
    tau.segment_begin.push_back(0);
    for (const Slot& slot : slots) {
        s.insert(s.end(), slot.s.begin(), slot.s.end());
        a.insert(a.end(), slot.a.begin(), slot.a.end());
        s2.insert(s2.end(), slot.s2.begin(), slot.s2.end());
        tau.rewards.insert(tau.rewards.end(), slot.r.begin(), slot.r.end());
        tau.segment_begin.push_back(tau.rewards.size());
    }
    const std::size_t n = tau.rewards.size();
    tau.states = Array(Shape{n, 2}, std::move(s));
    tau.actions = Array(Shape{n, 2}, std::move(a));
    tau.next_states = Array(Shape{n, 2}, std::move(s2));
    return tau;
}

// ---- returns and objective ------------------------------------------------------

std::vector<double> reward_to_go(const Trajectory& tau, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw DomainError("discount must lie in [0, 1]");
    std::vector<double> g(tau.steps());
    for (std::size_t e = 0; e < tau.episodes(); ++e) {
        double acc = 0.0;
        for (std::size_t t = tau.segment_begin[e + 1]; t-- > tau.segment_begin[e];) {
            acc = tau.rewards[t] + gamma * acc;
            g[t] = acc;
        }
    }
    return g;
}

std::vector<double> advantage_weights(const Trajectory& tau, double gamma, Baseline baseline, Reduction reduction) {
    if (tau.steps() == 0 || tau.episodes() == 0) throw ContractError("empty trajectory");
    std::vector<double> g = reward_to_go(tau, gamma);
    // Running means, so a constant sequence yields its value exactly and the
    // advantages vanish exactly.
    if (baseline == Baseline::trajectory_mean) {
        double mean = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) mean += (g[i] - mean) / static_cast<double>(i + 1);
        for (double& v : g) v -= mean;
    } else if (baseline == Baseline::per_timestep) {
        // Mean reward-to-go at each within-episode time index, over the
        // episodes that reached it.
        std::vector<double> mean, count;
        for (std::size_t e = 0; e < tau.episodes(); ++e)
            for (std::size_t t = tau.segment_begin[e]; t < tau.segment_begin[e + 1]; ++t) {
                const std::size_t k = t - tau.segment_begin[e];
                if (k >= mean.size()) mean.resize(k + 1, 0.0), count.resize(k + 1, 0.0);
                count[k] += 1.0;
                mean[k] += (g[t] - mean[k]) / count[k];
            }
        for (std::size_t e = 0; e < tau.episodes(); ++e)
            for (std::size_t t = tau.segment_begin[e]; t < tau.segment_begin[e + 1]; ++t)
                g[t] -= mean[t - tau.segment_begin[e]];
    }
    const double inv_e = 1.0 / static_cast<double>(tau.episodes());
    for (std::size_t e = 0; e < tau.episodes(); ++e) {
        const std::size_t b = tau.segment_begin[e], end = tau.segment_begin[e + 1];
        const double f = reduction == Reduction::episode_mean ? inv_e / static_cast<double>(end - b) : inv_e;
        for (std::size_t t = b; t < end; ++t) g[t] *= f;
    }
    return g;
}

ad::Tensor log_prob(ad::Tensor mean, ad::Tensor log_std, ad::Tensor actions) {
    const ad::Tensor z = ad::mul(ad::sub(actions, mean), ad::exp(ad::neg(log_std)));
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    const ad::Tensor per_dim = ad::affine(ad::sub(ad::scale(ad::square(z), -0.5), log_std), 1.0, -half_log_2pi);
    return ad::sum(per_dim, 1);
}

ad::Tensor pg_objective(const Trajectory& tau, const Architecture& arch, std::span<const ad::Tensor> theta,
                        ad::Tensor log_std, ad::Tensor context, const ObjectiveSettings& settings) {
    const std::vector<double> w = advantage_weights(tau, settings.gamma, settings.baseline, settings.reduction);
    ad::Graph& g = *log_std.graph();
    const ad::Tensor mean = models::forward(arch, theta, context, g.constant(tau.states));
    const ad::Tensor lp = log_prob(mean, log_std, g.constant(tau.actions));
    return ad::sum(ad::mul(lp, g.constant(Array::vector(w))));
}

// ---- inner and outer loops ------------------------------------------------------

void RLConfig::validate() const {
    if (!(inner_lr >= 0.0) || !std::isfinite(inner_lr)) throw ConfigError("inner learning rate must be >= 0");
    if (meta_batch < 1) throw ConfigError("meta batch size must be at least 1");
    if (episodes_per_task < 1) throw ConfigError("episodes per task must be at least 1");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    if (!(objective.gamma >= 0.0 && objective.gamma <= 1.0)) throw ConfigError("discount must lie in [0, 1]");
    if (!(adam.lr > 0.0)) throw ConfigError("outer learning rate must be positive");
}

ad::Tensor rl_adapt_context(const Architecture& arch, std::span<const ad::Tensor> theta, ad::Tensor log_std,
                            ad::Tensor phi0, const Trajectory& tau, double alpha, bool track_meta_graph,
                            const ObjectiveSettings& settings) {
    const ad::Tensor j = pg_objective(tau, arch, theta, log_std, phi0, settings);
    const auto gr = ad::grad(j, {phi0}, track_meta_graph);
    return ad::add(phi0, ad::scale(gr[phi0], alpha));
}

namespace {

void require_zero_context(const GaussianPolicy& policy) {
    for (double v : policy.mean.phi().data)
        if (v != 0.0) throw ContractError("context must be reset to zero before adaptation");
}

// One ascent step on phi from its current value.
Array context_ascent(const GaussianPolicy& policy, const Trajectory& tau, double alpha,
                     const ObjectiveSettings& settings) {
    ad::Graph g;
    const auto theta = policy.mean.bind_theta(g, false);
    const ad::Tensor log_std = g.leaf(policy.log_std, false);
    const ad::Tensor phi = g.leaf(policy.mean.phi(), true);
    return rl_adapt_context(policy.mean.architecture(), theta, log_std, phi, tau, alpha, false, settings).value();
}

// One ascent step on every meta parameter (MAML inner loop), values only.
std::vector<Array> parameter_ascent(const GaussianPolicy& policy, const Trajectory& tau, double alpha,
                                    const ObjectiveSettings& settings) {
    ad::Graph g;
    std::vector<ad::Tensor> params = policy.mean.bind_theta(g, true);
    params.push_back(g.leaf(policy.log_std, true));
    const std::span<const ad::Tensor> theta(params.data(), params.size() - 1);
    const ad::Tensor j = pg_objective(tau, policy.mean.architecture(), theta, params.back(),
                                      g.constant(policy.mean.phi()), settings);
    const auto gr = ad::grad(j, std::span<const ad::Tensor>(params), false);
    std::vector<Array> out;
    for (const auto& p : params) {
        Array v = p.value();
        const Array& d = gr[p].value();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += alpha * d[i];
        out.push_back(std::move(v));
    }
    return out;
}

struct RLContribution {
    std::vector<Array> grads;
    double pre_return = 0.0;
    double post_return = 0.0;
};

RLContribution task_meta_gradient(const GaussianPolicy& policy, const Vec2& goal, Rng& rng, const RLConfig& cfg) {
    const Architecture& arch = policy.mean.architecture();
    const bool track = !cfg.first_order;
    ad::Graph g;
    std::vector<ad::Tensor> params = policy.mean.bind_theta(g, true);
    params.push_back(g.leaf(policy.log_std, true));
    const std::span<const ad::Tensor> theta(params.data(), params.size() - 1);
    const ad::Tensor log_std = params.back();

    RLContribution out;
    const Trajectory train = collect_rollout(policy, goal, cfg.interactions(), rng, cfg.env);
    out.pre_return = train.mean_episode_return();
    GaussianPolicy adapted = policy;
    ad::Tensor objective;
    if (cfg.algorithm == meta::Algorithm::cavia) {
        const ad::Tensor phi0 = g.leaf(policy.mean.phi(), true);
        const ad::Tensor phi = rl_adapt_context(arch, theta, log_std, phi0, train, cfg.inner_lr, track, cfg.objective);
        adapted.mean.set_phi(phi.value());
        const Trajectory test = collect_rollout(adapted, goal, cfg.interactions(), rng, cfg.env);
        out.post_return = test.mean_episode_return();
        objective = pg_objective(test, arch, theta, log_std, phi, cfg.objective);
    } else {
        const ad::Tensor context = g.constant(policy.mean.phi());
        const ad::Tensor j = pg_objective(train, arch, theta, log_std, context, cfg.objective);
        const auto gr = ad::grad(j, std::span<const ad::Tensor>(params), track);
        std::vector<ad::Tensor> moved;
        std::vector<Array> values;
        for (const auto& p : params) {
            moved.push_back(ad::add(p, ad::scale(gr[p], cfg.inner_lr)));
            values.push_back(moved.back().value());
        }
        adapted.set_meta_parameters(values);
        const Trajectory test = collect_rollout(adapted, goal, cfg.interactions(), rng, cfg.env);
        out.post_return = test.mean_episode_return();
        objective = pg_objective(test, arch, std::span<const ad::Tensor>(moved.data(), moved.size() - 1),
                                 moved.back(), context, cfg.objective);
    }
    if (!std::isfinite(objective.item())) throw DivergenceError("non-finite policy objective", 0);
    const auto gr = ad::grad(objective, std::span<const ad::Tensor>(params), false);
    for (const auto& p : params) out.grads.push_back(gr[p].value());
    return out;
}

Rng task_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32)};
    return Rng(seq);
}

}  // namespace

Array rl_inner_adapt(const GaussianPolicy& policy, const Trajectory& tau, double alpha,
                     const ObjectiveSettings& settings) {
    require_zero_context(policy);
    return context_ascent(policy, tau, alpha, settings);
}

RLMetaGradient rl_meta_gradient(const GaussianPolicy& policy, std::span<const Vec2> goals, std::span<Rng> task_rngs,
                                const RLConfig& cfg) {
    cfg.validate();
    if (goals.empty()) throw ContractError("no goals in the meta batch");
    if (task_rngs.size() != goals.size()) throw ContractError("one rollout stream per goal is required");
    require_zero_context(policy);
    if (cfg.algorithm == meta::Algorithm::cavia &&
        policy.mean.architecture().context_role != models::ContextRole::adapted)
        throw ConfigError("CAVIA needs a policy whose context is adapted, not meta-learned");

    const std::size_t n = goals.size();
    std::vector<RLContribution> parts(n);
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t i = first; i < n; i += stride) {
            try {
                parts[i] = task_meta_gradient(policy, goals[i], task_rngs[i], cfg);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t workers = std::min(cfg.workers, n);
    if (workers <= 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!errors[i]) continue;
        try {
            std::rethrow_exception(errors[i]);
        } catch (const DivergenceError& e) {
            throw DivergenceError(e.reason(), e.iteration(), static_cast<long>(i));
        }
    }

    RLMetaGradient mg;
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<Array> terms(n);
    for (std::size_t p = 0; p < parts.front().grads.size(); ++p) {
        for (std::size_t i = 0; i < n; ++i) terms[i] = std::move(parts[i].grads[p]);
        Array total = meta::pairwise_sum(terms);
        for (double& v : total.data) v *= inv_n;
        mg.grads.push_back(std::move(total));
    }
    std::vector<Array> pre(n), post(n);
    for (std::size_t i = 0; i < n; ++i) {
        pre[i] = Array::scalar(parts[i].pre_return);
        post[i] = Array::scalar(parts[i].post_return);
    }
    mg.pre_return = meta::pairwise_sum(pre).item() * inv_n;
    mg.post_return = meta::pairwise_sum(post).item() * inv_n;
    return mg;
}

RLStepDiagnostics rl_meta_step(GaussianPolicy& policy, std::span<const Vec2> goals, const RLConfig& cfg,
                               optim::Adam& adam, std::uint64_t seed, std::int64_t iteration) {
    std::vector<Rng> rngs;
    for (std::size_t i = 0; i < goals.size(); ++i) rngs.push_back(task_stream(seed, static_cast<std::uint64_t>(iteration), i));
    RLMetaGradient mg;
    try {
        mg = rl_meta_gradient(policy, goals, rngs, cfg);
    } catch (const DivergenceError& e) {
        throw DivergenceError(e.reason(), static_cast<long>(iteration), e.task_index());
    }
    double norm2 = 0.0;
    for (auto& gr : mg.grads) {
        norm2 += gr.squared_norm();
        for (double& v : gr.data) v = -v;  // Adam descends; the objective is maximised.
    }
    if (!std::isfinite(norm2)) throw DivergenceError("non-finite policy meta-gradient", static_cast<long>(iteration));
    std::vector<Array> params = policy.meta_parameters();
    adam.step(params, mg.grads);
    policy.set_meta_parameters(params);
    policy.mean.reset_context();
    return {iteration, mg.pre_return, mg.post_return, std::sqrt(norm2)};
}

RLEvaluation rl_adapt_and_eval(const GaussianPolicy& policy, std::span<const Vec2> goals, meta::Algorithm algorithm,
                               double alpha, int steps, std::size_t episodes, std::uint64_t seed,
                               const NavigationParams& env, const ObjectiveSettings& settings) {
    if (steps < 0) throw ContractError("steps must be non-negative");
    require_zero_context(policy);
    RLEvaluation out;
    const std::size_t m = episodes * env.horizon;
    for (std::size_t gi = 0; gi < goals.size(); ++gi) {
        Rng rng = task_stream(seed, 0xe7a1u, gi);
        GaussianPolicy current = policy;
        std::vector<double> returns;
        std::vector<Array> contexts;
        for (int s = 0;; ++s) {
            const Trajectory tau = collect_rollout(current, goals[gi], m, rng, env);
            returns.push_back(tau.mean_episode_return());
            contexts.push_back(current.mean.phi());
            if (s == steps) break;
            if (algorithm == meta::Algorithm::cavia) {
                current.mean.set_phi(context_ascent(current, tau, alpha, settings));
            } else {
                const double lr = s == 0 ? alpha : 0.5 * alpha;
                current.set_meta_parameters(parameter_ascent(current, tau, lr, settings));
            }
        }
        out.returns.push_back(std::move(returns));
        out.contexts.push_back(std::move(contexts));
    }
    return out;
}

// ---- dumps -----------------------------------------------------------------------

void write_trajectories_csv(std::ostream& os, std::span<const Trajectory> trajectories) {
    os << "task_id,episode,t,s_x,s_y,a_x,a_y,r\n";
    for (std::size_t k = 0; k < trajectories.size(); ++k) {
        const Trajectory& tau = trajectories[k];
        for (std::size_t e = 0; e < tau.episodes(); ++e)
            for (std::size_t t = tau.segment_begin[e]; t < tau.segment_begin[e + 1]; ++t)
                os << k << ',' << e << ',' << t - tau.segment_begin[e] << ',' << format_double(tau.states.at(t, 0))
                   << ',' << format_double(tau.states.at(t, 1)) << ',' << format_double(tau.actions.at(t, 0)) << ','
                   << format_double(tau.actions.at(t, 1)) << ',' << format_double(tau.rewards[t]) << '\n';
    }
}

void write_embeddings_csv(std::ostream& os, std::span<const Vec2> goals, std::span<const Array> contexts) {
    if (goals.size() != contexts.size()) throw DimensionError("one context per goal is required");
    const std::size_t k = contexts.empty() ? 0 : contexts.front().size();
    os << "task_id,goal_x,goal_y";
    for (std::size_t j = 0; j < k; ++j) os << ",phi" << j + 1;
    os << '\n';
    for (std::size_t i = 0; i < goals.size(); ++i) {
        os << i << ',' << format_double(goals[i][0]) << ',' << format_double(goals[i][1]);
        for (double v : contexts[i].data) os << ',' << format_double(v);
        os << '\n';
    }
}

}  // namespace cavia::rl
