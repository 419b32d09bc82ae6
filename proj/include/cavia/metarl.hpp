#pragma once

// Meta reinforcement learning on 2-D point navigation: a Gaussian policy whose
// mean network takes the context vector as extra input, a REINFORCE objective
// with discounted reward-to-go and a mean baseline, and the CAVIA / MAML outer
// loops on top of it.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "cavia/array.hpp"
#include "cavia/autodiff.hpp"
#include "cavia/metasup.hpp"
#include "cavia/models.hpp"
#include "cavia/optim.hpp"

namespace cavia::rl {

using Rng = std::mt19937_64;
using Vec2 = std::array<double, 2>;

// ---- environment ---------------------------------------------------------------

struct NavigationParams {
    std::size_t horizon = 100;
    double action_clip = 0.1;
    double goal_radius = 0.01;
    double goal_range = 0.5;  // goals uniform in [-r, r]^2
};

class Navigation2DEnv {
public:
    explicit Navigation2DEnv(Vec2 goal, NavigationParams params = {});

    struct Step {
        Vec2 next_state;
        double reward;
        bool done;
    };

    // s = (0, 0), t = 0.
    void reset();
    // s' = s + clip(a); r = -||s' - g||; done at the horizon or inside the goal radius.
    Step step(const Vec2& action);

    const Vec2& state() const noexcept { return state_; }
    const Vec2& goal() const noexcept { return goal_; }
    std::size_t elapsed() const noexcept { return t_; }
    const NavigationParams& params() const noexcept { return params_; }

private:
    Vec2 goal_;
    NavigationParams params_;
    Vec2 state_{0.0, 0.0};
    std::size_t t_ = 0;
};

Vec2 sample_goal(Rng& rng, const NavigationParams& params = {});

// ---- policy ----------------------------------------------------------------------

// Mean network plus a learned log standard deviation, which is part of theta
// for the outer loop but never touched by context adaptation.
struct GaussianPolicy {
    models::ContextModel mean;
    Array log_std;  // [action_dim]

    // All meta-learned tensors: the network's theta followed by log_std.
    std::vector<Array> meta_parameters() const;
    void set_meta_parameters(const std::vector<Array>& values);
};

// State in, action mean out; 2 hidden ReLU layers of `hidden` units with the
// context concatenated to the input. With `meta_learned_context` the context
// slot holds meta-learned input biases instead (MAML with extra inputs).
GaussianPolicy make_navigation_policy(std::size_t context_dim, std::uint64_t seed, std::size_t hidden = 100,
                                      bool meta_learned_context = false);

// ---- trajectories ----------------------------------------------------------------

// A batch of episodes stored step by step. Episode e covers rows
// [segment_begin[e], segment_begin[e+1]).
struct Trajectory {
    Array states;       // [T x 2] state each action was taken in
    Array actions;      // [T x 2] sampled (unclipped) actions
    Array next_states;  // [T x 2]
    std::vector<double> rewards;
    std::vector<std::size_t> segment_begin;  // size episodes() + 1, last entry = T

    std::size_t steps() const noexcept { return rewards.size(); }
    std::size_t episodes() const noexcept { return segment_begin.empty() ? 0 : segment_begin.size() - 1; }
    // Undiscounted return of each episode.
    std::vector<double> episode_returns() const;
    double mean_episode_return() const;
};

// Runs ceil(M / H) episodes side by side with the policy's current context;
// the last one is cut short if H does not divide M. Episodes that reach the
// goal stop early, so the trajectory may hold fewer than M steps. Noise is
// drawn step by step, episode by episode, so the result is a pure function of
// (policy, goal, M, rng state).
Trajectory collect_rollout(const GaussianPolicy& policy, const Vec2& goal, std::size_t interactions, Rng& rng,
                           const NavigationParams& params = {});

// ---- returns and objective ------------------------------------------------------

enum class Baseline { none, trajectory_mean, per_timestep };

// G_t = r_t + gamma G_{t+1} inside each episode.
std::vector<double> reward_to_go(const Trajectory& tau, double gamma);

// episode_mean: (1/E) sum_e (1/H_e) sum_t; episode_sum: (1/E) sum_e sum_t.
enum class Reduction { episode_mean, episode_sum };

// (G_t - b) / E per step, further divided by the episode length under
// Reduction::episode_mean: the weights multiplying log pi in the objective.
std::vector<double> advantage_weights(const Trajectory& tau, double gamma, Baseline baseline,
                                      Reduction reduction = Reduction::episode_mean);

struct ObjectiveSettings {
    double gamma = 0.99;
    Baseline baseline = Baseline::trajectory_mean;
    Reduction reduction = Reduction::episode_mean;
};

// Sum over steps of log pi(a_t | s_t) times the constant advantage weights.
// `theta` is the mean network's theta (layout order), `log_std` and `context`
// as for the policy; all three may be graph-connected.
ad::Tensor pg_objective(const Trajectory& tau, const models::Architecture& arch, std::span<const ad::Tensor> theta,
                        ad::Tensor log_std, ad::Tensor context, const ObjectiveSettings& settings = {});

// Diagonal-Gaussian log-density of each action row, [T].
ad::Tensor log_prob(ad::Tensor mean, ad::Tensor log_std, ad::Tensor actions);

// ---- inner and outer loops ------------------------------------------------------

struct RLConfig {
    meta::Algorithm algorithm = meta::Algorithm::cavia;
    double inner_lr = 1.0;
    std::size_t meta_batch = 20;
    std::size_t episodes_per_task = 20;  // rollouts per inner / outer sample
    bool first_order = false;
    ObjectiveSettings objective;
    NavigationParams env;
    optim::AdamConfig adam{.lr = 1e-2};
    std::size_t workers = 1;

    std::size_t interactions() const { return episodes_per_task * env.horizon; }
    void validate() const;  // throws ConfigError
};

// phi_i = phi_0 + alpha grad_phi J(tau_train). Ascent. Returns a graph tensor.
ad::Tensor rl_adapt_context(const models::Architecture& arch, std::span<const ad::Tensor> theta, ad::Tensor log_std,
                            ad::Tensor phi0, const Trajectory& tau, double alpha, bool track_meta_graph,
                            const ObjectiveSettings& settings = {});

// Value-level single ascent step from phi = 0. Requires the policy's phi to be zero.
Array rl_inner_adapt(const GaussianPolicy& policy, const Trajectory& tau, double alpha,
                     const ObjectiveSettings& settings = {});

struct RLStepDiagnostics {
    std::int64_t iteration = 0;
    double pre_return = 0.0;   // mean episode return before adaptation
    double post_return = 0.0;  // after one update
    double grad_norm = 0.0;
};

struct RLMetaGradient {
    std::vector<Array> grads;  // d(mean post-update objective)/d(meta_parameters), ascent direction
    double pre_return = 0.0;
    double post_return = 0.0;
};

// Meta-gradient over the given goals. Task i draws its rollouts from
// task_rngs[i]; the result is summed pairwise in task order.
RLMetaGradient rl_meta_gradient(const GaussianPolicy& policy, std::span<const Vec2> goals,
                                std::span<Rng> task_rngs, const RLConfig& config);

// One outer ascent step with Adam on theta and log_std. Rollout streams are
// derived from (seed, iteration, task index).
RLStepDiagnostics rl_meta_step(GaussianPolicy& policy, std::span<const Vec2> goals, const RLConfig& config,
                               optim::Adam& adam, std::uint64_t seed, std::int64_t iteration);

struct RLEvaluation {
    // returns[g][s]: mean episode return on goal g after s updates, s = 0..steps.
    std::vector<std::vector<double>> returns;
    // contexts[g][s]: phi after s updates (CAVIA only).
    std::vector<std::vector<Array>> contexts;
};

// Fresh rollouts for every step. CAVIA keeps alpha constant; MAML halves it
// after the first update.
RLEvaluation rl_adapt_and_eval(const GaussianPolicy& policy, std::span<const Vec2> goals, meta::Algorithm algorithm,
                               double alpha, int steps, std::size_t episodes, std::uint64_t seed,
                               const NavigationParams& env = {}, const ObjectiveSettings& settings = {});

// ---- dumps -----------------------------------------------------------------------

void write_trajectories_csv(std::ostream& os, std::span<const Trajectory> trajectories);
void write_embeddings_csv(std::ostream& os, std::span<const Vec2> goals, std::span<const Array> contexts);

}  // namespace cavia::rl
