// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any selected criterion fails.
//
//   acceptance [--work DIR] [--only 1,2,9]
//
// Training runs are shared between criteria and cached for the lifetime of the
// process; criterion 12 repeats every run that was executed into DIR/rerun and
// compares the metric CSVs byte for byte.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cavia/checkpoint.hpp"
#include "cavia/errors.hpp"
#include "cavia/experiment.hpp"
#include "cavia/metarl.hpp"
#include "cavia/metasup.hpp"
#include "test_util.hpp"

using namespace cavia;
namespace fs = std::filesystem;
using cavia::testing::fd_gradient;
using cavia::testing::random_array;
using cavia::testing::rel_err;

namespace {

// ---- pinned tolerances and budgets -------------------------------------------------

constexpr double kFirstOrderTol = 1e-6;
constexpr double kSecondOrderTol = 1e-4;
constexpr int kOracleMinInstances = 100;
constexpr double kOracleMaxSeconds = 120;

constexpr double kIdentityTol = 1e-12;

constexpr double kSineMseMax = 0.30;
constexpr double kSineMaxSeconds = 30 * 60;

constexpr double kK1OverK2Min = 2.0;
constexpr double kK2to5SpreadMax = 1.25;
constexpr double kOrderingMaxSeconds = 2 * 3600;

constexpr double kCaviaLrSpreadMax = 3.0;
constexpr double kMamlLrSpreadMin = 10.0;
constexpr double kSweepMaxSeconds = 4 * 3600;
const std::vector<double> kSweepLrs = {0.01, 0.1, 1.0, 10.0};

constexpr double kLrTimesNormSpreadMax = 10.0;
constexpr std::size_t kGradNormTasks = 1000;

constexpr double kR2Min = 0.7;
constexpr std::size_t kSineEmbedTasks = 1000;
constexpr std::size_t kNavEmbedTasks = 200;

constexpr double kStepIncreaseMax = 0.10;

constexpr double kNavImprovedFractionMin = 0.90;
constexpr double kNavDeficitReductionMin = 0.20;
constexpr double kNavMaxSeconds = 3600;

constexpr double kFewShotAccuracyMin = 0.60;

// ---- run bookkeeping -----------------------------------------------------------------

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

fs::path g_work;

struct Job {
    std::string name;
    std::function<void(const fs::path& root)> replay;
};
std::vector<Job> g_jobs;  // every run executed so far, in order

struct TrainEval {
    fs::path dir;
    exp::RunConfig config;
    exp::EvalOutcome eval;
    double seconds = 0.0;
};
std::map<std::string, TrainEval> g_runs;

exp::RunConfig config_of(std::initializer_list<std::pair<const char*, std::string>> entries) {
    KeyValues kv;
    for (const auto& [k, v] : entries) kv.set(k, v);
    return exp::RunConfig::from_key_values(kv);
}

// Trains, then evaluates the best checkpoint. Memoised by name.
const TrainEval& train_eval(const std::string& name, const exp::RunConfig& cfg) {
    if (auto it = g_runs.find(name); it != g_runs.end()) return it->second;
    auto body = [cfg, name](const fs::path& root) {
        const fs::path dir = root / name;
        fs::remove_all(dir);
        const exp::TrainOutcome t = exp::train(cfg, dir);
        return exp::evaluate(cfg, t.best_checkpoint, dir);
    };
    std::printf("  .. run %s\n", name.c_str());
    std::fflush(stdout);
    const auto t0 = Clock::now();
    TrainEval r{g_work / name, cfg, body(g_work), 0.0};
    r.seconds = since(t0);
    std::printf("  .. run %s done in %.0f s\n", name.c_str(), r.seconds);
    std::fflush(stdout);
    g_jobs.push_back({name, [body](const fs::path& root) { body(root); }});
    return g_runs.emplace(name, std::move(r)).first->second;
}

// Mean metric for (shots, step) from an evaluation summary.
double summary_mean(const exp::EvalOutcome& e, std::size_t shots, int step) {
    for (const auto& r : e.summary)
        if (r.shots == shots && r.step == step) return r.value.mean;
    throw ContractError("evaluation has no row for shots " + std::to_string(shots) + " step " + std::to_string(step));
}

double summary_accuracy(const exp::EvalOutcome& e, int step) {
    for (const auto& r : e.summary)
        if (r.step == step) return r.accuracy.mean;
    throw ContractError("evaluation has no row for step " + std::to_string(step));
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

// ---- criterion 1: gradient oracles -------------------------------------------------------

using Builder = std::function<ad::Tensor(ad::Graph&, const std::vector<ad::Tensor>&)>;

double worst_first_order(const Builder& build, const std::vector<Array>& inputs) {
    ad::Graph g;
    std::vector<ad::Tensor> ts;
    for (const auto& a : inputs) ts.push_back(g.leaf(a));
    const auto gm = ad::grad(build(g, ts), ts, false);
    auto f = [&](const std::vector<Array>& in) {
        ad::Graph h;
        ad::Graph::NoRecordGuard off(h);
        std::vector<ad::Tensor> hs;
        for (const auto& a : in) hs.push_back(h.constant(a));
        return build(h, hs).item();
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        worst = std::max(worst, rel_err(gm[ts[i]].value(), fd_gradient(f, inputs, i)));
    return worst;
}

Array flatten(const std::vector<Array>& parts) {
    Array out(Shape{0});
    for (const auto& p : parts) out.data.insert(out.data.end(), p.data.begin(), p.data.end());
    out.shape = {out.data.size()};
    return out;
}

// Mean post-adaptation test loss from values only, and its central differences in theta.
double post_loss(const models::ContextModel& m, std::span<const tasks::SupervisedTask> batch,
                 const meta::MetaConfig& cfg) {
    double total = 0.0;
    for (const auto& t : batch)
        total += meta::adapt_and_eval(m, t, cfg.algorithm, cfg.inner_lr, cfg.inner_steps).loss.back();
    return total / static_cast<double>(batch.size());
}

Array fd_meta_gradient(const models::ContextModel& model, std::span<const tasks::SupervisedTask> batch,
                       const meta::MetaConfig& cfg) {
    constexpr double h = 1e-5;
    models::ContextModel probe = model;
    std::vector<double> out;
    for (std::size_t p = 0; p < probe.theta().size(); ++p)
        for (std::size_t i = 0; i < probe.theta()[p].size(); ++i) {
            double& slot = probe.theta()[p][i];
            const double keep = slot;
            slot = keep + h;
            const double up = post_loss(probe, batch, cfg);
            slot = keep - h;
            const double down = post_loss(probe, batch, cfg);
            slot = keep;
            out.push_back((up - down) / (2 * h));
        }
    return Array::vector(std::move(out));
}

double rl_objective_value(const rl::GaussianPolicy& p, const rl::Trajectory& tau) {
    ad::Graph g;
    const auto theta = p.mean.bind_theta(g, false);
    return rl::pg_objective(tau, p.mean.architecture(), theta, g.constant(p.log_std), g.constant(p.mean.phi()))
        .item();
}

rl::GaussianPolicy small_policy(std::size_t k, std::uint64_t seed) {
    rl::GaussianPolicy p = rl::make_navigation_policy(k, seed, 12);
    p.log_std = Array::vector({-0.3, 0.2});
    return p;
}

Verdict criterion_oracles() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(20240601);
    int instances = 0;
    double worst1 = 0.0, worst2 = 0.0;
    std::map<std::string, double> by_group;
    std::string group;
    auto note = [&](double e) {
        by_group[group] = std::max(by_group[group], e);
        ++instances;
    };
    auto first = [&](double e) { worst1 = std::max(worst1, e), note(e); };
    auto second = [&](double e) { worst2 = std::max(worst2, e), note(e); };

    // Autodiff, first order: four expression families covering every op.
    const std::vector<int> labels = {0, 3, 1, 2};
    const std::vector<std::pair<Builder, std::vector<Shape>>> families = {
        {[](ad::Graph& g, const std::vector<ad::Tensor>& p) {
             const ad::Tensor h = ad::tanh(ad::add(ad::matmul(p[0], p[1]), p[2]));
             return ad::loss_mse(ad::matmul(h, p[3]), g.constant(Array(Shape{4, 2}, 0.25)));
         },
         {{4, 3}, {3, 5}, {5}, {5, 2}}},
        {[](ad::Graph&, const std::vector<ad::Tensor>& p) {
             const ad::Tensor c = ad::slice_last_axis(ad::concat_last_axis(p[0], p[1]), 1, 3);
             return ad::sum(ad::mul(ad::exp(ad::scale(p[0], 0.3)), c));
         },
         {{4, 3}, {4, 2}}},
        {[&labels](ad::Graph&, const std::vector<ad::Tensor>& p) {
             const ad::Tensor logits = ad::add(ad::matmul(p[0], p[1]), p[2]);
             return ad::add(ad::loss_softmax_xent(logits, labels),
                            ad::mean(ad::square(ad::reshape(ad::sum(logits, 1), {2, 2}))));
         },
         {{4, 3}, {3, 4}, {4}}},
        {[](ad::Graph&, const std::vector<ad::Tensor>& p) {
             const ad::Tensor m = ad::matmul(p[0], p[1], true, false);
             const ad::Tensor n = ad::matmul(m, p[2], false, true);
             return ad::sum(ad::affine(ad::square(n), 0.5, 1.0));
         },
         {{3, 4}, {3, 2}, {5, 2}}},
    };
    group = "autodiff";
    for (int i = 0; i < 60; ++i) {
        const auto& [build, shapes] = families[i % families.size()];
        std::vector<Array> inputs;
        for (const auto& s : shapes) inputs.push_back(random_array(rng, s));
        first(worst_first_order(build, inputs));
    }

    // Autodiff, second order: loss after one inner step on a context input.
    group = "inner-step";
    for (int i = 0; i < 20; ++i) {
        const Array x = random_array(rng, {6, 2}), y = random_array(rng, {6, 1});
        auto outer = [&](ad::Graph& g, const std::vector<ad::Tensor>& p, bool retain) {
            auto loss_at = [&](ad::Tensor ctx) {
                const ad::Tensor h = ad::tanh(ad::add(ad::matmul(ad::concat_last_axis(g.constant(x), ctx), p[0]), p[1]));
                return ad::loss_mse(ad::matmul(h, p[2]), g.constant(y));
            };
            const ad::Tensor gphi = ad::grad(loss_at(p[3]), {p[3]}, retain)[p[3]];
            return loss_at(ad::sub(p[3], ad::scale(gphi, 0.3)));
        };
        std::vector<Array> in = {random_array(rng, {5, 4}), random_array(rng, {4}), random_array(rng, {4, 1}),
                                 random_array(rng, {3}, -0.5, 0.5)};
        ad::Graph g;
        std::vector<ad::Tensor> ts;
        for (const auto& a : in) ts.push_back(g.leaf(a));
        const auto gm = ad::grad(outer(g, ts, true), {ts[0], ts[1], ts[2]}, false);
        auto f = [&](const std::vector<Array>& v) {
            ad::Graph h;
            std::vector<ad::Tensor> hs;
            for (const auto& a : v) hs.push_back(h.leaf(a));
            return outer(h, hs, false).item();
        };
        double w = 0.0;
        for (std::size_t k = 0; k < 3; ++k) w = std::max(w, rel_err(gm[ts[k]].value(), fd_gradient(f, in, k)));
        second(w);
    }

    // Supervised meta-gradients: CAVIA with concatenation, CAVIA with FiLM, MAML.
    auto sine_batch = [&](std::size_t n) {
        std::vector<tasks::SupervisedTask> b;
        for (std::size_t i = 0; i < n; ++i) b.push_back(tasks::sample_sine_task(rng, 10, 10));
        return b;
    };
    group = "cavia-concat";
    for (int i = 0; i < 8; ++i) {
        models::Architecture arch;
        arch.hidden = {6, 6};
        arch.context_dim = 2;
        arch.activation = models::Activation::tanh;
        const auto model = models::init_theta(arch, rng());
        const auto batch = sine_batch(3);
        meta::MetaConfig cfg;
        cfg.context_dim = 2;
        cfg.inner_lr = 0.5;
        cfg.inner_steps = 1 + i % 2;
        second(rel_err(flatten(meta::meta_gradient(model, batch, cfg).grads), fd_meta_gradient(model, batch, cfg)));
    }
    tasks::ClassPoolConfig pc;
    pc.dim = 4;
    pc.train_classes = pc.val_classes = pc.test_classes = 10;
    const tasks::ClassPools pools(pc);
    group = "cavia-film";
    for (int i = 0; i < 4; ++i) {
        models::Architecture arch;
        arch.input_dim = 4;
        arch.output_dim = 3;
        arch.hidden = {6, 6};
        arch.context_dim = 3;
        arch.conditioning = models::Conditioning::film_at_layer;
        arch.film_layer = static_cast<std::size_t>(i % 2);
        arch.activation = models::Activation::tanh;
        models::ContextModel model = models::init_theta(arch, rng());
        // Move the FiLM generator away from its identity initialisation.
        for (double& v : model.theta().at("film.weight").data) v = std::normal_distribution<double>(0, 0.3)(rng);
        std::vector<tasks::SupervisedTask> batch;
        for (int t = 0; t < 2; ++t)
            batch.push_back(tasks::sample_classification_episode(rng, pools, 3, 2, 3, tasks::Split::train).as_task());
        meta::MetaConfig cfg;
        cfg.context_dim = 3;
        cfg.inner_lr = 0.5;
        cfg.inner_steps = 2;
        second(rel_err(flatten(meta::meta_gradient(model, batch, cfg).grads), fd_meta_gradient(model, batch, cfg)));
    }
    group = "maml";
    for (int i = 0; i < 4; ++i) {
        models::Architecture arch;
        arch.hidden = {6, 6};
        arch.context_dim = i % 2 ? 2 : 0;
        arch.activation = models::Activation::tanh;
        arch.context_role = models::ContextRole::meta_learned;
        const auto model = models::init_theta(arch, rng());
        const auto batch = sine_batch(2);
        meta::MetaConfig cfg;
        cfg.algorithm = meta::Algorithm::maml;
        cfg.inner_lr = 0.05;
        cfg.inner_steps = 1 + i % 2;
        second(rel_err(flatten(meta::meta_gradient(model, batch, cfg).grads), fd_meta_gradient(model, batch, cfg)));
    }

    // Policy gradient: surrogate gradients on frozen rollouts, then through the ascent step.
    group = "pg-surrogate";
    for (int i = 0; i < 6; ++i) {
        rl::GaussianPolicy p = small_policy(3, rng());
        rl::Rng r(rng());
        const rl::Trajectory tau = rl::collect_rollout(p, rl::sample_goal(r), 200, r);
        p.mean.set_phi(random_array(rng, {3}, -0.3, 0.3));
        const auto arch = p.mean.architecture();
        ad::Graph g;
        const auto theta = p.mean.bind_theta(g, true);
        const ad::Tensor ls = g.leaf(p.log_std), phi = g.leaf(p.mean.phi());
        const auto gr = ad::grad(rl::pg_objective(tau, arch, theta, ls, phi), {phi, ls, theta[0]}, false);
        auto f = [&](const std::vector<Array>& in) {
            rl::GaussianPolicy q = p;
            q.mean.set_phi(in[0]);
            q.log_std = in[1];
            q.mean.theta()[0] = in[2];
            return rl_objective_value(q, tau);
        };
        // ReLU kinks: a smaller difference step keeps perturbations off the kinks.
        const std::vector<Array> at = {p.mean.phi(), p.log_std, p.mean.theta()[0]};
        double w = 0.0;
        w = std::max(w, rel_err(gr[phi].value(), fd_gradient(f, at, 0, 1e-6)));
        w = std::max(w, rel_err(gr[ls].value(), fd_gradient(f, at, 1, 1e-6)));
        w = std::max(w, rel_err(gr[theta[0]].value(), fd_gradient(f, at, 2, 1e-6)));
        first(w);
    }
    group = "pg-through-ascent";
    for (int i = 0; i < 4; ++i) {
        rl::GaussianPolicy p = small_policy(2, rng());
        rl::Rng r(rng());
        const rl::Vec2 goal = rl::sample_goal(r);
        const rl::Trajectory train = rl::collect_rollout(p, goal, 200, r);
        const rl::Trajectory test = rl::collect_rollout(p, goal, 200, r);
        const auto arch = p.mean.architecture();
        ad::Graph g;
        const auto theta = p.mean.bind_theta(g, true);
        const ad::Tensor ls = g.leaf(p.log_std, true), phi0 = g.leaf(p.mean.phi(), true);
        const ad::Tensor phi = rl::rl_adapt_context(arch, theta, ls, phi0, train, 0.5, true);
        const auto gr = ad::grad(rl::pg_objective(test, arch, theta, ls, phi), {theta[2], ls}, false);
        auto f = [&](const std::vector<Array>& in) {
            rl::GaussianPolicy q = p;
            q.mean.theta()[2] = in[0];
            q.log_std = in[1];
            q.mean.set_phi(rl::rl_inner_adapt(q, train, 0.5));
            return rl_objective_value(q, test);
        };
        const std::vector<Array> at = {p.mean.theta()[2], p.log_std};
        // The ascent step multiplies ReLU kinks into large curvature; 1e-5 steps straddle them.
        second(std::max(rel_err(gr[theta[2]].value(), fd_gradient(f, at, 0, 1e-7)),
                        rel_err(gr[ls].value(), fd_gradient(f, at, 1, 1e-7))));
    }

    const double secs = since(t0);
    std::string groups;
    for (const auto& [name, e] : by_group) groups += fmt(" %s %.1e", name.c_str(), e);
    const bool pass = instances >= kOracleMinInstances && worst1 < kFirstOrderTol && worst2 < kSecondOrderTol &&
                      secs < kOracleMaxSeconds;
    return {pass, fmt("%d instances (>= %d); worst first-order rel err %.2e (< %.0e); worst second-order %.2e "
                      "(< %.0e); by family [%s ]; %.1f s (< %.0f s)",
                      instances, kOracleMinInstances, worst1, kFirstOrderTol, worst2, kSecondOrderTol, groups.c_str(), secs,
                      kOracleMaxSeconds)};
}

// ---- criterion 2: exact identities ---------------------------------------------------------

// Plain-array MLP forward with the same weights, no context path at all.
Array plain_forward(const models::ContextModel& m, const Array& x) {
    const auto& arch = m.architecture();
    Array h = x;
    const std::size_t layers = arch.hidden.size() + 1;
    for (std::size_t l = 0; l < layers; ++l) {
        const Array& w = m.theta().at("layer" + std::to_string(l) + ".weight");
        const Array& b = m.theta().at("layer" + std::to_string(l) + ".bias");
        Array next(Shape{h.rows(), w.cols()}, 0.0);
        for (std::size_t r = 0; r < h.rows(); ++r)
            for (std::size_t c = 0; c < w.cols(); ++c) {
                double s = 0.0;
                for (std::size_t k = 0; k < w.rows(); ++k) s += h.at(r, k) * w.at(k, c);
                next.at(r, c) = s + b[c];
                if (l + 1 < layers) next.at(r, c) = std::max(0.0, next.at(r, c));
            }
        h = std::move(next);
    }
    return h;
}

Verdict criterion_identities() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(77);
    double bias = 0.0, film = 0.0, alpha0_grad = 0.0, alpha0_phi = 0.0;
    bool rtg_exact = true;
    std::size_t rtg_checked = 0;

    for (int i = 0; i < 50; ++i) {
        models::Architecture arch;
        arch.input_dim = 1 + i % 3;
        arch.hidden = {8, 8};
        arch.context_dim = 1 + i % 5;
        const auto model = models::init_theta(arch, rng());
        const Array c = random_array(rng, {arch.context_dim});
        const Array x = random_array(rng, {7, arch.input_dim});
        const auto [a, b] = models::shift_equivalence_witness(model, c, x);
        bias = std::max(bias, cavia::testing::max_abs_diff(a, b));
    }
    for (int i = 0; i < 20; ++i) {
        models::Architecture arch;
        arch.input_dim = 3;
        arch.output_dim = 2;
        arch.hidden = {8, 8, 8};
        arch.context_dim = 4;
        arch.conditioning = models::Conditioning::film_at_layer;
        arch.film_layer = static_cast<std::size_t>(i % 3);
        models::ContextModel model = models::init_theta(arch, rng());
        for (double& v : model.theta().at("film.weight").data) v = std::normal_distribution<double>(0, 1)(rng);
        const Array x = random_array(rng, {5, 3});
        film = std::max(film, cavia::testing::max_abs_diff(model.forward(x), plain_forward(model, x)));
    }
    for (int i = 0; i < 10; ++i) {
        models::Architecture arch;
        arch.hidden = {10, 10};
        arch.context_dim = 3;
        const auto model = models::init_theta(arch, rng());
        std::vector<tasks::SupervisedTask> batch;
        for (int t = 0; t < 4; ++t) batch.push_back(tasks::sample_sine_task(rng, 10, 10));
        for (const auto& t : batch)
            for (double v : meta::inner_adapt(model, t.train, tasks::LossKind::mse, 0.0, 2).data)
                alpha0_phi = std::max(alpha0_phi, std::abs(v));
        meta::MetaConfig cfg;
        cfg.context_dim = 3;
        cfg.inner_lr = 0.0;
        const auto mg = meta::meta_gradient(model, batch, cfg);
        // Multitask gradient: d/dtheta of the mean test loss at phi = 0.
        ad::Graph g;
        const auto theta = model.bind_theta(g, true);
        ad::Tensor total;
        for (const auto& t : batch) {
            const ad::Tensor l = meta::task_loss(
                models::forward(arch, theta, g.constant(model.phi()), g.constant(t.test.x)), t.test, t.loss);
            total = total.valid() ? ad::add(total, l) : l;
        }
        const auto gm = ad::grad(ad::scale(total, 1.0 / batch.size()), theta, false);
        for (std::size_t p = 0; p < theta.size(); ++p)
            alpha0_grad = std::max(alpha0_grad, cavia::testing::max_abs_diff(mg.grads[p], gm[theta[p]].value()));
    }
    for (int i = 0; i < 10; ++i) {
        const rl::GaussianPolicy p = rl::make_navigation_policy(2, rng(), 16);
        rl::Rng r(rng());
        const rl::Trajectory tau = rl::collect_rollout(p, rl::sample_goal(r), 300, r);
        for (double v : rl::rl_inner_adapt(p, tau, 0.0).data) alpha0_phi = std::max(alpha0_phi, std::abs(v));
        for (double gamma : {0.0, 0.9, 0.99, 1.0}) {
            const auto g = rl::reward_to_go(tau, gamma);
            for (std::size_t e = 0; e < tau.episodes(); ++e) {
                const std::size_t lo = tau.segment_begin[e], hi = tau.segment_begin[e + 1];
                for (std::size_t t = lo; t < hi; ++t) {
                    const double next = t + 1 < hi ? g[t + 1] : 0.0;
                    rtg_exact = rtg_exact && g[t] == tau.rewards[t] + gamma * next;
                    ++rtg_checked;
                }
            }
        }
    }
    const bool pass = bias <= kIdentityTol && film <= kIdentityTol && alpha0_grad <= kIdentityTol &&
                      alpha0_phi == 0.0 && rtg_exact;
    return {pass, fmt("bias subsumption %.1e, FiLM@phi=0 %.1e, alpha=0 multitask gradient %.1e (all <= %.0e); "
                      "alpha=0 |phi_i| max %.1e (== 0); reward-to-go recursion exact on %zu steps: %s; %.1f s",
                      bias, film, alpha0_grad, kIdentityTol, alpha0_phi, rtg_checked, rtg_exact ? "yes" : "no",
                      since(t0))};
}

// ---- criteria 3-11: training runs ---------------------------------------------------------------

exp::RunConfig sine(std::size_t k, const char* algorithm = "cavia") {
    return config_of({{"suite", "sine"}, {"algorithm", algorithm}, {"context_dim", std::to_string(k)}});
}

Verdict criterion_sine_target() {
    const auto& r = train_eval("sine_cavia_k5", sine(5));
    const double mse = summary_mean(r.eval, 10, 1);
    return {mse <= kSineMseMax && r.seconds <= kSineMaxSeconds,
            fmt("test MSE after 1 step over %zu tasks = %.5f (<= %.2f); train+eval %.0f s (<= %.0f s)",
                r.config.eval_tasks, mse, kSineMseMax, r.seconds, kSineMaxSeconds)};
}

Verdict criterion_sine_ordering() {
    std::vector<double> mse(6);
    double secs = 0.0;
    for (std::size_t k = 1; k <= 5; ++k) {
        const auto& r = train_eval("sine_cavia_k" + std::to_string(k), sine(k));
        mse[k] = summary_mean(r.eval, 10, 1);
        secs += r.seconds;
    }
    // MAML diverges on sine at CAVIA's alpha = 1 (see the sweep); 0.01 is its working rate.
    exp::RunConfig maml_cfg = sine(5, "maml");
    maml_cfg.meta.inner_lr = 0.01;
    const auto& m = train_eval("sine_maml_k5", maml_cfg);
    const double maml = summary_mean(m.eval, 10, 1);
    secs += m.seconds;
    const double lo = *std::min_element(mse.begin() + 2, mse.end());
    const double hi = *std::max_element(mse.begin() + 2, mse.end());
    const bool pass = mse[1] >= kK1OverK2Min * mse[2] && hi / lo <= kK2to5SpreadMax && mse[5] <= maml &&
                      secs <= kOrderingMaxSeconds;
    return {pass, fmt("MSE K=1..5: %.5f %.5f %.5f %.5f %.5f; K1/K2 = %.2f (>= %.1f); max/min K2..5 = %.3f (<= %.2f); "
                      "CAVIA K5 %.5f <= MAML+5 inputs (alpha 0.01) %.5f; runs %.0f s (<= %.0f s)",
                      mse[1], mse[2], mse[3], mse[4], mse[5], mse[1] / mse[2], kK1OverK2Min, hi / lo,
                      kK2to5SpreadMax, mse[5], maml, secs, kOrderingMaxSeconds)};
}

struct SweepResult {
    std::vector<exp::SweepCell> cells;
    double seconds = 0.0;
};
std::map<std::string, SweepResult> g_sweeps;

const SweepResult& lr_sweep(const std::string& name, const exp::RunConfig& base) {
    if (auto it = g_sweeps.find(name); it != g_sweeps.end()) return it->second;
    const exp::SweepSpec spec{"inner_lr", kSweepLrs, {base.meta.seed}};
    auto body = [base, spec, name](const fs::path& root) {
        fs::remove_all(root / name);
        return exp::sweep(base, spec, root / name);
    };
    std::printf("  .. sweep %s\n", name.c_str());
    std::fflush(stdout);
    const auto t0 = Clock::now();
    SweepResult r{body(g_work), 0.0};
    r.seconds = since(t0);
    g_jobs.push_back({name, [body](const fs::path& root) { body(root); }});
    return g_sweeps.emplace(name, std::move(r)).first->second;
}

Verdict criterion_lr_robustness() {
    const auto& cavia = lr_sweep("sweep_lr_cavia", sine(5));
    const auto& maml = lr_sweep("sweep_lr_maml", sine(0, "maml"));
    auto spread = [](const SweepResult& s, bool& any_diverged, std::string& list) {
        double lo = INFINITY, hi = 0.0;
        for (const auto& c : s.cells) {
            if (c.status != "ok") {
                any_diverged = any_diverged || c.status == "diverged";
                list += " " + exp::compact_number(c.value) + ":" + c.status;
                continue;
            }
            list += " " + exp::compact_number(c.value) + ":" + fmt("%.4g", c.post_loss);
            lo = std::min(lo, c.post_loss);
            hi = std::max(hi, c.post_loss);
        }
        return hi / lo;
    };
    bool cavia_div = false, maml_div = false;
    std::string cl, ml;
    const double cs = spread(cavia, cavia_div, cl), ms = spread(maml, maml_div, ml);
    const double secs = cavia.seconds + maml.seconds;
    const bool pass = !cavia_div && cs < kCaviaLrSpreadMax && (ms > kMamlLrSpreadMin || maml_div) &&
                      secs <= kSweepMaxSeconds;
    return {pass, fmt("CAVIA [%s ] worst/best %.2f (< %.0f); MAML [%s ] worst/best %.2f (> %.0f or a divergence: %s); "
                      "%.0f s (<= %.0f s)",
                      cl.c_str(), cs, kCaviaLrSpreadMax, ml.c_str(), ms, kMamlLrSpreadMin, maml_div ? "yes" : "no",
                      secs, kSweepMaxSeconds)};
}

Verdict criterion_gradnorm() {
    const auto& sw = lr_sweep("sweep_lr_cavia", sine(5));
    for (const auto& c : sw.cells)
        if (c.status != "ok") return {false, "sweep cell inner_lr=" + exp::compact_number(c.value) + " " + c.status};
    const exp::RunConfig base = sine(5);
    auto body = [base](const fs::path& root) {
        std::vector<std::pair<double, fs::path>> ckpts;
        for (double lr : kSweepLrs)
            ckpts.emplace_back(lr, root / "sweep_lr_cavia" / exp::sweep_cell_dir("inner_lr", lr, base.meta.seed) /
                                       "checkpoint_best.ckpt");
        return exp::gradnorm(base, ckpts, kGradNormTasks, root / "gradnorm");
    };
    const auto rows = body(g_work);
    g_jobs.push_back({"gradnorm", [body](const fs::path& root) { body(root); }});
    double lo = INFINITY, hi = 0.0;
    bool monotone = true;
    std::string list;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double prod = rows[i].inner_lr * rows[i].norm.mean;
        lo = std::min(lo, prod);
        hi = std::max(hi, prod);
        if (i && rows[i].norm.mean > rows[i - 1].norm.mean) monotone = false;
        list += fmt(" %g:%.4g", rows[i].inner_lr, rows[i].norm.mean);
    }
    return {hi / lo < kLrTimesNormSpreadMax && monotone,
            fmt("mean |grad phi| by lr [%s ]; lr x norm spread %.2f (< %.0f); non-increasing: %s", list.c_str(),
                hi / lo, kLrTimesNormSpreadMax, monotone ? "yes" : "no")};
}

exp::RunConfig nav(std::size_t k) { return config_of({{"suite", "nav2d"}, {"context_dim", std::to_string(k)}}); }

Verdict criterion_embedding() {
    const auto& s = train_eval("sine_cavia_k2", sine(2));
    const auto& n = train_eval("nav_cavia_k2", nav(2));
    auto embed_job = [](const std::string& name, const TrainEval& r, std::size_t tasks) {
        const exp::RunConfig cfg = r.config;
        const std::string run = r.dir.filename().string();
        auto body = [cfg, run, name, tasks](const fs::path& root) {
            return exp::embed(cfg, root / run / "checkpoint_best.ckpt", tasks, root / name);
        };
        auto out = body(g_work);
        g_jobs.push_back({name, [body](const fs::path& root) { body(root); }});
        return out;
    };
    const auto se = embed_job("embed_sine_k2", s, kSineEmbedTasks);
    const auto ne = embed_job("embed_nav_k2", n, kNavEmbedTasks);
    const bool pass = se.r2[0] > kR2Min && ne.r2[0] > kR2Min && ne.r2[1] > kR2Min;
    return {pass, fmt("sine K=2 amplitude R^2 %.3f (sin p %.3f, cos p %.3f) over %zu tasks; nav K=2 goal_x R^2 %.3f, "
                      "goal_y R^2 %.3f over %zu tasks; all required > %.1f",
                      se.r2[0], se.r2[1], se.r2[2], kSineEmbedTasks, ne.r2[0], ne.r2[1], kNavEmbedTasks, kR2Min)};
}

Verdict criterion_multistep() {
    const auto& r = train_eval("sine_cavia_k5", sine(5));
    std::vector<double> m;
    for (int s = 0; s <= r.config.eval_steps; ++s) m.push_back(summary_mean(r.eval, 10, s));
    bool pass = m.size() > 10 && m[1] <= m[0] && m[2] <= m[1];
    double worst = 0.0;
    for (std::size_t s = 1; s < m.size(); ++s) worst = std::max(worst, m[s] / m[s - 1] - 1.0);
    pass = pass && worst <= kStepIncreaseMax;
    std::string list;
    for (double v : m) list += fmt(" %.5f", v);
    return {pass, fmt("MSE steps 0..10 [%s ]; largest step-to-step increase %.1f%% (<= %.0f%%)", list.c_str(),
                      100 * worst, 100 * kStepIncreaseMax)};
}

Verdict criterion_navigation() {
    const auto& r = train_eval("nav_cavia_k5", nav(5));
    const auto& recs = r.eval.records;
    const std::size_t goals = r.eval.goals.size();
    std::vector<double> pre(goals), post(goals);
    for (const auto& rec : recs) {
        if (rec.step == 0) pre[rec.task] = rec.value;
        if (rec.step == 1) post[rec.task] = rec.value;
    }
    std::size_t improved = 0;
    double mpre = 0.0, mpost = 0.0;
    for (std::size_t g = 0; g < goals; ++g) {
        improved += post[g] > pre[g];
        mpre += pre[g] / goals;
        mpost += post[g] / goals;
    }
    // Returns are non-positive, so the deficit before adaptation is -mpre.
    const double frac = static_cast<double>(improved) / goals, reduction = (mpost - mpre) / -mpre;
    const bool pass = frac >= kNavImprovedFractionMin && reduction > kNavDeficitReductionMin &&
                      r.seconds <= kNavMaxSeconds;
    return {pass, fmt("one update improves %zu/%zu goals = %.0f%% (>= %.0f%%); mean return %.2f -> %.2f, deficit "
                      "reduced %.1f%% (> %.0f%%); train+eval %.0f s (<= %.0f s)",
                      improved, goals, 100 * frac, 100 * kNavImprovedFractionMin, mpre, mpost, 100 * reduction,
                      100 * kNavDeficitReductionMin, r.seconds, kNavMaxSeconds)};
}

Verdict criterion_first_order() {
    const auto& so = train_eval("fewshot_cavia_second_order", config_of({{"suite", "fewshot"}}));
    const auto& fo =
        train_eval("fewshot_cavia_first_order", config_of({{"suite", "fewshot"}, {"first_order", "true"}}));
    const int step = so.config.meta.inner_steps;
    const double a2 = summary_accuracy(so.eval, step), a1 = summary_accuracy(fo.eval, step);
    return {a2 >= a1 && a1 > kFewShotAccuracyMin && a2 > kFewShotAccuracyMin,
            fmt("5-way 1-shot accuracy after %d steps over %zu episodes: second order %.4f >= first order %.4f; both "
                "> %.2f",
                step, so.config.eval_tasks, a2, a1, kFewShotAccuracyMin)};
}

Verdict criterion_completion() {
    bool pass = true;
    std::string detail;
    for (const char* mode : {"random", "ordered"}) {
        const auto& r = train_eval(std::string("completion_") + mode,
                                   config_of({{"suite", "completion"}, {"pixel_mode", mode}}));
        const int step = r.config.meta.inner_steps;
        const double a = summary_mean(r.eval, 10, step), b = summary_mean(r.eval, 100, step),
                     c = summary_mean(r.eval, 1000, step);
        pass = pass && a > b && b > c;
        detail += fmt("%s: k=10 %.5f > k=100 %.5f > k=1000 %.5f; ", mode, a, b, c);
    }
    return {pass, detail + "strict decrease required"};
}

// ---- criterion 12: reruns ----------------------------------------------------------------------

std::vector<fs::path> metric_csvs(const fs::path& root) {
    std::vector<fs::path> out;
    if (!fs::exists(root)) return out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().filename() != "timing.csv")
            out.push_back(fs::relative(e.path(), root));
    std::sort(out.begin(), out.end());
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Verdict criterion_reproducibility() {
    if (g_jobs.empty()) return {false, "no runs were executed in this invocation; nothing to repeat"};
    const fs::path rerun = g_work / "rerun";
    fs::remove_all(rerun);
    std::size_t files = 0;
    std::vector<std::string> mismatched;
    for (const auto& job : g_jobs) {
        std::printf("  .. rerun %s\n", job.name.c_str());
        std::fflush(stdout);
        job.replay(rerun);
        const auto a = metric_csvs(g_work / job.name), b = metric_csvs(rerun / job.name);
        if (a != b || a.empty()) {
            mismatched.push_back(job.name + " (file sets differ)");
            continue;
        }
        for (const auto& f : a) {
            ++files;
            if (slurp(g_work / job.name / f) != slurp(rerun / job.name / f))
                mismatched.push_back((fs::path(job.name) / f).string());
        }
    }
    std::string list;
    for (const auto& m : mismatched) list += " " + m;
    return {mismatched.empty(), fmt("%zu runs repeated, %zu metric CSVs compared, %zu differ%s", g_jobs.size(), files,
                                    mismatched.size(), list.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance gate"};
    std::string work = "acceptance_work";
    std::vector<int> only;
    app.add_option("--work", work, "working directory for runs");
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    g_work = fs::absolute(work);
    fs::create_directories(g_work);

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
        {"gradient oracles", criterion_oracles},
        {"exact identities", criterion_identities},
        {"sine absolute target", criterion_sine_target},
        {"sine ordering over K and vs MAML", criterion_sine_ordering},
        {"inner learning-rate robustness", criterion_lr_robustness},
        {"gradient-norm compensation", criterion_gradnorm},
        {"embedding emergence", criterion_embedding},
        {"multi-step stability", criterion_multistep},
        {"navigation adaptation", criterion_navigation},
        {"first-order ablation", criterion_first_order},
        {"completion ordering", criterion_completion},
        {"reproducibility", criterion_reproducibility},
    };
    const std::set<int> selected(only.begin(), only.end());
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!selected.empty() && !selected.count(id)) continue;
        Verdict v;
        const auto t0 = Clock::now();
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failures += !v.pass;
        std::printf("%s %2d %s: %s [%.0f s]\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                    v.detail.c_str(), since(t0));
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
