#include "cavia/metasup.hpp"

#include <cmath>
#include <exception>
#include <thread>

#include "cavia/errors.hpp"

namespace cavia::meta {

using models::Architecture;
using models::ContextModel;
using tasks::Dataset;
using tasks::LossKind;
using tasks::SupervisedTask;

Algorithm parse_algorithm(const std::string& text) {
    if (text == "cavia") return Algorithm::cavia;
    if (text == "maml") return Algorithm::maml;
    throw ConfigError("unknown algorithm '" + text + "' (expected cavia or maml)");
}

const char* algorithm_name(Algorithm a) { return a == Algorithm::cavia ? "cavia" : "maml"; }

void MetaConfig::validate() const {
    if (!(inner_lr >= 0.0) || !std::isfinite(inner_lr)) throw ConfigError("inner learning rate must be >= 0");
    if (inner_steps < 1) throw ConfigError("inner_steps must be at least 1");
    if (meta_batch < 1) throw ConfigError("meta batch size must be at least 1");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    if (!(adam.lr > 0.0)) throw ConfigError("outer learning rate must be positive");
}

ad::Tensor task_loss(ad::Tensor pred, const Dataset& set, LossKind kind) {
    ad::Graph& g = *pred.graph();
    if (kind == LossKind::mse) return ad::loss_mse(pred, g.constant(set.y));
    const std::vector<int> labels = set.labels();
    return ad::loss_softmax_xent(pred, labels);
}

double accuracy(const Array& logits, const Dataset& set) {
    const std::vector<int> labels = set.labels();
    if (logits.rows() != labels.size()) throw DimensionError("logits and labels disagree in length");
    const std::size_t c = logits.cols();
    std::size_t hits = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits.at(r, j) > logits.at(r, best)) best = j;
        hits += static_cast<int>(best) == labels[r];
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace {

ad::Tensor checked_loss(const Architecture& arch, std::span<const ad::Tensor> theta, ad::Tensor context,
                        ad::Tensor x, const Dataset& set, LossKind kind, int step) {
    ad::Tensor loss;
    try {
        loss = task_loss(models::forward(arch, theta, context, x), set, kind);
    } catch (const NumericError& e) {
        throw DivergenceError(e.what(), step);
    }
    if (!std::isfinite(loss.item())) throw DivergenceError("non-finite task loss", step);
    return loss;
}

void require_zero_context(const ContextModel& model) {
    for (double v : model.phi().data)
        if (v != 0.0) throw ContractError("context must be reset to zero before adaptation");
}

}  // namespace

ad::Tensor adapt_context(const Architecture& arch, std::span<const ad::Tensor> theta, ad::Tensor phi0,
                         const Dataset& train, LossKind kind, double alpha, int steps, bool track_meta_graph,
                         double* first_loss) {
    ad::Graph& g = *phi0.graph();
    const ad::Tensor x = g.constant(train.x);
    ad::Tensor phi = phi0;
    for (int s = 0; s < steps; ++s) {
        const ad::Tensor loss = checked_loss(arch, theta, phi, x, train, kind, s);
        if (s == 0 && first_loss) *first_loss = loss.item();
        const auto gr = ad::grad(loss, {phi}, track_meta_graph);
        phi = ad::sub(phi, ad::scale(gr[phi], alpha));
    }
    return phi;
}

std::vector<ad::Tensor> adapt_parameters(const Architecture& arch, std::span<const ad::Tensor> theta,
                                         ad::Tensor context, const Dataset& train, LossKind kind, double alpha,
                                         int steps, bool track_meta_graph, double* first_loss) {
    if (theta.empty()) throw ContractError("no parameters to adapt");
    ad::Graph& g = *theta.front().graph();
    const ad::Tensor x = g.constant(train.x);
    std::vector<ad::Tensor> cur(theta.begin(), theta.end());
    for (int s = 0; s < steps; ++s) {
        const ad::Tensor loss = checked_loss(arch, cur, context, x, train, kind, s);
        if (s == 0 && first_loss) *first_loss = loss.item();
        const auto gr = ad::grad(loss, std::span<const ad::Tensor>(cur), track_meta_graph);
        for (auto& t : cur) t = ad::sub(t, ad::scale(gr[t], alpha));
    }
    return cur;
}

Array inner_adapt(const ContextModel& model, const Dataset& train, LossKind kind, double alpha, int steps) {
    require_zero_context(model);
    ad::Graph g;
    const auto theta = model.bind_theta(g, false);
    const ad::Tensor phi0 = g.leaf(model.phi(), true);
    return adapt_context(model.architecture(), theta, phi0, train, kind, alpha, steps, false).value();
}

models::ParamSet maml_inner_adapt(const ContextModel& model, const Dataset& train, LossKind kind, double alpha,
                                  int steps) {
    ad::Graph g;
    const auto theta = model.bind_theta(g, true);
    const auto adapted = adapt_parameters(model.architecture(), theta, g.constant(model.phi()), train, kind, alpha,
                                          steps, false);
    models::ParamSet out;
    for (std::size_t i = 0; i < adapted.size(); ++i) out.add(model.theta().name(i), adapted[i].value());
    return out;
}

// ---- outer loop ------------------------------------------------------------------

double MetaGradient::norm() const {
    double s = 0.0;
    for (const auto& g : grads) s += g.squared_norm();
    return std::sqrt(s);
}

Array pairwise_sum(std::span<const Array> terms) {
    if (terms.empty()) throw ContractError("pairwise_sum of nothing");
    if (terms.size() == 1) return terms.front();
    const std::size_t half = terms.size() / 2;
    Array a = pairwise_sum(terms.first(half));
    const Array b = pairwise_sum(terms.subspan(half));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

namespace {

struct TaskContribution {
    std::vector<Array> grads;
    double pre_loss = 0.0;
    double post_loss = 0.0;
};

TaskContribution task_meta_gradient(const ContextModel& model, const SupervisedTask& task, const MetaConfig& cfg) {
    const Architecture& arch = model.architecture();
    ad::Graph g;
    const auto theta = model.bind_theta(g, true);
    const bool track = !cfg.first_order;
    TaskContribution out;
    ad::Tensor test_loss;
    const ad::Tensor x_test = g.constant(task.test.x);
    if (cfg.algorithm == Algorithm::cavia) {
        const ad::Tensor phi0 = g.leaf(model.phi(), true);
        const ad::Tensor phi = adapt_context(arch, theta, phi0, task.train, task.loss, cfg.inner_lr,
                                             cfg.inner_steps, track, &out.pre_loss);
        test_loss = checked_loss(arch, theta, phi, x_test, task.test, task.loss, cfg.inner_steps);
    } else {
        const ad::Tensor context = g.constant(model.phi());
        const auto adapted = adapt_parameters(arch, theta, context, task.train, task.loss, cfg.inner_lr,
                                              cfg.inner_steps, track, &out.pre_loss);
        test_loss = checked_loss(arch, adapted, context, x_test, task.test, task.loss, cfg.inner_steps);
    }
    out.post_loss = test_loss.item();
    const auto gr = ad::grad(test_loss, theta, false);
    out.grads.reserve(theta.size());
    for (const auto& t : theta) out.grads.push_back(gr[t].value());
    return out;
}

}  // namespace

MetaGradient meta_gradient(const ContextModel& model, std::span<const SupervisedTask> batch, const MetaConfig& cfg) {
    cfg.validate();
    if (batch.empty()) throw ContractError("meta batch is empty");
    require_zero_context(model);
    if (cfg.algorithm == Algorithm::cavia && model.architecture().context_role != models::ContextRole::adapted)
        throw ConfigError("CAVIA needs a model whose context is adapted, not meta-learned");

    const std::size_t n = batch.size();
    std::vector<TaskContribution> parts(n);
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t i = first; i < n; i += stride) {
            try {
                parts[i] = task_meta_gradient(model, batch[i], cfg);
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

    MetaGradient mg;
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<Array> terms(n);
    for (std::size_t p = 0; p < model.theta().size(); ++p) {
        for (std::size_t i = 0; i < n; ++i) terms[i] = std::move(parts[i].grads[p]);
        Array total = pairwise_sum(terms);
        for (double& v : total.data) v *= inv_n;
        mg.grads.push_back(std::move(total));
    }
    std::vector<Array> pre(n), post(n);
    for (std::size_t i = 0; i < n; ++i) {
        pre[i] = Array::scalar(parts[i].pre_loss);
        post[i] = Array::scalar(parts[i].post_loss);
    }
    mg.pre_loss = pairwise_sum(pre).item() * inv_n;
    mg.post_loss = pairwise_sum(post).item() * inv_n;
    return mg;
}

StepDiagnostics meta_train_step(ContextModel& model, std::span<const SupervisedTask> batch, const MetaConfig& cfg,
                                optim::Adam& adam, std::int64_t iteration) {
    MetaGradient mg;
    try {
        mg = meta_gradient(model, batch, cfg);
    } catch (const DivergenceError& e) {
        throw DivergenceError(e.reason(), static_cast<long>(iteration), e.task_index());
    }
    if (!std::isfinite(mg.post_loss) || mg.post_loss > cfg.divergence_threshold)
        throw DivergenceError("meta-loss " + std::to_string(mg.post_loss) + " exceeds the divergence threshold",
                              static_cast<long>(iteration));
    const double norm = mg.norm();
    if (!std::isfinite(norm)) throw DivergenceError("non-finite meta-gradient", static_cast<long>(iteration));
    adam.step(model.theta().values(), mg.grads);
    model.reset_context();
    return {iteration, mg.pre_loss, mg.post_loss, norm};
}

// ---- evaluation ------------------------------------------------------------------

AdaptationCurve adapt_and_eval(const ContextModel& model, const SupervisedTask& task, Algorithm algorithm,
                               double alpha, int max_steps) {
    if (max_steps < 0) throw ContractError("max_steps must be non-negative");
    const Architecture& arch = model.architecture();
    const bool classify = task.loss == LossKind::cross_entropy;
    AdaptationCurve curve;
    ad::Graph g;
    const ad::Tensor x_train = g.constant(task.train.x);
    const ad::Tensor x_test = g.constant(task.test.x);
    auto score = [&](std::span<const ad::Tensor> theta, ad::Tensor context) {
        const ad::Tensor pred = models::forward(arch, theta, context, x_test);
        curve.loss.push_back(task_loss(pred, task.test, task.loss).item());
        if (classify) curve.accuracy.push_back(accuracy(pred.value(), task.test));
    };

    if (algorithm == Algorithm::cavia) {
        require_zero_context(model);
        const auto theta = model.bind_theta(g, false);
        ad::Tensor phi = g.leaf(model.phi(), true);
        score(theta, phi);
        for (int s = 0; s < max_steps; ++s) {
            const ad::Tensor loss = checked_loss(arch, theta, phi, x_train, task.train, task.loss, s);
            const auto gr = ad::grad(loss, {phi}, false);
            phi = g.leaf(ad::sub(phi, ad::scale(gr[phi], alpha)).value(), true);
            score(theta, phi);
        }
    } else {
        std::vector<ad::Tensor> theta = model.bind_theta(g, true);
        const ad::Tensor context = g.constant(model.phi());
        score(theta, context);
        for (int s = 0; s < max_steps; ++s) {
            const ad::Tensor loss = checked_loss(arch, theta, context, x_train, task.train, task.loss, s);
            const auto gr = ad::grad(loss, std::span<const ad::Tensor>(theta), false);
            for (auto& t : theta) t = g.leaf(ad::sub(t, ad::scale(gr[t], alpha)).value(), true);
            score(theta, context);
        }
    }
    return curve;
}

double context_gradient_norm(const ContextModel& model, const SupervisedTask& task) {
    require_zero_context(model);
    ad::Graph g;
    const auto theta = model.bind_theta(g, false);
    const ad::Tensor phi = g.leaf(model.phi(), true);
    const ad::Tensor loss =
        checked_loss(model.architecture(), theta, phi, g.constant(task.train.x), task.train, task.loss, 0);
    return std::sqrt(ad::grad(loss, {phi}, false)[phi].value().squared_norm());
}

}  // namespace cavia::meta
