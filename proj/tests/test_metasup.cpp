#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cavia/errors.hpp"
#include "cavia/metasup.hpp"
#include "test_util.hpp"

using namespace cavia;
using cavia::meta::Algorithm;
using cavia::meta::MetaConfig;
using cavia::models::Architecture;
using cavia::models::ContextModel;
using cavia::models::ParamSet;
using cavia::tasks::Dataset;
using cavia::tasks::LossKind;
using cavia::tasks::SupervisedTask;
using cavia::testing::rel_err;

namespace {

// f(x) = w x + v phi + b as a context model with no hidden layer.
ContextModel linear_context_model(double w, double v, double b) {
    Architecture arch;
    arch.hidden = {};
    arch.context_dim = 1;
    ParamSet theta;
    theta.add("layer0.weight", Array::matrix({{w}, {v}}));
    theta.add("layer0.bias", Array::vector({b}));
    return ContextModel(arch, theta);
}

Dataset points(std::vector<double> xs, std::vector<double> ys) {
    const std::size_t m = xs.size();
    return {Array::matrix(m, 1, std::move(xs)), Array::matrix(m, 1, std::move(ys))};
}

SupervisedTask single_point_task(double x1, double y1, double x2, double y2) {
    SupervisedTask t;
    t.train = points({x1}, {y1});
    t.test = points({x2}, {y2});
    return t;
}

Architecture small_arch(std::size_t k, models::ContextRole role = models::ContextRole::adapted) {
    Architecture arch;
    arch.hidden = {10, 10};
    arch.context_dim = k;
    arch.activation = models::Activation::tanh;
    arch.context_role = role;
    return arch;
}

std::vector<SupervisedTask> sine_batch(std::uint64_t seed, std::size_t n, std::size_t m_test = 10) {
    tasks::Rng rng(seed);
    std::vector<SupervisedTask> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(tasks::sample_sine_task(rng, 10, m_test));
    return out;
}

// Mean post-adaptation test loss computed from values only.
double post_loss_oracle(const ContextModel& model, std::span<const SupervisedTask> batch, const MetaConfig& cfg) {
    double total = 0.0;
    for (const auto& t : batch)
        total += meta::adapt_and_eval(model, t, cfg.algorithm, cfg.inner_lr, cfg.inner_steps).loss.back();
    return total / static_cast<double>(batch.size());
}

std::vector<Array> fd_meta_gradient(const ContextModel& model, std::span<const SupervisedTask> batch,
                                    const MetaConfig& cfg, double step = 1e-5) {
    ContextModel probe = model;
    std::vector<Array> out;
    for (std::size_t p = 0; p < probe.theta().size(); ++p) {
        Array g(probe.theta()[p].shape);
        for (std::size_t i = 0; i < g.size(); ++i) {
            double& slot = probe.theta()[p][i];
            const double keep = slot;
            slot = keep + step;
            const double up = post_loss_oracle(probe, batch, cfg);
            slot = keep - step;
            const double down = post_loss_oracle(probe, batch, cfg);
            slot = keep;
            g[i] = (up - down) / (2.0 * step);
        }
        out.push_back(std::move(g));
    }
    return out;
}

Array flatten(const std::vector<Array>& parts) {
    Array out(Shape{0});
    for (const auto& p : parts) out.data.insert(out.data.end(), p.data.begin(), p.data.end());
    out.shape = {out.data.size()};
    return out;
}

}  // namespace

TEST(InnerAdapt, ZeroStepSizeKeepsContextAtZero) {
    const ContextModel model = linear_context_model(1.0, 1.0, 0.0);
    const Array phi = meta::inner_adapt(model, points({1.0}, {2.0}), LossKind::mse, 0.0, 3);
    EXPECT_EQ(phi, Array::vector({0.0}));
}

TEST(InnerAdapt, OneStepOnScalarModel) {
    // loss = (1 - 2)^2, d/dphi = 2 (1 - 2) * 1 = -2, phi = 0 - 0.1 * -2.
    const ContextModel model = linear_context_model(1.0, 1.0, 0.0);
    const Array phi = meta::inner_adapt(model, points({1.0}, {2.0}), LossKind::mse, 0.1, 1);
    EXPECT_NEAR(phi.item(), 0.2, 1e-15);
}

TEST(InnerAdapt, TwoStepsMatchHandIteration) {
    const ContextModel model = linear_context_model(1.0, 1.0, 0.0);
    double phi = 0.0;
    for (int s = 0; s < 2; ++s) {
        const double pred = 1.0 * 1.0 + 1.0 * phi;
        phi -= 0.1 * 2.0 * (pred - 2.0) * 1.0;
    }
    EXPECT_NEAR(phi, 0.36, 1e-15);
    EXPECT_NEAR(meta::inner_adapt(model, points({1.0}, {2.0}), LossKind::mse, 0.1, 2).item(), phi, 1e-15);
}

TEST(InnerAdapt, ThetaUntouchedAndNeedsResetContext) {
    ContextModel model = linear_context_model(0.7, -0.3, 0.1);
    const ParamSet before = model.theta();
    meta::inner_adapt(model, points({1.0, 2.0}, {0.5, -1.0}), LossKind::mse, 0.5, 3);
    EXPECT_EQ(model.theta(), before);
    model.set_phi(Array::vector({0.25}));
    EXPECT_THROW(meta::inner_adapt(model, points({1.0}, {2.0}), LossKind::mse, 0.1, 1), ContractError);
}

TEST(InnerAdapt, NonFiniteLossIsDivergence) {
    const ContextModel model = linear_context_model(1.0, 1.0, 0.0);
    try {
        meta::inner_adapt(model, points({1.0}, {1e200}), LossKind::mse, 0.1, 2);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.iteration(), 0);
    }
}

TEST(MamlInnerAdapt, SingleParameterHandValue) {
    Architecture arch;
    arch.hidden = {};
    ParamSet theta;
    theta.add("layer0.weight", Array::matrix({{1.0}}));
    theta.add("layer0.bias", Array::vector({0.0}));
    const ContextModel model(arch, theta);
    const ParamSet adapted = meta::maml_inner_adapt(model, points({1.0}, {0.0}), LossKind::mse, 0.25, 1);
    EXPECT_NEAR(adapted.at("layer0.weight").item(), 0.5, 1e-15);
    EXPECT_EQ(model.theta().at("layer0.weight").item(), 1.0);

    const ParamSet same = meta::maml_inner_adapt(model, points({1.0}, {0.0}), LossKind::mse, 0.0, 1);
    EXPECT_EQ(same, model.theta());
}

TEST(MamlInnerAdapt, AdaptsInputBiases) {
    const ContextModel model = models::init_theta(small_arch(3, models::ContextRole::meta_learned), 4);
    const auto task = sine_batch(1, 1).front();
    const ParamSet adapted = meta::maml_inner_adapt(model, task.train, LossKind::mse, 0.1, 1);
    EXPECT_NE(adapted.at("input_bias"), model.theta().at("input_bias"));
}

TEST(MetaGradient, FirstAndSecondOrderMatchHandDerivation) {
    const double w = 0.8, v = -1.3, b = 0.2, alpha = 0.35;
    const double x1 = 0.9, y1 = 0.4, x2 = -0.6, y2 = 1.1;
    const ContextModel model = linear_context_model(w, v, b);
    const SupervisedTask task = single_point_task(x1, y1, x2, y2);

    const double r1 = w * x1 + b - y1;
    const double phi = -alpha * 2.0 * r1 * v;
    const double r2 = w * x2 + v * phi + b - y2;
    const double fo_w = 2 * r2 * x2, fo_v = 2 * r2 * phi, fo_b = 2 * r2;
    const double dphi_dw = -2 * alpha * v * x1, dphi_dv = -2 * alpha * r1, dphi_db = -2 * alpha * v;
    const double so_w = fo_w + 2 * r2 * v * dphi_dw;
    const double so_v = fo_v + 2 * r2 * v * dphi_dv;
    const double so_b = fo_b + 2 * r2 * v * dphi_db;

    MetaConfig cfg;
    cfg.context_dim = 1;
    cfg.inner_lr = alpha;
    cfg.meta_batch = 1;
    cfg.first_order = true;
    const auto fo = meta::meta_gradient(model, std::span(&task, 1), cfg);
    EXPECT_NEAR(fo.grads[0][0], fo_w, 1e-14);
    EXPECT_NEAR(fo.grads[0][1], fo_v, 1e-14);
    EXPECT_NEAR(fo.grads[1][0], fo_b, 1e-14);
    EXPECT_NEAR(fo.post_loss, r2 * r2, 1e-14);
    EXPECT_NEAR(fo.pre_loss, r1 * r1, 1e-14);

    cfg.first_order = false;
    const auto so = meta::meta_gradient(model, std::span(&task, 1), cfg);
    EXPECT_NEAR(so.grads[0][0], so_w, 1e-14);
    EXPECT_NEAR(so.grads[0][1], so_v, 1e-14);
    EXPECT_NEAR(so.grads[1][0], so_b, 1e-14);
}

TEST(MetaGradient, SecondOrderMatchesFiniteDifferencesCavia) {
    std::mt19937_64 seeds(11);
    for (int trial = 0; trial < 4; ++trial) {
        const ContextModel model = models::init_theta(small_arch(2), seeds());
        const auto batch = sine_batch(seeds(), 3);
        MetaConfig cfg;
        cfg.context_dim = 2;
        cfg.inner_lr = 0.5;
        cfg.inner_steps = 1 + trial % 2;
        const auto mg = meta::meta_gradient(model, batch, cfg);
        EXPECT_LT(rel_err(flatten(mg.grads), flatten(fd_meta_gradient(model, batch, cfg))), 1e-4) << trial;
    }
}

TEST(MetaGradient, SecondOrderMatchesFiniteDifferencesMaml) {
    std::mt19937_64 seeds(12);
    for (int trial = 0; trial < 3; ++trial) {
        const ContextModel model =
            models::init_theta(small_arch(trial == 0 ? 0 : 2, models::ContextRole::meta_learned), seeds());
        const auto batch = sine_batch(seeds(), 2);
        MetaConfig cfg;
        cfg.algorithm = Algorithm::maml;
        cfg.inner_lr = 0.05;
        cfg.inner_steps = 1 + trial % 2;
        const auto mg = meta::meta_gradient(model, batch, cfg);
        EXPECT_LT(rel_err(flatten(mg.grads), flatten(fd_meta_gradient(model, batch, cfg))), 1e-4) << trial;
    }
}

TEST(MetaGradient, FirstOrderDiffersFromSecondOrderOnNonlinearModel) {
    const ContextModel model = models::init_theta(small_arch(2), 5);
    const auto batch = sine_batch(6, 4);
    MetaConfig cfg;
    cfg.context_dim = 2;
    const auto so = meta::meta_gradient(model, batch, cfg);
    cfg.first_order = true;
    const auto fo = meta::meta_gradient(model, batch, cfg);
    EXPECT_GT(rel_err(flatten(so.grads), flatten(fo.grads)), 1e-6);
    EXPECT_EQ(so.post_loss, fo.post_loss);
}

TEST(MetaGradient, ZeroStepSizeGivesMultitaskGradient) {
    const ContextModel model = models::init_theta(small_arch(3), 8);
    const auto batch = sine_batch(9, 5);
    MetaConfig cfg;
    cfg.context_dim = 3;
    cfg.inner_lr = 0.0;
    const auto so = meta::meta_gradient(model, batch, cfg);
    cfg.first_order = true;
    const auto fo = meta::meta_gradient(model, batch, cfg);

    // grad_theta of the mean test loss at phi = 0, built directly.
    ad::Graph g;
    const auto theta = model.bind_theta(g, true);
    ad::Tensor total;
    for (const auto& t : batch) {
        const ad::Tensor l = meta::task_loss(
            models::forward(model.architecture(), theta, g.constant(model.phi()), g.constant(t.test.x)), t.test,
            t.loss);
        total = total.valid() ? ad::add(total, l) : l;
    }
    const auto gr = ad::grad(ad::scale(total, 1.0 / batch.size()), theta, false);
    std::vector<Array> expected;
    for (const auto& t : theta) expected.push_back(gr[t].value());

    EXPECT_LT(rel_err(flatten(so.grads), flatten(expected)), 1e-12);
    EXPECT_LT(rel_err(flatten(fo.grads), flatten(expected)), 1e-12);
}

TEST(MetaGradient, IdenticalTasksAverageToSingleTask) {
    const ContextModel model = models::init_theta(small_arch(2), 10);
    const auto one = sine_batch(13, 1);
    const std::vector<SupervisedTask> many(5, one.front());
    MetaConfig cfg;
    cfg.context_dim = 2;
    const auto a = meta::meta_gradient(model, one, cfg);
    const auto b = meta::meta_gradient(model, many, cfg);
    EXPECT_LT(rel_err(flatten(a.grads), flatten(b.grads)), 1e-14);
}

TEST(MetaGradient, TaskOrderInvariance) {
    const ContextModel model = models::init_theta(small_arch(2), 14);
    auto batch = sine_batch(15, 8);
    MetaConfig cfg;
    cfg.context_dim = 2;
    const auto a = meta::meta_gradient(model, batch, cfg);
    std::mt19937_64 rng(3);
    std::shuffle(batch.begin(), batch.end(), rng);
    const auto b = meta::meta_gradient(model, batch, cfg);
    EXPECT_LT(cavia::testing::max_abs_diff(flatten(a.grads), flatten(b.grads)), 1e-10);
}

TEST(MetaGradient, DescriptorsAreNeverRead) {
    const ContextModel model = models::init_theta(small_arch(2), 16);
    auto batch = sine_batch(17, 3);
    MetaConfig cfg;
    cfg.context_dim = 2;
    const auto a = meta::meta_gradient(model, batch, cfg);
    for (auto& t : batch) std::fill(t.descriptor.begin(), t.descriptor.end(), 0.0);
    const auto b = meta::meta_gradient(model, batch, cfg);
    EXPECT_EQ(a.grads, b.grads);
    EXPECT_EQ(a.post_loss, b.post_loss);
}

TEST(MetaGradient, WorkerCountDoesNotChangeResult) {
    const ContextModel model = models::init_theta(small_arch(2), 18);
    const auto batch = sine_batch(19, 7);
    MetaConfig cfg;
    cfg.context_dim = 2;
    const auto a = meta::meta_gradient(model, batch, cfg);
    cfg.workers = 3;
    const auto b = meta::meta_gradient(model, batch, cfg);
    EXPECT_EQ(a.grads, b.grads);
    EXPECT_EQ(a.pre_loss, b.pre_loss);
}

TEST(MetaTrainStep, UpdatesThetaOnlyAndResetsContext) {
    ContextModel model = models::init_theta(small_arch(2), 20);
    const auto batch = sine_batch(21, 4);
    MetaConfig cfg;
    cfg.context_dim = 2;
    optim::Adam adam(cfg.adam, model.theta().values());
    const ParamSet before = model.theta();
    const auto diag = meta::meta_train_step(model, batch, cfg, adam, 0);
    EXPECT_NE(model.theta(), before);
    EXPECT_EQ(model.phi(), Array(Shape{2}, 0.0));
    EXPECT_EQ(adam.step_count(), 1u);
    EXPECT_EQ(adam.first_moments().size(), model.theta().size());
    EXPECT_GT(diag.grad_norm, 0.0);
}

TEST(MetaTrainStep, LossDecreasesOverAFewHundredSteps) {
    ContextModel model = models::init_theta(small_arch(2), 22);
    MetaConfig cfg;
    cfg.context_dim = 2;
    cfg.adam.lr = 3e-3;
    optim::Adam adam(cfg.adam, model.theta().values());
    tasks::Rng rng(23);
    double early = 0.0, late = 0.0;
    for (int it = 0; it < 300; ++it) {
        std::vector<SupervisedTask> batch;
        for (int i = 0; i < 10; ++i) batch.push_back(tasks::sample_sine_task(rng, 10, 10));
        const double l = meta::meta_train_step(model, batch, cfg, adam, it).post_loss;
        if (it < 30) early += l;
        if (it >= 270) late += l;
    }
    EXPECT_LT(late, 0.7 * early);
}

TEST(MetaTrainStep, DivergenceCarriesIterationAndTask) {
    ContextModel model = models::init_theta(small_arch(2), 24);
    auto batch = sine_batch(25, 4);
    batch[2].train.y[0] = 1e200;
    MetaConfig cfg;
    cfg.context_dim = 2;
    optim::Adam adam(cfg.adam, model.theta().values());
    try {
        meta::meta_train_step(model, batch, cfg, adam, 7);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.iteration(), 7);
        EXPECT_EQ(e.task_index(), 2);
    }

    auto big = sine_batch(26, 2);
    for (auto& t : big)
        for (double& y : t.test.y.data) y = 1e4;
    EXPECT_THROW(meta::meta_train_step(model, big, cfg, adam, 0), DivergenceError);
}

TEST(MetaConfig, RejectsBadValues) {
    MetaConfig cfg;
    cfg.inner_steps = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.meta_batch = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.inner_lr = -1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_EQ(meta::parse_algorithm("maml"), Algorithm::maml);
    EXPECT_THROW(meta::parse_algorithm("reptile"), ConfigError);
}

TEST(AdaptAndEval, StepZeroIsUnadaptedLossAndRepeatable) {
    const ContextModel model = models::init_theta(small_arch(2), 27);
    const auto task = sine_batch(28, 1).front();
    const auto curve = meta::adapt_and_eval(model, task, Algorithm::cavia, 1.0, 5);
    ASSERT_EQ(curve.loss.size(), 6u);
    const Array pred = model.forward(task.test.x);
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += std::pow(pred[i] - task.test.y[i], 2);
    EXPECT_NEAR(curve.loss[0], mse / pred.size(), 1e-15);
    EXPECT_EQ(meta::adapt_and_eval(model, task, Algorithm::cavia, 1.0, 5).loss, curve.loss);
    EXPECT_TRUE(curve.accuracy.empty());
}

TEST(AdaptAndEval, MatchesInnerAdaptContext) {
    ContextModel model = models::init_theta(small_arch(2), 29);
    const auto task = sine_batch(30, 1).front();
    const auto curve = meta::adapt_and_eval(model, task, Algorithm::cavia, 0.7, 3);
    model.set_phi(meta::inner_adapt(model, task.train, task.loss, 0.7, 3));
    const Array pred = model.forward(task.test.x);
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += std::pow(pred[i] - task.test.y[i], 2);
    EXPECT_NEAR(curve.loss[3], mse / pred.size(), 1e-14);
}

TEST(AdaptAndEval, ClassificationReportsAccuracy) {
    tasks::ClassPoolConfig pc;
    pc.dim = 4;
    pc.train_classes = 10;
    pc.val_classes = 5;
    pc.test_classes = 5;
    const tasks::ClassPools pools(pc);
    tasks::Rng rng(31);
    const auto ep = tasks::sample_classification_episode(rng, pools, 3, 2, 4, tasks::Split::test);
    Architecture arch;
    arch.input_dim = 4;
    arch.output_dim = 3;
    arch.hidden = {8};
    arch.context_dim = 2;
    arch.conditioning = models::Conditioning::film_at_layer;
    const ContextModel model = models::init_theta(arch, 32);
    const auto curve = meta::adapt_and_eval(model, ep.as_task(), Algorithm::cavia, 0.5, 2);
    ASSERT_EQ(curve.accuracy.size(), 3u);
    for (double a : curve.accuracy) EXPECT_TRUE(a >= 0.0 && a <= 1.0);
}

TEST(Accuracy, CountsArgMaxHits) {
    const Array logits = Array::matrix({{0.1, 0.9}, {2.0, -1.0}, {0.0, 0.5}});
    const Dataset set{Array(Shape{3, 1}), Array::matrix(3, 1, {1.0, 1.0, 1.0})};
    EXPECT_NEAR(meta::accuracy(logits, set), 2.0 / 3.0, 1e-15);
}

TEST(PairwiseSum, SumsAllTerms) {
    std::vector<Array> terms;
    for (int i = 1; i <= 5; ++i) terms.push_back(Array::vector({double(i), -double(i)}));
    EXPECT_EQ(meta::pairwise_sum(terms), Array::vector({15.0, -15.0}));
}
