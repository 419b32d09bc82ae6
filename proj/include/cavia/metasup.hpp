#pragma once

// Supervised meta-learning: CAVIA (context adaptation in the inner loop, shared
// parameters in the outer loop), the MAML baseline (everything adapted in the
// inner loop), their first-order variants, and adaptation-time evaluation.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cavia/array.hpp"
#include "cavia/autodiff.hpp"
#include "cavia/models.hpp"
#include "cavia/optim.hpp"
#include "cavia/tasks.hpp"

namespace cavia::meta {

enum class Algorithm { cavia, maml };

Algorithm parse_algorithm(const std::string& text);
const char* algorithm_name(Algorithm a);

struct MetaConfig {
    Algorithm algorithm = Algorithm::cavia;
    std::size_t context_dim = 5;  // ignored by plain MAML
    double inner_lr = 1.0;
    int inner_steps = 1;
    std::size_t meta_batch = 25;
    bool first_order = false;
    optim::AdamConfig adam;
    std::uint64_t seed = 0;
    // Worker threads for the per-task part of a meta step. The result does not
    // depend on this value.
    std::size_t workers = 1;
    // Meta-loss above this (or non-finite) aborts training.
    double divergence_threshold = 1e6;

    void validate() const;  // throws ConfigError
};

// Mean loss of `pred` over the datapoints of `set`.
ad::Tensor task_loss(ad::Tensor pred, const tasks::Dataset& set, tasks::LossKind kind);

// Fraction of rows whose arg-max matches the label.
double accuracy(const Array& logits, const tasks::Dataset& set);

// ---- graph-level inner loops ---------------------------------------------------
//
// Both return the adapted tensors inside `g`. With `track_meta_graph` every
// inner gradient is recorded, so the result stays differentiable w.r.t. theta
// through the updates; otherwise the inner gradients enter as constants.
// `first_loss`, if given, receives the train loss before the first update.
// A non-finite inner loss throws DivergenceError whose iteration() is the
// inner step.

ad::Tensor adapt_context(const models::Architecture& arch, std::span<const ad::Tensor> theta, ad::Tensor phi0,
                         const tasks::Dataset& train, tasks::LossKind kind, double alpha, int steps,
                         bool track_meta_graph, double* first_loss = nullptr);

std::vector<ad::Tensor> adapt_parameters(const models::Architecture& arch, std::span<const ad::Tensor> theta,
                                         ad::Tensor context, const tasks::Dataset& train, tasks::LossKind kind,
                                         double alpha, int steps, bool track_meta_graph,
                                         double* first_loss = nullptr);

// ---- value-level inner loops -----------------------------------------------------

// phi_i after `steps` updates from phi = 0. Requires the model's phi to be zero.
Array inner_adapt(const models::ContextModel& model, const tasks::Dataset& train, tasks::LossKind kind,
                  double alpha, int steps);

// theta_i after `steps` updates of every theta tensor (input biases included).
models::ParamSet maml_inner_adapt(const models::ContextModel& model, const tasks::Dataset& train,
                                  tasks::LossKind kind, double alpha, int steps);

// ---- outer loop ----------------------------------------------------------------

struct MetaGradient {
    std::vector<Array> grads;  // one per theta tensor, layout order
    double pre_loss = 0.0;     // mean train loss before adaptation
    double post_loss = 0.0;    // mean test loss after adaptation (the meta-loss)
    double norm() const;
};

// Gradient of the mean post-adaptation test loss w.r.t. theta. Per-task
// contributions are summed pairwise in task order. The model's phi must be zero
// and is left untouched.
MetaGradient meta_gradient(const models::ContextModel& model, std::span<const tasks::SupervisedTask> batch,
                           const MetaConfig& config);

struct StepDiagnostics {
    std::int64_t iteration = 0;
    double pre_loss = 0.0;
    double post_loss = 0.0;
    double grad_norm = 0.0;
};

// One meta-update: meta_gradient, divergence guard, one Adam step on theta,
// then phi reset. Errors carry `iteration`.
StepDiagnostics meta_train_step(models::ContextModel& model, std::span<const tasks::SupervisedTask> batch,
                                const MetaConfig& config, optim::Adam& adam, std::int64_t iteration);

// ---- evaluation ----------------------------------------------------------------

struct AdaptationCurve {
    std::vector<double> loss;      // test loss after 0..max_steps updates
    std::vector<double> accuracy;  // same, classification tasks only
};

// Adapts a copy of the model on the task's train set and scores the test set
// after every step. CAVIA updates only phi; MAML updates theta. The model
// itself is not modified.
AdaptationCurve adapt_and_eval(const models::ContextModel& model, const tasks::SupervisedTask& task,
                               Algorithm algorithm, double alpha, int max_steps);

// ||grad_phi L_train|| at phi = 0: how strongly the task pulls on the context.
double context_gradient_norm(const models::ContextModel& model, const tasks::SupervisedTask& task);

// Pairwise (tree) sum, so the rounding pattern depends only on the count.
Array pairwise_sum(std::span<const Array> terms);

}  // namespace cavia::meta
