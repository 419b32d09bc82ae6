#include "cavia/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cavia/checkpoint.hpp"
#include "cavia/errors.hpp"

namespace cavia::exp {

namespace fs = std::filesystem;
using models::Activation;
using models::Conditioning;
using tasks::LossKind;

Suite parse_suite(const std::string& text) {
    if (text == "sine") return Suite::sine;
    if (text == "completion") return Suite::completion;
    if (text == "fewshot") return Suite::fewshot;
    if (text == "nav2d") return Suite::nav2d;
    throw ConfigError("unknown suite '" + text + "'");
}

const char* suite_name(Suite s) {
    switch (s) {
        case Suite::sine: return "sine";
        case Suite::completion: return "completion";
        case Suite::fewshot: return "fewshot";
        case Suite::nav2d: return "nav2d";
    }
    return "?";
}

namespace {

Activation parse_activation(const std::string& t) {
    if (t == "relu") return Activation::relu;
    if (t == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + t + "'");
}
const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Conditioning parse_conditioning(const std::string& t) {
    if (t == "concat") return Conditioning::concat_at_input;
    if (t == "film") return Conditioning::film_at_layer;
    throw ConfigError("unknown conditioning '" + t + "'");
}
const char* conditioning_name(Conditioning c) { return c == Conditioning::concat_at_input ? "concat" : "film"; }

rl::Baseline parse_baseline(const std::string& t) {
    if (t == "none") return rl::Baseline::none;
    if (t == "trajectory_mean") return rl::Baseline::trajectory_mean;
    if (t == "per_timestep") return rl::Baseline::per_timestep;
    throw ConfigError("unknown baseline '" + t + "'");
}
const char* baseline_name(rl::Baseline b) {
    switch (b) {
        case rl::Baseline::none: return "none";
        case rl::Baseline::trajectory_mean: return "trajectory_mean";
        case rl::Baseline::per_timestep: return "per_timestep";
    }
    return "?";
}

rl::Reduction parse_reduction(const std::string& t) {
    if (t == "episode_mean") return rl::Reduction::episode_mean;
    if (t == "episode_sum") return rl::Reduction::episode_sum;
    throw ConfigError("unknown reduction '" + t + "'");
}
const char* reduction_name(rl::Reduction r) { return r == rl::Reduction::episode_mean ? "episode_mean" : "episode_sum"; }

const std::vector<std::string> kSuiteKeys = {"m_train", "m_test", "shots", "grid", "pixel_mode", "n_way",
                                             "q_query", "dim", "train_classes", "val_classes", "test_classes",
                                             "mean_range", "stddev", "pool_seed"};

const std::vector<std::string> kRunKeys = {
    "suite", "seed", "algorithm", "context_dim", "inner_lr", "inner_steps", "meta_batch", "first_order",
    "outer_lr", "workers", "divergence_threshold", "hidden", "activation", "conditioning", "film_layer",
    "iterations", "checkpoint_every", "validate_every", "validation_tasks", "eval_tasks", "eval_steps",
    "eval_m_test", "embed_steps", "episodes_per_task", "horizon", "gamma", "baseline", "reduction",
    "eval_episodes", "action_clip", "goal_radius", "goal_range"};

std::size_t count_value(const KeyValues& kv, const char* key, std::size_t fallback) {
    const long v = kv.get_long(key, static_cast<long>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    return os;
}

// Every metrics file opens with the hash of the configuration that produced it.
std::ofstream open_csv(const fs::path& path, const RunConfig& config, const std::string& header) {
    std::ofstream os = open_out(path);
    os << "# manifest_hash=" << config.manifest_hash() << '\n' << header << '\n';
    return os;
}

std::string num(double v) { return format_double(v); }

}  // namespace

const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k = kRunKeys;
        k.insert(k.end(), kSuiteKeys.begin(), kSuiteKeys.end());
        return k;
    }();
    return keys;
}

// ---- configuration ----------------------------------------------------------------

RunConfig RunConfig::defaults(Suite suite) {
    RunConfig c;
    c.suite = suite;
    c.tasks.suite = suite_name(suite);
    c.meta.adam.lr = 1e-3;
    switch (suite) {
        case Suite::sine:
            // Training scores each task on 10 query points; evaluation on 100.
            c.tasks.m_train = 10;
            c.tasks.m_test = 10;
            c.tasks.shots = {10};
            break;
        case Suite::completion:
            c.tasks.shots = {10, 100, 1000};
            c.hidden = {64, 64};
            c.meta.context_dim = 16;
            c.meta.meta_batch = 8;
            c.iterations = 2000;
            c.checkpoint_every = 500;
            c.validate_every = 100;
            c.validation_tasks = 20;
            c.eval_tasks = 100;
            c.eval_steps = 5;
            break;
        case Suite::fewshot:
            c.tasks.shots = {1};
            // Means in [-2, 2]^20: a 1-shot nearest-neighbour rule scores ~92%.
            c.tasks.pools.mean_range = 2.0;
            c.hidden = {64, 64};
            c.conditioning = Conditioning::film_at_layer;
            c.film_layer = 1;
            c.meta.context_dim = 100;
            c.meta.inner_steps = 2;
            c.meta.meta_batch = 4;
            c.iterations = 5000;
            c.checkpoint_every = 500;
            c.validate_every = 250;
            c.eval_steps = 5;
            break;
        case Suite::nav2d:
            c.hidden = {100, 100};
            c.meta.meta_batch = 20;
            c.meta.adam.lr = 3e-3;
            c.rl.objective.baseline = rl::Baseline::per_timestep;
            c.iterations = 500;
            c.checkpoint_every = 50;
            c.validate_every = 10;
            c.validation_tasks = 20;
            c.eval_tasks = 40;
            c.eval_steps = 2;
            c.embed_steps = 2;
            break;
    }
    return c;
}

RunConfig RunConfig::from_key_values(const KeyValues& kv) {
    kv.require_known(known_keys());
    RunConfig c = defaults(parse_suite(kv.get_or("suite", "sine")));

    const std::uint64_t seed = count_value(kv, "seed", 0);
    KeyValues suite_kv = c.tasks.to_key_values();
    for (const auto& [k, v] : kv.entries())
        if (std::find(kSuiteKeys.begin(), kSuiteKeys.end(), k) != kSuiteKeys.end()) suite_kv.set(k, v);
    suite_kv.set("seed", std::to_string(seed));
    c.tasks = tasks::SuiteConfig::from_key_values(suite_kv);

    auto& m = c.meta;
    m.seed = seed;
    m.algorithm = meta::parse_algorithm(kv.get_or("algorithm", meta::algorithm_name(m.algorithm)));
    m.context_dim = count_value(kv, "context_dim", m.context_dim);
    m.inner_lr = kv.get_double("inner_lr", m.inner_lr);
    m.inner_steps = static_cast<int>(kv.get_long("inner_steps", m.inner_steps));
    m.meta_batch = count_value(kv, "meta_batch", m.meta_batch);
    m.first_order = kv.get_bool("first_order", m.first_order);
    m.adam.lr = kv.get_double("outer_lr", m.adam.lr);
    m.workers = count_value(kv, "workers", m.workers);
    m.divergence_threshold = kv.get_double("divergence_threshold", m.divergence_threshold);

    if (kv.contains("hidden")) {
        c.hidden.clear();
        for (double v : kv.get_list("hidden", {})) {
            if (!(v >= 1) || v != std::floor(v)) throw ConfigError("hidden must list positive integers");
            c.hidden.push_back(static_cast<std::size_t>(v));
        }
    }
    c.activation = parse_activation(kv.get_or("activation", activation_name(c.activation)));
    c.conditioning = parse_conditioning(kv.get_or("conditioning", conditioning_name(c.conditioning)));
    c.film_layer = count_value(kv, "film_layer", c.film_layer);

    c.iterations = kv.get_long("iterations", static_cast<long>(c.iterations));
    c.checkpoint_every = kv.get_long("checkpoint_every", static_cast<long>(c.checkpoint_every));
    c.validate_every = kv.get_long("validate_every", static_cast<long>(c.validate_every));
    c.validation_tasks = count_value(kv, "validation_tasks", c.validation_tasks);
    c.eval_tasks = count_value(kv, "eval_tasks", c.eval_tasks);
    c.eval_steps = static_cast<int>(kv.get_long("eval_steps", c.eval_steps));
    c.eval_m_test = count_value(kv, "eval_m_test", c.eval_m_test);
    c.embed_steps = static_cast<int>(kv.get_long("embed_steps", c.embed_steps));

    auto& r = c.rl;
    r.episodes_per_task = count_value(kv, "episodes_per_task", r.episodes_per_task);
    r.env.horizon = count_value(kv, "horizon", r.env.horizon);
    r.objective.gamma = kv.get_double("gamma", r.objective.gamma);
    r.objective.baseline = parse_baseline(kv.get_or("baseline", baseline_name(r.objective.baseline)));
    r.objective.reduction = parse_reduction(kv.get_or("reduction", reduction_name(r.objective.reduction)));
    c.eval_episodes = count_value(kv, "eval_episodes", c.eval_episodes);
    r.env.action_clip = kv.get_double("action_clip", r.env.action_clip);
    r.env.goal_radius = kv.get_double("goal_radius", r.env.goal_radius);
    r.env.goal_range = kv.get_double("goal_range", r.env.goal_range);

    c.validate();
    return c;
}

RunConfig RunConfig::load(const fs::path& path) { return from_key_values(KeyValues::parse_file(path.string())); }

KeyValues RunConfig::to_key_values() const {
    KeyValues kv;
    kv.set("suite", suite_name(suite));
    kv.set("seed", std::to_string(meta.seed));
    kv.set("algorithm", meta::algorithm_name(meta.algorithm));
    kv.set("context_dim", std::to_string(meta.context_dim));
    kv.set("inner_lr", num(meta.inner_lr));
    kv.set("inner_steps", std::to_string(meta.inner_steps));
    kv.set("meta_batch", std::to_string(meta.meta_batch));
    kv.set("first_order", meta.first_order ? "true" : "false");
    kv.set("outer_lr", num(meta.adam.lr));
    kv.set("workers", std::to_string(meta.workers));
    kv.set("divergence_threshold", num(meta.divergence_threshold));
    kv.set("hidden", join_sizes(hidden));
    kv.set("activation", activation_name(activation));
    kv.set("conditioning", conditioning_name(conditioning));
    kv.set("film_layer", std::to_string(film_layer));
    kv.set("iterations", std::to_string(iterations));
    kv.set("checkpoint_every", std::to_string(checkpoint_every));
    kv.set("validate_every", std::to_string(validate_every));
    kv.set("validation_tasks", std::to_string(validation_tasks));
    kv.set("eval_tasks", std::to_string(eval_tasks));
    kv.set("eval_steps", std::to_string(eval_steps));
    kv.set("eval_m_test", std::to_string(eval_m_test));
    kv.set("embed_steps", std::to_string(embed_steps));
    kv.set("episodes_per_task", std::to_string(rl.episodes_per_task));
    kv.set("horizon", std::to_string(rl.env.horizon));
    kv.set("gamma", num(rl.objective.gamma));
    kv.set("baseline", baseline_name(rl.objective.baseline));
    kv.set("reduction", reduction_name(rl.objective.reduction));
    kv.set("eval_episodes", std::to_string(eval_episodes));
    kv.set("action_clip", num(rl.env.action_clip));
    kv.set("goal_radius", num(rl.env.goal_radius));
    kv.set("goal_range", num(rl.env.goal_range));
    const KeyValues s = tasks.to_key_values();
    for (const auto& key : kSuiteKeys) kv.set(key, s.get(key));
    return kv;
}

std::string RunConfig::manifest_hash() const {
    const std::string text = std::string(kArtifactVersion) + '\n' + to_key_values().to_string();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return hex64(h);
}

models::Architecture RunConfig::architecture() const {
    models::Architecture a;
    switch (suite) {
        case Suite::sine: a.input_dim = 1; a.output_dim = 1; break;
        case Suite::completion: a.input_dim = 2; a.output_dim = 3; break;
        case Suite::fewshot: a.input_dim = tasks.pools.dim; a.output_dim = tasks.n_way; break;
        case Suite::nav2d: a.input_dim = 2; a.output_dim = 2; break;
    }
    a.hidden = hidden;
    a.context_dim = meta.context_dim;
    a.conditioning = conditioning;
    a.film_layer = film_layer;
    a.activation = activation;
    // MAML's extra inputs are meta-learned biases rather than adapted context.
    a.context_role = meta.algorithm == meta::Algorithm::maml ? models::ContextRole::meta_learned
                                                             : models::ContextRole::adapted;
    return a;
}

void RunConfig::validate() const {
    meta.validate();
    tasks.validate();
    if (meta.algorithm == meta::Algorithm::cavia && meta.context_dim == 0)
        throw ConfigError("context_dim must be at least 1 for algorithm=cavia");
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (checkpoint_every < 1 || validate_every < 1)
        throw ConfigError("checkpoint_every and validate_every must be positive");
    if (validation_tasks < 1 || eval_tasks < 1) throw ConfigError("validation_tasks and eval_tasks must be positive");
    if (eval_steps < 0 || embed_steps < 0) throw ConfigError("eval_steps and embed_steps must be non-negative");
    if (eval_m_test < 1) throw ConfigError("eval_m_test must be positive");
    if (suite == Suite::nav2d) {
        if (meta.inner_steps != 1) throw ConfigError("nav2d trains with exactly one inner step");
        if (hidden.size() != 2 || hidden[0] != hidden[1])
            throw ConfigError("nav2d policy needs two hidden layers of equal width");
        if (conditioning != Conditioning::concat_at_input || activation != Activation::relu)
            throw ConfigError("nav2d policy uses ReLU with the context concatenated to the input");
        if (eval_episodes < 1) throw ConfigError("eval_episodes must be positive");
        if (rl.env.horizon < 1) throw ConfigError("horizon must be positive");
        rl_config().validate();
    }
    architecture().validate();
}

rl::RLConfig RunConfig::rl_config() const {
    rl::RLConfig r = rl;
    r.algorithm = meta.algorithm;
    r.inner_lr = meta.inner_lr;
    r.meta_batch = meta.meta_batch;
    r.first_order = meta.first_order;
    r.adam = meta.adam;
    r.workers = meta.workers;
    return r;
}

// ---- shared helpers ---------------------------------------------------------------

namespace {

struct SupervisedSetup {
    LossKind loss = LossKind::mse;
    std::size_t num_classes = 0;
    std::optional<tasks::ClassPools> pools;
};

SupervisedSetup supervised_setup(const RunConfig& c) {
    SupervisedSetup s;
    if (c.suite == Suite::fewshot) {
        s.loss = LossKind::cross_entropy;
        s.num_classes = c.tasks.n_way;
        s.pools.emplace(c.tasks.pools);
    }
    return s;
}

// `shots` is the train-set size: pixel budget, k_shot, or ignored for sine.
tasks::SupervisedTask draw_task(const RunConfig& c, const SupervisedSetup& s, tasks::Rng& rng, tasks::Split split,
                                std::size_t shots, std::size_t sine_m_test) {
    switch (c.suite) {
        case Suite::sine: return tasks::sample_sine_task(rng, c.tasks.m_train, sine_m_test);
        case Suite::completion: return tasks::sample_completion_task(rng, shots, c.tasks.pixel_mode, c.tasks.grid);
        case Suite::fewshot:
            return tasks::sample_classification_episode(rng, *s.pools, c.tasks.n_way, shots, c.tasks.q_query, split)
                .as_task();
        case Suite::nav2d: break;
    }
    throw ContractError("nav2d has no supervised tasks");
}

// Training and validation tasks pick their train-set size from the shots list.
tasks::SupervisedTask draw_training_task(const RunConfig& c, const SupervisedSetup& s, tasks::Rng& rng,
                                         tasks::Split split) {
    std::size_t shots = c.tasks.shots.front();
    if (c.suite != Suite::sine && c.tasks.shots.size() > 1) {
        std::uniform_int_distribution<std::size_t> pick(0, c.tasks.shots.size() - 1);
        shots = c.tasks.shots[pick(rng)];
    }
    return draw_task(c, s, rng, split, shots, c.tasks.m_test);
}

std::vector<std::size_t> eval_shots(const RunConfig& c) {
    if (c.suite == Suite::sine) return {c.tasks.m_train};
    if (c.suite == Suite::nav2d) return {0};
    return c.tasks.shots;
}

// Streams of a run: 1 training tasks, 2 validation, 3 evaluation, 4 embedding.
constexpr std::uint64_t kTrainStream = 1, kValidationStream = 2, kEvalStream = 3, kEmbedStream = 4;
// Rollout noise for validation, kept apart from the evaluation noise.
constexpr std::uint64_t kValidationNoiseTag = 0x76a1;

std::vector<rl::Vec2> draw_goals(const RunConfig& c, std::uint64_t stream, std::size_t n) {
    tasks::Rng rng = tasks::worker_rng(c.meta.seed, stream);
    std::vector<rl::Vec2> goals;
    for (std::size_t i = 0; i < n; ++i) goals.push_back(rl::sample_goal(rng, c.rl.env));
    return goals;
}

void check_architecture(const models::Architecture& have, const RunConfig& c) {
    if (!(have == c.architecture()))
        throw LoadError("checkpoint architecture does not match the configured suite and model");
}

models::ContextModel load_model(const RunConfig& c, const fs::path& path) {
    const Checkpoint ckpt = Checkpoint::load_file(path.string());
    models::ContextModel model = model_from_checkpoint(ckpt);
    check_architecture(model.architecture(), c);
    return model;
}

rl::GaussianPolicy load_policy(const RunConfig& c, const fs::path& path) {
    const Checkpoint ckpt = Checkpoint::load_file(path.string());
    rl::GaussianPolicy p;
    p.mean = model_from_checkpoint(ckpt);
    check_architecture(p.mean.architecture(), c);
    const Array* ls = ckpt.find("log_std");
    if (!ls || ls->shape != Shape{2}) throw LoadError("checkpoint has no policy log_std");
    p.log_std = *ls;
    return p;
}

void write_manifest(const RunConfig& c, const fs::path& dir) {
    std::ofstream os = open_out(dir / "manifest.txt");
    os << "# manifest_hash = " << c.manifest_hash() << '\n'
       << "# artifact_version = " << kArtifactVersion << '\n'
       << "# created = " << utc_now() << '\n'
       << "# layout = manifest.txt diagnostics.csv validation.csv timing.csv checkpoint_last.ckpt "
          "checkpoint_best.ckpt checkpoint_final.ckpt [failure.txt]\n";
    if (c.suite == Suite::sine) {
        const tasks::SineRanges r;
        os << "# sine_ranges = amplitude [" << r.amplitude_lo << ", " << r.amplitude_hi << "] phase [" << r.phase_lo
           << ", " << r.phase_hi << "] x [" << r.x_lo << ", " << r.x_hi << "]\n";
    }
    os << c.to_key_values().to_string();
}

void write_failure(const fs::path& dir, const DivergenceError& e) {
    std::ofstream os = open_out(dir / "failure.txt");
    os << "status = diverged\nreason = " << e.reason() << "\niteration = " << e.iteration()
       << "\ntask_index = " << e.task_index() << '\n';
}

struct Validation {
    double metric = 0.0;  // lower is better
    double accuracy = -1.0;
};

}  // namespace

// ---- training ----------------------------------------------------------------------

namespace {

// The loop body differs between supervised and RL runs; the bookkeeping around
// it (validation, checkpoints, CSVs, failure handling) does not.
template <class Step, class Validate, class Save>
TrainOutcome run_training(const RunConfig& c, const fs::path& out, const std::string& diag_header,
                          const std::string& val_header, Step&& step, Validate&& validate_fn, Save&& save) {
    fs::create_directories(out);
    write_manifest(c, out);
    std::ofstream diag = open_csv(out / "diagnostics.csv", c, diag_header);
    std::ofstream val = open_csv(out / "validation.csv", c, val_header);
    // Wall-clock time lives in its own file; it is the one output that cannot repeat.
    std::ofstream timing = open_out(out / "timing.csv");
    timing << "iteration,seconds\n";

    TrainOutcome result;
    result.final_checkpoint = out / "checkpoint_final.ckpt";
    result.best_checkpoint = out / "checkpoint_best.ckpt";

    auto run_validation = [&](std::int64_t it) {
        Validation v;
        try {
            v = validate_fn();
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("validation: ") + e.what(), static_cast<long>(it));
        }
        if (!std::isfinite(v.metric)) throw DivergenceError("non-finite validation metric", static_cast<long>(it));
        val << it << ',' << num(v.metric);
        if (v.accuracy >= 0) val << ',' << num(v.accuracy);
        val << '\n';
        val.flush();
        diag.flush();
        if (it == 0 || v.metric < result.best_validation) {
            result.best_validation = v.metric;
            save(result.best_checkpoint);
        }
    };

    const auto t0 = std::chrono::steady_clock::now();
    std::int64_t it = 0;
    try {
        run_validation(0);
        for (it = 1; it <= c.iterations; ++it) {
            diag << step(it) << '\n';
            timing << it << ',' << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                   << '\n';
            result.iterations_done = it;
            if (it % c.validate_every == 0) run_validation(it);
            if (it % c.checkpoint_every == 0) save(out / "checkpoint_last.ckpt");
        }
    } catch (const DivergenceError& e) {
        diag.flush();
        val.flush();
        write_failure(out, e);
        save(out / "checkpoint_last.ckpt");
        throw;
    }
    save(out / "checkpoint_last.ckpt");
    save(result.final_checkpoint);
    return result;
}

TrainOutcome train_supervised(const RunConfig& c, const fs::path& out) {
    const SupervisedSetup setup = supervised_setup(c);
    models::ContextModel model = models::init_theta(c.architecture(), c.meta.seed);
    optim::Adam adam(c.meta.adam, model.theta().values());
    tasks::Rng rng = tasks::worker_rng(c.meta.seed, kTrainStream);

    std::vector<tasks::SupervisedTask> val_tasks;
    {
        tasks::Rng vrng = tasks::worker_rng(c.meta.seed, kValidationStream);
        for (std::size_t i = 0; i < c.validation_tasks; ++i)
            val_tasks.push_back(draw_training_task(c, setup, vrng, tasks::Split::val));
    }

    auto step = [&](std::int64_t it) {
        std::vector<tasks::SupervisedTask> batch;
        batch.reserve(c.meta.meta_batch);
        for (std::size_t i = 0; i < c.meta.meta_batch; ++i)
            batch.push_back(draw_training_task(c, setup, rng, tasks::Split::train));
        const meta::StepDiagnostics d = meta::meta_train_step(model, batch, c.meta, adam, it);
        return std::to_string(it) + ',' + num(d.pre_loss) + ',' + num(d.post_loss) + ',' + num(d.grad_norm);
    };
    auto validate_fn = [&] {
        Validation v;
        double loss = 0.0, acc = 0.0;
        for (const auto& t : val_tasks) {
            const auto curve = meta::adapt_and_eval(model, t, c.meta.algorithm, c.meta.inner_lr, c.meta.inner_steps);
            loss += curve.loss.back();
            if (!curve.accuracy.empty()) acc += curve.accuracy.back();
        }
        v.metric = loss / static_cast<double>(val_tasks.size());
        if (setup.loss == LossKind::cross_entropy) v.accuracy = acc / static_cast<double>(val_tasks.size());
        return v;
    };
    auto save = [&](const fs::path& p) { make_checkpoint(model, {}, &adam).save_file(p.string()); };

    const std::string val_header =
        setup.loss == LossKind::cross_entropy ? "iteration,loss,accuracy" : "iteration,loss";
    return run_training(c, out, "iteration,pre_loss,post_loss,grad_norm", val_header, step, validate_fn, save);
}

TrainOutcome train_nav(const RunConfig& c, const fs::path& out) {
    const rl::RLConfig rc = c.rl_config();
    rl::GaussianPolicy policy = rl::make_navigation_policy(c.meta.context_dim, c.meta.seed, c.hidden.front(),
                                                           c.meta.algorithm == meta::Algorithm::maml);
    optim::Adam adam(rc.adam, policy.meta_parameters());
    tasks::Rng rng = tasks::worker_rng(c.meta.seed, kTrainStream);
    const std::vector<rl::Vec2> val_goals = draw_goals(c, kValidationStream, c.validation_tasks);

    auto step = [&](std::int64_t it) {
        std::vector<rl::Vec2> goals;
        for (std::size_t i = 0; i < rc.meta_batch; ++i) goals.push_back(rl::sample_goal(rng, rc.env));
        const rl::RLStepDiagnostics d = rl::rl_meta_step(policy, goals, rc, adam, c.meta.seed, it);
        if (!std::isfinite(d.grad_norm) || !std::isfinite(d.post_return))
            throw DivergenceError("non-finite meta-gradient", it);
        return std::to_string(it) + ',' + num(d.pre_return) + ',' + num(d.post_return) + ',' + num(d.grad_norm);
    };
    auto validate_fn = [&] {
        const rl::RLEvaluation ev =
            rl::rl_adapt_and_eval(policy, val_goals, rc.algorithm, rc.inner_lr, 1, rc.episodes_per_task,
                                  c.meta.seed ^ kValidationNoiseTag, rc.env, rc.objective);
        double post = 0.0;
        for (const auto& r : ev.returns) post += r[1];
        return Validation{-post / static_cast<double>(ev.returns.size()), -1.0};
    };
    auto save = [&](const fs::path& p) {
        make_checkpoint(policy.mean, {{"log_std", policy.log_std}}, &adam).save_file(p.string());
    };
    // Validation reports the negated post-update return so that lower is better everywhere.
    return run_training(c, out, "iteration,pre_return,post_return,grad_norm", "iteration,neg_post_return", step,
                        validate_fn, save);
}

}  // namespace

TrainOutcome train(const RunConfig& config, const fs::path& out_dir) {
    config.validate();
    return config.suite == Suite::nav2d ? train_nav(config, out_dir) : train_supervised(config, out_dir);
}

// ---- evaluation ----------------------------------------------------------------------

namespace {

std::vector<EvalSummaryRow> summarize(const std::vector<EvalRecord>& records) {
    std::vector<EvalSummaryRow> rows;
    std::vector<std::pair<std::size_t, int>> keys;
    for (const auto& r : records)
        if (std::find(keys.begin(), keys.end(), std::pair{r.shots, r.step}) == keys.end())
            keys.emplace_back(r.shots, r.step);
    for (const auto& [shots, step] : keys) {
        std::vector<double> v, a;
        for (const auto& r : records)
            if (r.shots == shots && r.step == step) {
                v.push_back(r.value);
                if (r.accuracy >= 0) a.push_back(r.accuracy);
            }
        rows.push_back({shots, step, stats::mean_ci(v), stats::mean_ci(a)});
    }
    return rows;
}

}  // namespace

EvalOutcome evaluate(const RunConfig& c, const fs::path& checkpoint, const fs::path& out_dir) {
    c.validate();
    EvalOutcome out;
    if (c.suite == Suite::nav2d) {
        const rl::GaussianPolicy policy = load_policy(c, checkpoint);
        out.goals = draw_goals(c, kEvalStream, c.eval_tasks);
        const rl::RLConfig rc = c.rl_config();
        const rl::RLEvaluation ev = rl::rl_adapt_and_eval(policy, out.goals, rc.algorithm, rc.inner_lr, c.eval_steps,
                                                          c.eval_episodes, c.meta.seed, rc.env, rc.objective);
        for (std::size_t g = 0; g < ev.returns.size(); ++g)
            for (std::size_t s = 0; s < ev.returns[g].size(); ++s)
                out.records.push_back({g, 0, static_cast<int>(s), ev.returns[g][s], -1.0});
    } else {
        const SupervisedSetup setup = supervised_setup(c);
        const models::ContextModel model = load_model(c, checkpoint);
        for (std::size_t shots : eval_shots(c)) {
            // The same task stream for every budget, so budgets see the same tasks.
            tasks::Rng rng = tasks::worker_rng(c.meta.seed, kEvalStream);
            for (std::size_t t = 0; t < c.eval_tasks; ++t) {
                const auto task = draw_task(c, setup, rng, tasks::Split::test, shots, c.eval_m_test);
                const auto curve = meta::adapt_and_eval(model, task, c.meta.algorithm, c.meta.inner_lr, c.eval_steps);
                for (std::size_t s = 0; s < curve.loss.size(); ++s)
                    out.records.push_back({t, shots, static_cast<int>(s), curve.loss[s],
                                           curve.accuracy.empty() ? -1.0 : curve.accuracy[s]});
            }
        }
    }
    out.summary = summarize(out.records);

    fs::create_directories(out_dir);
    const bool nav = c.suite == Suite::nav2d;
    const bool classify = c.suite == Suite::fewshot;
    {
        std::ofstream os = open_csv(out_dir / "eval.csv", c,
                                    nav ? "task_id,goal_x,goal_y,step,return"
                                        : (classify ? "task_id,shots,step,loss,accuracy" : "task_id,shots,step,loss"));
        for (const auto& r : out.records) {
            os << r.task << ',';
            if (nav)
                os << num(out.goals[r.task][0]) << ',' << num(out.goals[r.task][1]);
            else
                os << r.shots;
            os << ',' << r.step << ',' << num(r.value);
            if (classify) os << ',' << num(r.accuracy);
            os << '\n';
        }
    }
    {
        std::string header = nav ? "step,mean_return,ci95,n" : "shots,step,mean_loss,ci95,n";
        if (classify) header += ",mean_accuracy,accuracy_ci95";
        std::ofstream os = open_csv(out_dir / "eval_summary.csv", c, header);
        for (const auto& r : out.summary) {
            if (!nav) os << r.shots << ',';
            os << r.step << ',' << num(r.value.mean) << ',' << num(r.value.ci95) << ',' << r.value.n;
            if (classify) os << ',' << num(r.accuracy.mean) << ',' << num(r.accuracy.ci95);
            os << '\n';
        }
    }
    return out;
}

// ---- embedding -----------------------------------------------------------------------

EmbeddingOutcome embed(const RunConfig& c, const fs::path& checkpoint, std::size_t num_tasks, const fs::path& out_dir) {
    c.validate();
    if (c.meta.algorithm != meta::Algorithm::cavia) throw ConfigError("embedding analysis needs algorithm=cavia");
    if (c.suite != Suite::sine && c.suite != Suite::nav2d)
        throw ConfigError("embedding analysis supports the sine and nav2d suites");
    if (num_tasks < 1) throw ConfigError("embedding analysis needs at least one task");
    const std::size_t k = c.meta.context_dim;

    std::vector<double> phis;  // row-major [num_tasks x k]
    std::vector<std::vector<double>> features;
    EmbeddingOutcome out;
    out.rows = num_tasks;
    fs::create_directories(out_dir);

    if (c.suite == Suite::sine) {
        const models::ContextModel model = load_model(c, checkpoint);
        tasks::Rng rng = tasks::worker_rng(c.meta.seed, kEmbedStream);
        out.features = {"amplitude", "sin_phase", "cos_phase"};
        features.assign(3, {});
        std::string header = "task_id,amplitude,phase";
        for (std::size_t j = 1; j <= k; ++j) header += ",phi" + std::to_string(j);
        std::ofstream os = open_csv(out_dir / "embedding.csv", c, header);
        for (std::size_t t = 0; t < num_tasks; ++t) {
            const auto task = tasks::sample_sine_task(rng, c.tasks.m_train, c.eval_m_test);
            const Array phi = meta::inner_adapt(model, task.train, LossKind::mse, c.meta.inner_lr, c.embed_steps);
            const double amp = task.descriptor[0], phase = task.descriptor[1];
            features[0].push_back(amp);
            features[1].push_back(std::sin(phase));
            features[2].push_back(std::cos(phase));
            os << t << ',' << num(amp) << ',' << num(phase);
            for (double v : phi.data) {
                os << ',' << num(v);
                phis.push_back(v);
            }
            os << '\n';
        }
    } else {
        const rl::GaussianPolicy policy = load_policy(c, checkpoint);
        const std::vector<rl::Vec2> goals = draw_goals(c, kEmbedStream, num_tasks);
        const rl::RLConfig rc = c.rl_config();
        const rl::RLEvaluation ev = rl::rl_adapt_and_eval(policy, goals, meta::Algorithm::cavia, rc.inner_lr,
                                                          c.embed_steps, c.eval_episodes, c.meta.seed, rc.env,
                                                          rc.objective);
        std::vector<Array> contexts;
        out.features = {"goal_x", "goal_y"};
        features.assign(2, {});
        for (std::size_t g = 0; g < goals.size(); ++g) {
            contexts.push_back(ev.contexts[g].back());
            phis.insert(phis.end(), contexts.back().data.begin(), contexts.back().data.end());
            features[0].push_back(goals[g][0]);
            features[1].push_back(goals[g][1]);
        }
        std::ofstream os = open_out(out_dir / "embedding.csv");
        os << "# manifest_hash=" << c.manifest_hash() << '\n';
        rl::write_embeddings_csv(os, goals, contexts);
    }

    std::ofstream os = open_csv(out_dir / "embedding_summary.csv", c, "feature,r2,n");
    for (std::size_t f = 0; f < features.size(); ++f) {
        out.r2.push_back(stats::linear_r2(phis, k, features[f]));
        os << out.features[f] << ',' << num(out.r2.back()) << ',' << num_tasks << '\n';
    }
    return out;
}

// ---- gradient norms --------------------------------------------------------------------

std::vector<GradNormRow> gradnorm(const RunConfig& c, const std::vector<std::pair<double, fs::path>>& checkpoints,
                                  std::size_t num_tasks, const fs::path& out_dir) {
    c.validate();
    if (c.suite == Suite::nav2d) throw ConfigError("gradient-norm analysis supports the supervised suites");
    if (c.meta.algorithm != meta::Algorithm::cavia) throw ConfigError("gradient-norm analysis needs algorithm=cavia");
    if (checkpoints.empty()) throw ConfigError("gradient-norm analysis needs at least one checkpoint");
    for (const auto& [lr, path] : checkpoints)
        if (!fs::exists(path)) throw ConfigError("no checkpoint for inner_lr=" + num(lr) + ": " + path.string());

    const SupervisedSetup setup = supervised_setup(c);
    std::vector<tasks::SupervisedTask> task_list;
    tasks::Rng rng = tasks::worker_rng(c.meta.seed, kEvalStream);
    for (std::size_t t = 0; t < num_tasks; ++t)
        task_list.push_back(draw_task(c, setup, rng, tasks::Split::test, eval_shots(c).front(), c.eval_m_test));

    std::vector<GradNormRow> rows;
    for (const auto& [lr, path] : checkpoints) {
        const models::ContextModel model = load_model(c, path);
        std::vector<double> norms;
        for (const auto& t : task_list) norms.push_back(meta::context_gradient_norm(model, t));
        rows.push_back({lr, stats::mean_ci(norms)});
    }
    fs::create_directories(out_dir);
    std::ofstream os = open_csv(out_dir / "gradnorm.csv", c, "inner_lr,mean_grad_norm,ci95,lr_times_norm,n");
    for (const auto& r : rows)
        os << num(r.inner_lr) << ',' << num(r.norm.mean) << ',' << num(r.norm.ci95) << ','
           << num(r.inner_lr * r.norm.mean) << ',' << r.norm.n << '\n';
    return rows;
}

// ---- sweeps ------------------------------------------------------------------------------

void SweepSpec::validate() const {
    if (parameter != "inner_lr" && parameter != "context_dim" && parameter != "hidden_width")
        throw ConfigError("sweep parameter must be inner_lr, context_dim or hidden_width, got '" + parameter + "'");
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
}

std::string compact_number(double v) {
    std::ostringstream os;
    os << std::setprecision(15) << v;
    return os.str();
}

fs::path sweep_cell_dir(const std::string& parameter, double value, std::uint64_t seed) {
    return fs::path(parameter + "=" + compact_number(value)) / ("seed=" + std::to_string(seed));
}

RunConfig apply_sweep_value(const RunConfig& base, const std::string& parameter, double value, std::uint64_t seed) {
    KeyValues kv = base.to_key_values();
    kv.set("seed", std::to_string(seed));
    if (parameter == "inner_lr") {
        kv.set("inner_lr", num(value));
    } else {
        if (!(value >= 0) || value != std::floor(value))
            throw ConfigError(parameter + " values must be non-negative integers");
        const std::string n = std::to_string(static_cast<std::size_t>(value));
        if (parameter == "context_dim") {
            kv.set("context_dim", n);
        } else if (parameter == "hidden_width") {
            std::string h;
            for (std::size_t i = 0; i < base.hidden.size(); ++i) h += (i ? "," : "") + n;
            kv.set("hidden", h);
        } else {
            throw ConfigError("unknown sweep parameter '" + parameter + "'");
        }
    }
    return RunConfig::from_key_values(kv);
}

std::vector<SweepCell> sweep(const RunConfig& base, const SweepSpec& spec, const fs::path& out_dir) {
    spec.validate();
    base.validate();
    fs::create_directories(out_dir);
    std::vector<SweepCell> cells;
    for (double value : spec.values)
        for (std::uint64_t seed : spec.seeds) {
            SweepCell cell;
            cell.value = value;
            cell.seed = seed;
            cell.dir = out_dir / sweep_cell_dir(spec.parameter, value, seed);
            try {
                const RunConfig cfg = apply_sweep_value(base, spec.parameter, value, seed);
                const TrainOutcome t = train(cfg, cell.dir);
                const EvalOutcome e = evaluate(cfg, t.best_checkpoint, cell.dir);
                const int post_step = std::min(cfg.meta.inner_steps, cfg.eval_steps);
                const std::size_t shots = eval_shots(cfg).front();
                for (const auto& row : e.summary) {
                    if (row.shots != shots) continue;
                    if (row.step == 0) cell.pre_loss = row.value.mean;
                    if (row.step == post_step) {
                        cell.post_loss = row.value.mean;
                        cell.post_ci95 = row.value.ci95;
                    }
                }
                cell.status = "ok";
            } catch (const DivergenceError&) {
                cell.status = "diverged";
            } catch (const Error& e) {
                cell.status = "failed";
                fs::create_directories(cell.dir);
                std::ofstream(cell.dir / "failure.txt") << "status = failed\nreason = " << e.what() << '\n';
            }
            cells.push_back(cell);
        }

    // Both files hash the base configuration; each cell's own manifest sits in its directory.
    {
        std::ofstream os = open_csv(out_dir / "sweep_cells.csv", base, "parameter,value,seed,status,pre,post,post_ci95,dir");
        for (const auto& c : cells) {
            os << spec.parameter << ',' << num(c.value) << ',' << c.seed << ',' << c.status << ',';
            if (c.status == "ok") os << num(c.pre_loss) << ',' << num(c.post_loss) << ',' << num(c.post_ci95);
            else os << ",,";
            os << ',' << sweep_cell_dir(spec.parameter, c.value, c.seed).string() << '\n';
        }
    }
    std::ofstream os = open_csv(out_dir / "sweep.csv", base, "parameter,value,cells_ok,cells_failed,post_mean,post_ci95");
    for (double value : spec.values) {
        std::vector<double> posts;
        double single_ci = 0.0;
        std::size_t failed = 0;
        for (const auto& c : cells) {
            if (c.value != value) continue;
            if (c.status == "ok") {
                posts.push_back(c.post_loss);
                single_ci = c.post_ci95;
            } else {
                ++failed;
            }
        }
        os << spec.parameter << ',' << num(value) << ',' << posts.size() << ',' << failed << ',';
        if (posts.empty()) {
            os << ",\n";
            continue;
        }
        // One seed: the task-level interval of that run; several: across seeds.
        const stats::MeanCI m = stats::mean_ci(posts);
        os << num(m.mean) << ',' << num(posts.size() == 1 ? single_ci : m.ci95) << '\n';
    }
    return cells;
}

}  // namespace cavia::exp
