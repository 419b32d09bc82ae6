// Command-line driver: train, eval, sweep, embed, gradnorm.
//
// Exit codes: 0 success, 2 configuration error, 3 load error, 4 divergence,
// 1 anything else.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cavia/checkpoint.hpp"
#include "cavia/errors.hpp"
#include "cavia/experiment.hpp"

namespace fs = std::filesystem;
using namespace cavia;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kLoad = 3, kDivergence = 4 };

struct CommonFlags {
    std::string config;
    std::string suite, algorithm, context_dim, inner_lr, inner_steps, meta_batch, seed;
    bool first_order = false;
    std::vector<std::string> sets;
    std::string out;
    std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "key = value configuration file");
    cmd->add_option("--suite", f.suite, "sine | completion | fewshot | nav2d");
    cmd->add_option("--algorithm", f.algorithm, "cavia | maml");
    cmd->add_flag("--first-order", f.first_order, "drop second-order terms of the meta-gradient");
    cmd->add_option("--context-dim", f.context_dim, "context parameters K (extra inputs for maml)");
    cmd->add_option("--inner-lr", f.inner_lr, "inner-loop learning rate");
    cmd->add_option("--inner-steps", f.inner_steps, "inner-loop gradient steps");
    cmd->add_option("--meta-batch", f.meta_batch, "tasks per meta-update");
    cmd->add_option("--seed", f.seed, "run seed");
    cmd->add_option("--set", f.sets, "extra key=value override (repeatable)");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--checkpoint", f.checkpoint, "checkpoint file");
}

// File first, then flags. Without --config the manifest next to the checkpoint
// (if any) supplies the configuration.
KeyValues gather(const CommonFlags& f, const std::string& fallback_manifest = {}) {
    KeyValues kv;
    if (!f.config.empty()) {
        kv = KeyValues::parse_file(f.config);
    } else if (!fallback_manifest.empty() && fs::exists(fallback_manifest)) {
        kv = KeyValues::parse_file(fallback_manifest);
    }
    auto put = [&](const char* key, const std::string& v) {
        if (!v.empty()) kv.set(key, v);
    };
    put("suite", f.suite);
    put("algorithm", f.algorithm);
    put("context_dim", f.context_dim);
    put("inner_lr", f.inner_lr);
    put("inner_steps", f.inner_steps);
    put("meta_batch", f.meta_batch);
    put("seed", f.seed);
    if (f.first_order) kv.set("first_order", "true");
    for (const auto& s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return kv;
}

std::string manifest_beside(const std::string& checkpoint) {
    if (checkpoint.empty()) return {};
    return (fs::path(checkpoint).parent_path() / "manifest.txt").string();
}

std::string require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string(flag) + " is required");
    return value;
}

std::vector<double> parse_list(const std::string& text, const char* what) {
    KeyValues kv;
    kv.set(what, text);
    return kv.get_list(what, {});
}

void print_summary(const std::vector<exp::EvalSummaryRow>& rows, bool nav) {
    for (const auto& r : rows) {
        if (nav)
            std::printf("step %d  return %.4f +- %.4f\n", r.step, r.value.mean, r.value.ci95);
        else if (r.accuracy.n)
            std::printf("shots %zu step %d  loss %.4f +- %.4f  accuracy %.4f +- %.4f\n", r.shots, r.step, r.value.mean,
                        r.value.ci95, r.accuracy.mean, r.accuracy.ci95);
        else
            std::printf("shots %zu step %d  loss %.5f +- %.5f\n", r.shots, r.step, r.value.mean, r.value.ci95);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CAVIA / MAML meta-learning experiments"};
    app.require_subcommand(1);

    CommonFlags train_f, eval_f, sweep_f, embed_f, grad_f;
    std::size_t eval_tasks = 0, embed_tasks = 0, grad_tasks = 100;
    int eval_steps = -1;
    std::string sweep_param, sweep_values, sweep_seeds, grad_dir, grad_values, grad_seed_cell = "0";

    auto* train_cmd = app.add_subcommand("train", "meta-train a model");
    add_common(train_cmd, train_f);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on unseen tasks");
    add_common(eval_cmd, eval_f);
    eval_cmd->add_option("--num-tasks", eval_tasks, "evaluation tasks (default from config)");
    eval_cmd->add_option("--steps", eval_steps, "adaptation steps (default from config)");

    auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate one run per value and seed");
    add_common(sweep_cmd, sweep_f);
    sweep_cmd->add_option("--param", sweep_param, "inner_lr | context_dim | hidden_width")->required();
    sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();
    sweep_cmd->add_option("--seeds", sweep_seeds, "comma-separated replicate seeds (default: --seed or 0)");

    auto* embed_cmd = app.add_subcommand("embed", "adapted context vs task descriptor");
    add_common(embed_cmd, embed_f);
    embed_cmd->add_option("--num-tasks", embed_tasks, "tasks (default 1000 sine, 200 nav2d)");

    auto* grad_cmd = app.add_subcommand("gradnorm", "context-gradient norms of an inner_lr sweep");
    add_common(grad_cmd, grad_f);
    grad_cmd->add_option("--sweep-dir", grad_dir, "output directory of an inner_lr sweep")->required();
    grad_cmd->add_option("--values", grad_values, "comma-separated inner learning rates")->required();
    grad_cmd->add_option("--cell-seed", grad_seed_cell, "replicate seed of the cells to read");
    grad_cmd->add_option("--num-tasks", grad_tasks, "tasks per checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*train_cmd) {
            const exp::RunConfig cfg = exp::RunConfig::from_key_values(gather(train_f));
            const fs::path out = require(train_f.out, "--out");
            const exp::TrainOutcome t = exp::train(cfg, out);
            std::printf("trained %lld iterations; best validation %.6g\nmanifest %s\ncheckpoint %s\n",
                        static_cast<long long>(t.iterations_done), t.best_validation, cfg.manifest_hash().c_str(),
                        t.best_checkpoint.c_str());
        } else if (*eval_cmd) {
            const std::string ckpt = require(eval_f.checkpoint, "--checkpoint");
            KeyValues kv = gather(eval_f, manifest_beside(ckpt));
            if (eval_tasks) kv.set("eval_tasks", std::to_string(eval_tasks));
            if (eval_steps >= 0) kv.set("eval_steps", std::to_string(eval_steps));
            const exp::RunConfig cfg = exp::RunConfig::from_key_values(kv);
            const fs::path out = eval_f.out.empty() ? fs::path(ckpt).parent_path() : fs::path(eval_f.out);
            const exp::EvalOutcome e = exp::evaluate(cfg, ckpt, out);
            print_summary(e.summary, cfg.suite == exp::Suite::nav2d);
        } else if (*sweep_cmd) {
            const exp::RunConfig cfg = exp::RunConfig::from_key_values(gather(sweep_f));
            exp::SweepSpec spec;
            spec.parameter = sweep_param;
            spec.values = parse_list(sweep_values, "values");
            spec.seeds = {cfg.meta.seed};
            if (!sweep_seeds.empty()) {
                spec.seeds.clear();
                for (double s : parse_list(sweep_seeds, "seeds")) {
                    if (s < 0 || s != static_cast<double>(static_cast<std::uint64_t>(s)))
                        throw ConfigError("seeds must be non-negative integers");
                    spec.seeds.push_back(static_cast<std::uint64_t>(s));
                }
            }
            const auto cells = exp::sweep(cfg, spec, require(sweep_f.out, "--out"));
            for (const auto& c : cells)
                std::printf("%s=%s seed=%llu  %s  post %.6g\n", spec.parameter.c_str(),
                            exp::compact_number(c.value).c_str(), static_cast<unsigned long long>(c.seed),
                            c.status.c_str(), c.post_loss);
        } else if (*embed_cmd) {
            const std::string ckpt = require(embed_f.checkpoint, "--checkpoint");
            const exp::RunConfig cfg = exp::RunConfig::from_key_values(gather(embed_f, manifest_beside(ckpt)));
            const std::size_t n = embed_tasks ? embed_tasks : (cfg.suite == exp::Suite::nav2d ? 200 : 1000);
            const fs::path out = embed_f.out.empty() ? fs::path(ckpt).parent_path() : fs::path(embed_f.out);
            const exp::EmbeddingOutcome e = exp::embed(cfg, ckpt, n, out);
            for (std::size_t i = 0; i < e.features.size(); ++i)
                std::printf("%-10s R^2 %.4f\n", e.features[i].c_str(), e.r2[i]);
        } else if (*grad_cmd) {
            const std::vector<double> lrs = parse_list(grad_values, "values");
            if (lrs.empty()) throw ConfigError("--values lists no learning rate");
            const long cell_seed = parse_long_strict(grad_seed_cell, "--cell-seed");
            if (cell_seed < 0) throw ConfigError("--cell-seed must be non-negative");
            std::vector<std::pair<double, fs::path>> ckpts;
            for (double lr : lrs)
                ckpts.emplace_back(lr, fs::path(grad_dir) /
                                           exp::sweep_cell_dir("inner_lr", lr, static_cast<std::uint64_t>(cell_seed)) /
                                           "checkpoint_best.ckpt");
            const std::string manifest = (ckpts.front().second.parent_path() / "manifest.txt").string();
            const exp::RunConfig cfg = exp::RunConfig::from_key_values(gather(grad_f, manifest));
            const fs::path out = grad_f.out.empty() ? fs::path(grad_dir) : fs::path(grad_f.out);
            for (const auto& r : exp::gradnorm(cfg, ckpts, grad_tasks, out))
                std::printf("inner_lr %-8g mean |grad phi| %.6g  lr x norm %.6g\n", r.inner_lr, r.norm.mean,
                            r.inner_lr * r.norm.mean);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kConfig;
    } catch (const LoadError& e) {
        std::fprintf(stderr, "load error: %s\n", e.what());
        return kLoad;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return kDivergence;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kOther;
    }
    return kOk;
}
