#pragma once

// Experiment plumbing shared by the command-line driver and the acceptance
// suite: run configuration, manifests, training and evaluation runs, sweeps,
// embedding and gradient-norm analyses. Every CSV written here starts with a
// `# manifest_hash=<hex>` line and prints numbers with 17 significant digits.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cavia/config.hpp"
#include "cavia/metarl.hpp"
#include "cavia/metasup.hpp"
#include "cavia/models.hpp"
#include "cavia/stats.hpp"
#include "cavia/tasks.hpp"

namespace cavia::exp {

inline constexpr const char* kArtifactVersion = "cavia-artifact 1.0.0";

enum class Suite { sine, completion, fewshot, nav2d };

Suite parse_suite(const std::string& text);
const char* suite_name(Suite s);

struct RunConfig {
    Suite suite = Suite::sine;
    tasks::SuiteConfig tasks;
    meta::MetaConfig meta;
    rl::RLConfig rl;  // nav2d only; algorithm, step sizes and seed mirror `meta`

    std::vector<std::size_t> hidden = {40, 40};
    models::Activation activation = models::Activation::relu;
    models::Conditioning conditioning = models::Conditioning::concat_at_input;
    std::size_t film_layer = 0;

    std::int64_t iterations = 20000;
    std::int64_t checkpoint_every = 1000;
    std::int64_t validate_every = 500;
    std::size_t validation_tasks = 100;

    std::size_t eval_tasks = 1000;
    int eval_steps = 10;
    std::size_t eval_m_test = 100;     // sine test points per evaluation task
    std::size_t eval_episodes = 20;    // nav2d rollouts per goal and step
    int embed_steps = 5;

    // Suite-specific defaults, before any key is applied.
    static RunConfig defaults(Suite suite);
    // Defaults for kv["suite"], then every key in `kv`. Unknown keys and bad
    // values throw ConfigError naming the key.
    static RunConfig from_key_values(const KeyValues& kv);
    static RunConfig load(const std::filesystem::path& path);

    // Complete, canonical key list for this suite.
    KeyValues to_key_values() const;
    // FNV-1a over the artifact version and the canonical keys, 16 hex digits.
    std::string manifest_hash() const;

    models::Architecture architecture() const;
    // The RL loop settings with the shared meta fields copied in.
    rl::RLConfig rl_config() const;
    void validate() const;
};

// All keys accepted by RunConfig::from_key_values.
const std::vector<std::string>& known_keys();

// ---- runs -------------------------------------------------------------------------

struct TrainOutcome {
    std::filesystem::path final_checkpoint;
    std::filesystem::path best_checkpoint;
    std::int64_t iterations_done = 0;
    double best_validation = 0.0;  // loss (supervised) or negated return (nav2d)
    bool diverged = false;
    std::string failure;
};

// Writes into `out_dir`: manifest.txt, diagnostics.csv, validation.csv,
// timing.csv (wall clock, not reproducible by nature), checkpoint_last.ckpt every
// checkpoint_every iterations, checkpoint_best.ckpt, checkpoint_final.ckpt.
// On divergence writes failure.txt, keeps the partial outputs and rethrows.
TrainOutcome train(const RunConfig& config, const std::filesystem::path& out_dir);

struct EvalRecord {
    std::size_t task = 0;
    std::size_t shots = 0;  // train-set size (supervised)
    int step = 0;
    double value = 0.0;     // test loss, or mean episode return for nav2d
    double accuracy = -1.0; // classification only
};

struct EvalSummaryRow {
    std::size_t shots = 0;
    int step = 0;
    stats::MeanCI value;
    stats::MeanCI accuracy;  // n = 0 unless classification
};

struct EvalOutcome {
    std::vector<EvalRecord> records;
    std::vector<EvalSummaryRow> summary;
    std::vector<rl::Vec2> goals;  // nav2d
};

// Loads the checkpoint, draws eval_tasks unseen tasks (meta-test split for
// few-shot) and records the test metric after 0..eval_steps updates. Writes
// eval.csv and eval_summary.csv into `out_dir`.
EvalOutcome evaluate(const RunConfig& config, const std::filesystem::path& checkpoint,
                     const std::filesystem::path& out_dir);

struct EmbeddingOutcome {
    std::vector<std::string> features;
    std::vector<double> r2;
    std::size_t rows = 0;
};

// Adapted contexts after `embed_steps` updates on `num_tasks` fresh tasks next
// to the task descriptor; R^2 of linear read-outs of amplitude, sin/cos phase
// (sine) or goal x/y (nav2d). Writes embedding.csv and embedding_summary.csv.
EmbeddingOutcome embed(const RunConfig& config, const std::filesystem::path& checkpoint, std::size_t num_tasks,
                       const std::filesystem::path& out_dir);

struct GradNormRow {
    double inner_lr = 0.0;
    stats::MeanCI norm;
};

// Mean ||grad_phi L_train|| at phi = 0 over `num_tasks` test tasks for each
// (inner_lr, checkpoint) pair. Writes gradnorm.csv.
std::vector<GradNormRow> gradnorm(const RunConfig& config,
                                  const std::vector<std::pair<double, std::filesystem::path>>& checkpoints,
                                  std::size_t num_tasks, const std::filesystem::path& out_dir);

struct SweepSpec {
    std::string parameter;  // inner_lr | context_dim | hidden_width
    std::vector<double> values;
    std::vector<std::uint64_t> seeds = {0};

    void validate() const;
};

struct SweepCell {
    double value = 0.0;
    std::uint64_t seed = 0;
    std::string status;  // ok | diverged | failed
    std::filesystem::path dir;
    double pre_loss = 0.0;   // mean eval metric at step 0
    double post_loss = 0.0;  // mean eval metric after inner_steps updates
    double post_ci95 = 0.0;
};

// Applies one sweep value to a configuration (suite-aware).
RunConfig apply_sweep_value(const RunConfig& base, const std::string& parameter, double value, std::uint64_t seed);
// Sub-directory name of a sweep cell, e.g. "inner_lr=0.1/seed=0".
std::filesystem::path sweep_cell_dir(const std::string& parameter, double value, std::uint64_t seed);

// Trains and evaluates every (value, seed) cell under `out_dir`; failed cells are
// marked and the sweep continues. Writes sweep_cells.csv and sweep.csv.
std::vector<SweepCell> sweep(const RunConfig& base, const SweepSpec& spec, const std::filesystem::path& out_dir);

// Short decimal rendering used in directory names ("0.01", "10").
std::string compact_number(double v);

}  // namespace cavia::exp
