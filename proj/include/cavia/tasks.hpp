#pragma once

// Task distributions for the supervised experiments: sine regression, image
// completion on procedural 32x32 images, and N-way K-shot classification over
// Gaussian-cluster classes.
//
// Every sampler is a pure function of the generator state it is handed, so a
// seed reproduces the same task stream bit for bit.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "cavia/array.hpp"
#include "cavia/config.hpp"

namespace cavia::tasks {

using Rng = std::mt19937_64;

// Independent stream for worker `worker_id` of a run seeded with `base_seed`.
Rng worker_rng(std::uint64_t base_seed, std::uint64_t worker_id);

enum class LossKind { mse, cross_entropy };

struct Dataset {
    Array x;  // [M x d_in]
    Array y;  // [M x d_out]; class labels as a single column for cross_entropy

    std::size_t size() const { return x.rows(); }
    // Labels of a classification set as ints.
    std::vector<int> labels() const;
};

struct SupervisedTask {
    Dataset train;
    Dataset test;
    // Parameters that generated the task. Analysis only; no loss reads it.
    std::vector<double> descriptor;
    LossKind loss = LossKind::mse;
    std::size_t num_classes = 0;  // cross_entropy only

    void validate() const;  // throws DimensionError
};

// ---- sine regression -------------------------------------------------------

struct SineRanges {
    double amplitude_lo = 0.1;
    double amplitude_hi = 0.5;
    double phase_lo = 0.0;
    double phase_hi = 3.14159265358979323846;
    double x_lo = -5.0;
    double x_hi = 5.0;
};

double sine_target(double amplitude, double phase, double x);

// Draw order: amplitude, phase, train inputs, test inputs.
SupervisedTask sample_sine_task(Rng& rng, std::size_t m_train = 10, std::size_t m_test = 100,
                                const SineRanges& ranges = {});

// ---- image completion ------------------------------------------------------

enum class PixelMode { random, ordered };

PixelMode parse_pixel_mode(const std::string& text);
const char* pixel_mode_name(PixelMode mode);

// A procedural colour image on [0,1]^2: a base colour plus 3 to 6 smooth
// radial or sinusoidal colour fields, clamped to [0,1]^3.
class ImageFunction {
public:
    explicit ImageFunction(std::uint64_t seed);

    std::uint64_t seed() const noexcept { return seed_; }
    std::array<double, 3> operator()(double u, double v) const;
    std::size_t field_count() const noexcept { return fields_.size(); }

private:
    struct Field {
        bool radial = true;
        double cx = 0, cy = 0, width = 0;    // radial
        double fx = 0, fy = 0, phase = 0;    // sinusoidal
        std::array<double, 3> colour{};
    };
    std::uint64_t seed_;
    std::array<double, 3> base_{};
    std::vector<Field> fields_;
};

// Pixel (r, c) of a grid x grid image sits at (r / (grid-1), c / (grid-1)).
// The test set is the full image in row-major order. The descriptor holds the
// image seed.
SupervisedTask sample_completion_task(Rng& rng, std::size_t k, PixelMode mode, std::size_t grid = 32);

// ---- few-shot classification -----------------------------------------------

enum class Split { train, val, test };

Split parse_split(const std::string& text);
const char* split_name(Split split);

struct ClassPoolConfig {
    std::size_t dim = 20;
    std::size_t train_classes = 2000;
    std::size_t val_classes = 200;
    std::size_t test_classes = 200;
    double mean_range = 3.0;  // means uniform in [-r, r]^dim
    double stddev = 1.0;
    std::uint64_t seed = 7;
};

// Class means for the three disjoint pools. Class ids are global: train pool
// first, then val, then test.
class ClassPools {
public:
    explicit ClassPools(const ClassPoolConfig& config);

    const ClassPoolConfig& config() const noexcept { return config_; }
    std::size_t pool_size(Split split) const;
    std::size_t first_id(Split split) const;
    const std::vector<double>& mean(std::size_t class_id) const { return means_[class_id]; }

private:
    ClassPoolConfig config_;
    std::vector<std::vector<double>> means_;
};

struct FewShotEpisode {
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    std::size_t q_query = 0;
    std::vector<std::size_t> class_ids;  // class_ids[label] is the pool class behind that label
    Dataset support;
    Dataset query;

    SupervisedTask as_task() const;
};

// Picks N distinct classes, assigns them a fresh random label permutation,
// then draws K support and Q query points per class independently.
FewShotEpisode sample_classification_episode(Rng& rng, const ClassPools& pools, std::size_t n_way,
                                             std::size_t k_shot, std::size_t q_query, Split split);

// ---- suite configuration and exchange format --------------------------------

struct SuiteConfig {
    std::string suite = "sine";  // sine | completion | fewshot | nav2d (no supervised tasks)
    std::size_t m_train = 10;
    std::size_t m_test = 100;
    std::vector<std::size_t> shots = {10};
    std::size_t grid = 32;
    PixelMode pixel_mode = PixelMode::random;
    std::size_t n_way = 5;
    std::size_t q_query = 15;
    ClassPoolConfig pools;
    std::uint64_t seed = 0;

    static SuiteConfig from_key_values(const KeyValues& kv);
    KeyValues to_key_values() const;
    void validate() const;  // throws ConfigError
};

// One row per datapoint: task_id,split,x0..,y0..; the header names the widths.
void write_tasks_csv(std::ostream& os, const std::vector<SupervisedTask>& tasks);
// Descriptors are not part of the exchange format and come back empty.
std::vector<SupervisedTask> read_tasks_csv(std::istream& is, LossKind loss = LossKind::mse,
                                           std::size_t num_classes = 0);

}  // namespace cavia::tasks
