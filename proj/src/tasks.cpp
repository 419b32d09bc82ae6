#include "cavia/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cavia/checkpoint.hpp"
#include "cavia/errors.hpp"

namespace cavia::tasks {

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// First `k` entries of a uniformly random permutation of 0..n-1 (partial Fisher-Yates).
std::vector<std::size_t> draw_without_replacement(Rng& rng, std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
    idx.resize(k);
    return idx;
}

}  // namespace

Rng worker_rng(std::uint64_t base_seed, std::uint64_t worker_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                      static_cast<std::uint32_t>(worker_id), static_cast<std::uint32_t>(worker_id >> 32)};
    return Rng(seq);
}

std::vector<int> Dataset::labels() const {
    if (y.rank() != 2 || y.cols() != 1) throw DimensionError("labels need a single target column");
    std::vector<int> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<int>(y[i]);
    return out;
}

void SupervisedTask::validate() const {
    for (const Dataset* d : {&train, &test}) {
        if (d->x.rank() != 2 || d->y.rank() != 2 || d->x.rows() != d->y.rows())
            throw DimensionError("dataset inputs " + shape_str(d->x.shape) + " and targets " +
                                 shape_str(d->y.shape) + " disagree");
        if (d->x.rows() == 0) throw DimensionError("empty dataset");
    }
    if (train.x.cols() != test.x.cols() || train.y.cols() != test.y.cols())
        throw DimensionError("train and test sets have different widths");
}

// ---- sine ------------------------------------------------------------------

double sine_target(double amplitude, double phase, double x) { return amplitude * std::sin(x - phase); }

SupervisedTask sample_sine_task(Rng& rng, std::size_t m_train, std::size_t m_test, const SineRanges& r) {
    if (m_train == 0 || m_test == 0) throw DomainError("sine task needs at least one train and one test point");
    const double a = uniform(rng, r.amplitude_lo, r.amplitude_hi);
    const double p = uniform(rng, r.phase_lo, r.phase_hi);
    auto make = [&](std::size_t m) {
        Dataset d{Array(Shape{m, 1}), Array(Shape{m, 1})};
        for (std::size_t i = 0; i < m; ++i) {
            d.x[i] = uniform(rng, r.x_lo, r.x_hi);
            d.y[i] = sine_target(a, p, d.x[i]);
        }
        return d;
    };
    SupervisedTask t;
    t.train = make(m_train);
    t.test = make(m_test);
    t.descriptor = {a, p};
    return t;
}

// ---- image completion ------------------------------------------------------

PixelMode parse_pixel_mode(const std::string& text) {
    if (text == "random") return PixelMode::random;
    if (text == "ordered") return PixelMode::ordered;
    throw ConfigError("unknown pixel mode '" + text + "'");
}

const char* pixel_mode_name(PixelMode mode) { return mode == PixelMode::random ? "random" : "ordered"; }

ImageFunction::ImageFunction(std::uint64_t seed) : seed_(seed) {
    Rng rng(seed);
    for (double& c : base_) c = uniform(rng, 0.25, 0.75);
    const int n = std::uniform_int_distribution<int>(3, 6)(rng);
    for (int i = 0; i < n; ++i) {
        Field f;
        f.radial = uniform(rng, 0.0, 1.0) < 0.5;
        if (f.radial) {
            f.cx = uniform(rng, 0.0, 1.0);
            f.cy = uniform(rng, 0.0, 1.0);
            f.width = uniform(rng, 0.1, 0.4);
            for (double& c : f.colour) c = uniform(rng, -0.6, 0.6);
        } else {
            f.fx = uniform(rng, -2.0, 2.0);
            f.fy = uniform(rng, -2.0, 2.0);
            f.phase = uniform(rng, 0.0, 2.0 * kPi);
            for (double& c : f.colour) c = uniform(rng, -0.3, 0.3);
        }
        fields_.push_back(f);
    }
}

std::array<double, 3> ImageFunction::operator()(double u, double v) const {
    std::array<double, 3> rgb = base_;
    for (const Field& f : fields_) {
        double w;
        if (f.radial) {
            const double d2 = (u - f.cx) * (u - f.cx) + (v - f.cy) * (v - f.cy);
            w = std::exp(-d2 / (2.0 * f.width * f.width));
        } else {
            w = std::sin(2.0 * kPi * (f.fx * u + f.fy * v) + f.phase);
        }
        for (int c = 0; c < 3; ++c) rgb[c] += w * f.colour[c];
    }
    for (double& c : rgb) c = std::clamp(c, 0.0, 1.0);
    return rgb;
}

SupervisedTask sample_completion_task(Rng& rng, std::size_t k, PixelMode mode, std::size_t grid) {
    if (grid < 2) throw DomainError("image grid must be at least 2x2");
    const std::size_t total = grid * grid;
    if (k == 0 || k > total)
        throw DomainError("pixel budget " + std::to_string(k) + " outside [1, " + std::to_string(total) + "]");
    const std::uint64_t seed = rng();
    const ImageFunction image(seed);

    SupervisedTask t;
    t.test = {Array(Shape{total, 2}), Array(Shape{total, 3})};
    const double scale = 1.0 / static_cast<double>(grid - 1);
    for (std::size_t r = 0; r < grid; ++r)
        for (std::size_t c = 0; c < grid; ++c) {
            const std::size_t i = r * grid + c;
            const double u = static_cast<double>(r) * scale, v = static_cast<double>(c) * scale;
            t.test.x.at(i, 0) = u;
            t.test.x.at(i, 1) = v;
            const auto rgb = image(u, v);
            for (std::size_t ch = 0; ch < 3; ++ch) t.test.y.at(i, ch) = rgb[ch];
        }

    std::vector<std::size_t> pick;
    if (mode == PixelMode::ordered) {
        pick.resize(k);
        std::iota(pick.begin(), pick.end(), std::size_t{0});
    } else {
        pick = draw_without_replacement(rng, total, k);
    }
    t.train = {Array(Shape{k, 2}), Array(Shape{k, 3})};
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t d = 0; d < 2; ++d) t.train.x.at(j, d) = t.test.x.at(pick[j], d);
        for (std::size_t d = 0; d < 3; ++d) t.train.y.at(j, d) = t.test.y.at(pick[j], d);
    }
    t.descriptor = {static_cast<double>(seed)};
    return t;
}

// ---- few-shot classification -----------------------------------------------

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "val") return Split::val;
    if (text == "test") return Split::test;
    throw ConfigError("unknown split '" + text + "'");
}

const char* split_name(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

ClassPools::ClassPools(const ClassPoolConfig& config) : config_(config) {
    if (config.dim == 0) throw ConfigError("class dimension must be positive");
    if (!(config.stddev > 0.0)) throw ConfigError("class stddev must be positive");
    Rng rng(config.seed);
    const std::size_t total = config.train_classes + config.val_classes + config.test_classes;
    means_.resize(total, std::vector<double>(config.dim));
    for (auto& m : means_)
        for (double& v : m) v = uniform(rng, -config.mean_range, config.mean_range);
}

std::size_t ClassPools::pool_size(Split split) const {
    switch (split) {
        case Split::train: return config_.train_classes;
        case Split::val: return config_.val_classes;
        case Split::test: return config_.test_classes;
    }
    return 0;
}

std::size_t ClassPools::first_id(Split split) const {
    switch (split) {
        case Split::train: return 0;
        case Split::val: return config_.train_classes;
        case Split::test: return config_.train_classes + config_.val_classes;
    }
    return 0;
}

SupervisedTask FewShotEpisode::as_task() const {
    SupervisedTask t;
    t.train = support;
    t.test = query;
    t.descriptor.assign(class_ids.begin(), class_ids.end());
    t.loss = LossKind::cross_entropy;
    t.num_classes = n_way;
    return t;
}

FewShotEpisode sample_classification_episode(Rng& rng, const ClassPools& pools, std::size_t n_way,
                                             std::size_t k_shot, std::size_t q_query, Split split) {
    const std::size_t pool = pools.pool_size(split);
    if (n_way == 0 || k_shot == 0 || q_query == 0) throw ConfigError("episode sizes must be positive");
    if (pool < n_way)
        throw ConfigError(std::string(split_name(split)) + " pool has " + std::to_string(pool) +
                          " classes, episode needs " + std::to_string(n_way));

    FewShotEpisode ep;
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    ep.q_query = q_query;
    const auto chosen = draw_without_replacement(rng, pool, n_way);
    const auto perm = draw_without_replacement(rng, n_way, n_way);
    ep.class_ids.resize(n_way);
    for (std::size_t i = 0; i < n_way; ++i) ep.class_ids[perm[i]] = pools.first_id(split) + chosen[i];

    const std::size_t d = pools.config().dim;
    std::normal_distribution<double> noise(0.0, pools.config().stddev);
    auto fill = [&](Dataset& set, std::size_t per_class) {
        set = {Array(Shape{n_way * per_class, d}), Array(Shape{n_way * per_class, 1})};
        std::size_t row = 0;
        for (std::size_t label = 0; label < n_way; ++label) {
            const auto& mu = pools.mean(ep.class_ids[label]);
            for (std::size_t j = 0; j < per_class; ++j, ++row) {
                for (std::size_t c = 0; c < d; ++c) set.x.at(row, c) = mu[c] + noise(rng);
                set.y[row] = static_cast<double>(label);
            }
        }
    };
    fill(ep.support, k_shot);
    fill(ep.query, q_query);
    return ep;
}

// ---- suite configuration ---------------------------------------------------

SuiteConfig SuiteConfig::from_key_values(const KeyValues& kv) {
    kv.require_known({"suite", "m_train", "m_test", "shots", "grid", "pixel_mode", "n_way", "q_query", "dim",
                      "train_classes", "val_classes", "test_classes", "mean_range", "stddev", "pool_seed",
                      "seed"});
    SuiteConfig s;
    auto count = [&](const char* key, std::size_t fallback) {
        const long v = kv.get_long(key, static_cast<long>(fallback));
        if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    s.suite = kv.get_or("suite", s.suite);
    s.m_train = count("m_train", s.m_train);
    s.m_test = count("m_test", s.m_test);
    if (kv.contains("shots")) {
        s.shots.clear();
        for (double v : kv.get_list("shots", {})) {
            if (v < 0 || v != std::floor(v)) throw ConfigError("shots must be non-negative integers");
            s.shots.push_back(static_cast<std::size_t>(v));
        }
    }
    s.grid = count("grid", s.grid);
    s.pixel_mode = parse_pixel_mode(kv.get_or("pixel_mode", pixel_mode_name(s.pixel_mode)));
    s.n_way = count("n_way", s.n_way);
    s.q_query = count("q_query", s.q_query);
    s.pools.dim = count("dim", s.pools.dim);
    s.pools.train_classes = count("train_classes", s.pools.train_classes);
    s.pools.val_classes = count("val_classes", s.pools.val_classes);
    s.pools.test_classes = count("test_classes", s.pools.test_classes);
    s.pools.mean_range = kv.get_double("mean_range", s.pools.mean_range);
    s.pools.stddev = kv.get_double("stddev", s.pools.stddev);
    s.pools.seed = count("pool_seed", s.pools.seed);
    s.seed = count("seed", s.seed);
    s.validate();
    return s;
}

KeyValues SuiteConfig::to_key_values() const {
    KeyValues kv;
    std::string shot_list;
    for (std::size_t i = 0; i < shots.size(); ++i) shot_list += (i ? "," : "") + std::to_string(shots[i]);
    kv.set("suite", suite);
    kv.set("m_train", std::to_string(m_train));
    kv.set("m_test", std::to_string(m_test));
    kv.set("shots", shot_list);
    kv.set("grid", std::to_string(grid));
    kv.set("pixel_mode", pixel_mode_name(pixel_mode));
    kv.set("n_way", std::to_string(n_way));
    kv.set("q_query", std::to_string(q_query));
    kv.set("dim", std::to_string(pools.dim));
    kv.set("train_classes", std::to_string(pools.train_classes));
    kv.set("val_classes", std::to_string(pools.val_classes));
    kv.set("test_classes", std::to_string(pools.test_classes));
    kv.set("mean_range", format_double(pools.mean_range));
    kv.set("stddev", format_double(pools.stddev));
    kv.set("pool_seed", std::to_string(pools.seed));
    kv.set("seed", std::to_string(seed));
    return kv;
}

void SuiteConfig::validate() const {
    if (suite != "sine" && suite != "completion" && suite != "fewshot" && suite != "nav2d")
        throw ConfigError("unknown suite '" + suite + "'");
    if (m_train == 0 || m_test == 0) throw ConfigError("m_train and m_test must be positive");
    if (shots.empty()) throw ConfigError("shots must list at least one value");
    if (suite == "completion")
        for (std::size_t k : shots)
            if (k == 0 || k > grid * grid) throw ConfigError("pixel budget outside the grid");
    if (suite == "fewshot") {
        if (n_way == 0 || q_query == 0) throw ConfigError("n_way and q_query must be positive");
        for (std::size_t k : shots)
            if (k == 0) throw ConfigError("k_shot must be positive");
        if (pools.train_classes < n_way || pools.val_classes < n_way || pools.test_classes < n_way)
            throw ConfigError("every class pool needs at least n_way classes");
    }
}

// ---- CSV exchange ------------------------------------------------------------

void write_tasks_csv(std::ostream& os, const std::vector<SupervisedTask>& tasks) {
    if (tasks.empty()) throw ContractError("no tasks to write");
    const std::size_t dx = tasks.front().train.x.cols(), dy = tasks.front().train.y.cols();
    os << "task_id,split";
    for (std::size_t i = 0; i < dx; ++i) os << ",x" << i;
    for (std::size_t i = 0; i < dy; ++i) os << ",y" << i;
    os << '\n';
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        tasks[t].validate();
        if (tasks[t].train.x.cols() != dx || tasks[t].train.y.cols() != dy)
            throw DimensionError("tasks in one exchange file must share widths");
        for (const auto& [name, set] : {std::pair{"train", &tasks[t].train}, std::pair{"test", &tasks[t].test}})
            for (std::size_t r = 0; r < set->size(); ++r) {
                os << t << ',' << name;
                for (std::size_t c = 0; c < dx; ++c) os << ',' << format_double(set->x.at(r, c));
                for (std::size_t c = 0; c < dy; ++c) os << ',' << format_double(set->y.at(r, c));
                os << '\n';
            }
    }
}

std::vector<SupervisedTask> read_tasks_csv(std::istream& is, LossKind loss, std::size_t num_classes) {
    std::string line;
    if (!std::getline(is, line)) throw LoadError("empty task file");
    std::size_t dx = 0, dy = 0;
    {
        std::istringstream hs(line);
        std::string col;
        std::vector<std::string> cols;
        while (std::getline(hs, col, ',')) cols.push_back(col);
        if (cols.size() < 4 || cols[0] != "task_id" || cols[1] != "split") throw LoadError("bad task file header");
        for (std::size_t i = 2; i < cols.size(); ++i) (cols[i][0] == 'x' ? dx : dy) += 1;
    }
    std::vector<std::array<std::vector<double>, 4>> raw;  // train x, train y, test x, test y
    for (std::size_t lineno = 2; std::getline(is, line); ++lineno) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() != 2 + dx + dy) throw LoadError("task file line " + std::to_string(lineno) + ": wrong width");
        std::size_t id;
        double xv;
        try {
            id = static_cast<std::size_t>(parse_long_strict(cells[0], "task_id"));
        } catch (const ConfigError& e) {
            throw LoadError(e.what());
        }
        if (id > raw.size()) throw LoadError("task ids must be contiguous");
        if (id == raw.size()) raw.emplace_back();
        const std::size_t base = cells[1] == "train" ? 0 : cells[1] == "test" ? 2 : 99;
        if (base == 99) throw LoadError("unknown split '" + cells[1] + "'");
        for (std::size_t c = 0; c < dx + dy; ++c) {
            try {
                xv = parse_double_strict(cells[2 + c], "value");
            } catch (const ConfigError& e) {
                throw LoadError(e.what());
            }
            raw[id][base + (c < dx ? 0 : 1)].push_back(xv);
        }
    }
    std::vector<SupervisedTask> out;
    for (auto& r : raw) {
        SupervisedTask t;
        t.train = {Array(Shape{r[0].size() / dx, dx}, r[0]), Array(Shape{r[1].size() / dy, dy}, r[1])};
        t.test = {Array(Shape{r[2].size() / dx, dx}, r[2]), Array(Shape{r[3].size() / dy, dy}, r[3])};
        t.loss = loss;
        t.num_classes = num_classes;
        t.validate();
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace cavia::tasks
