#pragma once

#include <cstdint>
#include <vector>

#include "cavia/array.hpp"

namespace cavia::optim {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias-corrected moments. step() descends; callers maximising an
// objective pass the negated gradient.
class Adam {
public:
    Adam() = default;
    Adam(AdamConfig config, const std::vector<Array>& params);

    void step(std::vector<Array>& params, const std::vector<Array>& grads);

    const AdamConfig& config() const noexcept { return config_; }
    std::uint64_t step_count() const noexcept { return steps_; }
    const std::vector<Array>& first_moments() const noexcept { return m_; }
    const std::vector<Array>& second_moments() const noexcept { return v_; }

    // Restores state read back from a checkpoint.
    void restore(std::uint64_t steps, std::vector<Array> m, std::vector<Array> v);

private:
    AdamConfig config_;
    std::uint64_t steps_ = 0;
    std::vector<Array> m_;
    std::vector<Array> v_;
};

}  // namespace cavia::optim
