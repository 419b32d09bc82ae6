#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cavia::stats {

struct MeanCI {
    double mean = 0.0;
    double ci95 = 0.0;  // half-width, 1.96 * sample sd / sqrt(n); 0 for n < 2
    std::size_t n = 0;
};

MeanCI mean_ci(std::span<const double> values);

// R^2 of the least-squares fit y ~ w0 + X w, X given row-major [n x k].
// Columns that are (numerically) linearly dependent on earlier ones are
// dropped. If nothing but the intercept survives, or y is constant, R^2 = 0.
double linear_r2(std::span<const double> x, std::size_t k, std::span<const double> y);

}  // namespace cavia::stats
