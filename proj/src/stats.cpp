#include "cavia/stats.hpp"

#include <cmath>

#include "cavia/errors.hpp"

namespace cavia::stats {

MeanCI mean_ci(std::span<const double> values) {
    MeanCI out;
    out.n = values.size();
    if (values.empty()) return out;
    for (double v : values) out.mean += v;
    out.mean /= static_cast<double>(out.n);
    if (out.n < 2) return out;
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(out.n - 1));
    out.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(out.n));
    return out;
}

double linear_r2(std::span<const double> x, std::size_t k, std::span<const double> y) {
    const std::size_t n = y.size();
    if (x.size() != n * k) throw DimensionError("linear_r2: design matrix and targets disagree");
    if (n < 2) return 0.0;

    double ybar = 0.0;
    for (double v : y) ybar += v;
    ybar /= static_cast<double>(n);
    double ss_tot = 0.0;
    for (double v : y) ss_tot += (v - ybar) * (v - ybar);
    if (ss_tot == 0.0) return 0.0;

    // Gram-Schmidt on the centred columns: projecting y onto the span of the
    // kept columns gives the explained sum of squares directly.
    std::vector<std::vector<double>> basis;
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> col(n);
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += x[i * k + c];
        mean /= static_cast<double>(n);
        double norm0 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            col[i] = x[i * k + c] - mean;
            norm0 += col[i] * col[i];
        }
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& q : basis) {
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += q[i] * col[i];
                for (std::size_t i = 0; i < n; ++i) col[i] -= dot * q[i];
            }
        double norm = 0.0;
        for (double v : col) norm += v * v;
        if (norm0 == 0.0 || norm <= 1e-20 * norm0) continue;
        const double inv = 1.0 / std::sqrt(norm);
        for (double& v : col) v *= inv;
        basis.push_back(std::move(col));
    }
    double ss_explained = 0.0;
    for (const auto& q : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += q[i] * (y[i] - ybar);
        ss_explained += dot * dot;
    }
    return ss_explained / ss_tot;
}

}  // namespace cavia::stats
