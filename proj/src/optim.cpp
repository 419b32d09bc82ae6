#include "cavia/optim.hpp"

#include <cmath>

#include "cavia/errors.hpp"

namespace cavia::optim {

Adam::Adam(AdamConfig config, const std::vector<Array>& params) : config_(config) {
    for (const auto& p : params) {
        m_.emplace_back(p.shape, 0.0);
        v_.emplace_back(p.shape, 0.0);
    }
}

void Adam::step(std::vector<Array>& params, const std::vector<Array>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw DimensionError("adam: parameter count changed since construction");
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape != m_[i].shape || grads[i].shape != m_[i].shape)
            throw DimensionError("adam: shape mismatch for parameter " + std::to_string(i));
        auto& m = m_[i].data;
        auto& v = v_[i].data;
        auto& p = params[i].data;
        const auto& g = grads[i].data;
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            p[j] -= config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
        }
    }
}

void Adam::restore(std::uint64_t steps, std::vector<Array> m, std::vector<Array> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw LoadError("adam: moment count mismatch");
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i].shape != m_[i].shape || v[i].shape != v_[i].shape)
            throw LoadError("adam: moment shape mismatch for parameter " + std::to_string(i));
    steps_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
}

}  // namespace cavia::optim
