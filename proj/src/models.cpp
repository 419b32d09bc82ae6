#include "cavia/models.hpp"

#include <algorithm>
#include <random>

#include "cavia/errors.hpp"

namespace cavia::models {

namespace {

std::size_t first_layer_inputs(const Architecture& a) {
    return a.input_dim + (a.conditioning == Conditioning::concat_at_input ? a.context_dim : 0);
}

bool has_input_bias(const Architecture& a) {
    return a.context_role == ContextRole::meta_learned && a.context_dim > 0;
}

ad::Tensor activate(Activation act, ad::Tensor h) {
    return act == Activation::relu ? ad::relu(h) : ad::tanh(h);
}

}  // namespace

void Architecture::validate() const {
    if (input_dim == 0 || output_dim == 0) throw ConfigError("architecture: input and output widths must be positive");
    if (std::any_of(hidden.begin(), hidden.end(), [](std::size_t h) { return h == 0; }))
        throw ConfigError("architecture: hidden widths must be positive");
    if (conditioning == Conditioning::film_at_layer) {
        if (film_layer >= hidden.size())
            throw ConfigError("architecture: FiLM layer " + std::to_string(film_layer) + " but only " +
                              std::to_string(hidden.size()) + " hidden layers");
        if (context_dim == 0) throw ConfigError("architecture: FiLM conditioning needs context_dim >= 1");
        if (context_role == ContextRole::meta_learned)
            throw ConfigError("architecture: meta-learned input biases require concatenation");
    }
}

std::vector<std::pair<std::string, Shape>> Architecture::parameter_layout() const {
    std::vector<std::pair<std::string, Shape>> out;
    std::size_t in = first_layer_inputs(*this);
    for (std::size_t l = 0; l <= hidden.size(); ++l) {
        const std::size_t width = l < hidden.size() ? hidden[l] : output_dim;
        out.emplace_back("layer" + std::to_string(l) + ".weight", Shape{in, width});
        out.emplace_back("layer" + std::to_string(l) + ".bias", Shape{width});
        in = width;
    }
    if (conditioning == Conditioning::film_at_layer) {
        const std::size_t f = hidden[film_layer];
        out.emplace_back("film.weight", Shape{context_dim, 2 * f});
        out.emplace_back("film.bias", Shape{2 * f});
    }
    if (has_input_bias(*this)) out.emplace_back("input_bias", Shape{context_dim});
    return out;
}

// ---- ParamSet ------------------------------------------------------------------

void ParamSet::add(std::string name, Array value) {
    if (contains(name)) throw ConfigError("duplicate parameter " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
}

std::size_t ParamSet::index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw ConfigError("unknown parameter " + name);
    return static_cast<std::size_t>(it - names_.begin());
}

bool ParamSet::contains(const std::string& name) const {
    return std::find(names_.begin(), names_.end(), name) != names_.end();
}

Array& ParamSet::at(const std::string& name) { return values_[index_of(name)]; }
const Array& ParamSet::at(const std::string& name) const { return values_[index_of(name)]; }

double ParamSet::squared_norm() const {
    double s = 0.0;
    for (const auto& v : values_) s += v.squared_norm();
    return s;
}

// ---- forward -------------------------------------------------------------------

FilmCoefficients film_generator(ad::Tensor weight, ad::Tensor bias, ad::Tensor phi) {
    const std::size_t k = phi.shape().at(0);
    const std::size_t two_f = bias.shape().at(0);
    ad::Tensor coeffs = ad::add(ad::reshape(ad::matmul(ad::reshape(phi, {1, k}), weight), {two_f}), bias);
    return {ad::slice_last_axis(coeffs, 0, two_f / 2), ad::slice_last_axis(coeffs, two_f / 2, two_f / 2)};
}

ad::Tensor forward(const Architecture& arch, std::span<const ad::Tensor> theta, ad::Tensor context, ad::Tensor x) {
    const Shape& xs = x.shape();
    if (xs.size() != 2 || xs[1] != arch.input_dim)
        throw DimensionError("forward: input " + shape_str(xs) + " but model expects width " +
                             std::to_string(arch.input_dim));
    const std::size_t layers = arch.hidden.size() + 1;
    if (theta.size() < 2 * layers) throw DimensionError("forward: theta has too few tensors");

    if (arch.context_role == ContextRole::meta_learned && arch.context_dim > 0) context = theta.back();
    if (arch.context_dim > 0 && (!context.valid() || context.shape() != Shape{arch.context_dim}))
        throw DimensionError("forward: context must be a vector of length " + std::to_string(arch.context_dim));

    ad::Tensor h = x;
    if (arch.conditioning == Conditioning::concat_at_input && arch.context_dim > 0)
        h = ad::concat_last_axis(h, context);

    for (std::size_t l = 0; l < layers; ++l) {
        h = ad::add(ad::matmul(h, theta[2 * l]), theta[2 * l + 1]);
        if (l + 1 == layers) break;
        if (arch.conditioning == Conditioning::film_at_layer && l == arch.film_layer) {
            auto [gamma, beta] = film_generator(theta[2 * layers], theta[2 * layers + 1], context);
            h = ad::add(ad::mul(h, gamma), beta);
        }
        h = activate(arch.activation, h);
    }
    return h;
}

// ---- ContextModel --------------------------------------------------------------

ContextModel::ContextModel(Architecture arch, ParamSet theta)
    : arch_(std::move(arch)), theta_(std::move(theta)), phi_(Shape{arch_.context_dim}, 0.0) {
    arch_.validate();
    const auto layout = arch_.parameter_layout();
    if (layout.size() != theta_.size()) throw DimensionError("theta does not match the architecture layout");
    for (std::size_t i = 0; i < layout.size(); ++i)
        if (layout[i].first != theta_.name(i) || layout[i].second != theta_[i].shape)
            throw DimensionError("theta entry " + theta_.name(i) + " " + shape_str(theta_[i].shape) +
                                 " does not match expected " + layout[i].first + " " + shape_str(layout[i].second));
}

void ContextModel::set_phi(Array phi) {
    if (phi.shape != Shape{arch_.context_dim})
        throw DimensionError("phi must have shape [" + std::to_string(arch_.context_dim) + "]");
    phi_ = std::move(phi);
}

void ContextModel::reset_context() { std::fill(phi_.data.begin(), phi_.data.end(), 0.0); }

const Array& ContextModel::context_value() const {
    return has_input_bias(arch_) ? theta_.at("input_bias") : phi_;
}

std::vector<ad::Tensor> ContextModel::bind_theta(ad::Graph& g, bool requires_grad) const {
    std::vector<ad::Tensor> out;
    out.reserve(theta_.size());
    for (const auto& v : theta_.values()) out.push_back(g.leaf(v, requires_grad));
    return out;
}

Array ContextModel::forward(const Array& x) const {
    ad::Graph g;
    ad::Graph::NoRecordGuard off(g);
    const auto theta = bind_theta(g, false);
    return models::forward(arch_, theta, g.constant(phi_), g.constant(x)).value();
}

// ---- init / analysis -----------------------------------------------------------

ContextModel init_theta(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    std::mt19937_64 rng(seed);
    ParamSet theta;
    for (const auto& [name, shape] : arch.parameter_layout()) {
        Array value(shape, 0.0);
        if (shape.size() == 2) {
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(shape[0])));
            for (double& v : value.data) v = normal(rng);
        } else if (name == "film.bias") {
            std::fill_n(value.data.begin(), value.size() / 2, 1.0);
        }
        theta.add(name, std::move(value));
    }
    return ContextModel(arch, std::move(theta));
}

std::pair<std::size_t, std::size_t> context_weight_rows(const Architecture& arch) {
    if (arch.conditioning != Conditioning::concat_at_input)
        throw UnsupportedModeError("context weight rows exist only for input concatenation");
    return {arch.input_dim, arch.input_dim + arch.context_dim};
}

std::pair<Array, Array> shift_equivalence_witness(const ContextModel& model, const Array& c, const Array& x) {
    const Architecture& arch = model.architecture();
    if (arch.conditioning != Conditioning::concat_at_input)
        throw UnsupportedModeError("shift_equivalence_witness requires input concatenation");
    if (arch.context_role != ContextRole::adapted)
        throw UnsupportedModeError("shift_equivalence_witness requires an adapted context");

    ContextModel shifted = model;
    shifted.set_phi(c);
    Array out_a = shifted.forward(x);

    ContextModel absorbed = model;
    absorbed.reset_context();
    const Array& w = model.theta().at("layer0.weight");
    Array& b = absorbed.theta().at("layer0.bias");
    const auto [first, last] = context_weight_rows(arch);
    const std::size_t width = b.size();
    for (std::size_t k = first; k < last; ++k)
        for (std::size_t j = 0; j < width; ++j) b[j] += c[k - first] * w.at(k, j);
    Array out_b = absorbed.forward(x);
    return {std::move(out_a), std::move(out_b)};
}

}  // namespace cavia::models
