#pragma once

// Context-conditioned fully connected networks.
//
// Parameters are split into shared parameters (theta) and a context vector
// phi. phi reaches the network at exactly one site: concatenated to the input,
// or through a FiLM generator that modulates the pre-activations of one hidden
// layer with gamma * h + beta, where [gamma, beta] = phi W + b.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cavia/array.hpp"
#include "cavia/autodiff.hpp"

namespace cavia::models {

enum class Activation { relu, tanh };
enum class Conditioning { concat_at_input, film_at_layer };
// adapted: phi is reset to zero per task and only changed by the inner loop.
// meta_learned: the context slot holds extra input biases that live in theta
// (the MAML baseline's additional inputs).
enum class ContextRole { adapted, meta_learned };

struct Architecture {
    std::size_t input_dim = 1;
    std::size_t output_dim = 1;
    std::vector<std::size_t> hidden = {40, 40};
    std::size_t context_dim = 0;
    Conditioning conditioning = Conditioning::concat_at_input;
    std::size_t film_layer = 0;  // index into `hidden`
    Activation activation = Activation::relu;
    ContextRole context_role = ContextRole::adapted;

    // Validates the description; throws ConfigError.
    void validate() const;
    // Names and shapes of theta, in the canonical order used everywhere.
    std::vector<std::pair<std::string, Shape>> parameter_layout() const;

    bool operator==(const Architecture&) const = default;
};

class ParamSet {
public:
    ParamSet() = default;

    void add(std::string name, Array value);
    std::size_t size() const noexcept { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    const std::vector<std::string>& names() const noexcept { return names_; }
    Array& operator[](std::size_t i) { return values_[i]; }
    const Array& operator[](std::size_t i) const { return values_[i]; }
    Array& at(const std::string& name);
    const Array& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t index_of(const std::string& name) const;
    std::vector<Array>& values() noexcept { return values_; }
    const std::vector<Array>& values() const noexcept { return values_; }

    double squared_norm() const;
    bool operator==(const ParamSet&) const = default;

private:
    std::vector<std::string> names_;
    std::vector<Array> values_;
};

// [gamma, beta] from the FiLM generator; at phi = 0 with the initial bias,
// gamma = 1 and beta = 0.
struct FilmCoefficients {
    ad::Tensor gamma;
    ad::Tensor beta;
};

FilmCoefficients film_generator(ad::Tensor weight, ad::Tensor bias, ad::Tensor phi);

// Graph-level forward pass. `theta` follows Architecture::parameter_layout().
// `context` is the phi vector fed to the conditioning site; with
// ContextRole::meta_learned it is ignored and theta's input biases are used.
ad::Tensor forward(const Architecture& arch, std::span<const ad::Tensor> theta, ad::Tensor context, ad::Tensor x);

class ContextModel {
public:
    ContextModel() = default;
    ContextModel(Architecture arch, ParamSet theta);

    const Architecture& architecture() const noexcept { return arch_; }
    ParamSet& theta() noexcept { return theta_; }
    const ParamSet& theta() const noexcept { return theta_; }
    const Array& phi() const noexcept { return phi_; }
    void set_phi(Array phi);

    // phi <- 0 exactly. theta is untouched. phi is a plain value, so no graph
    // linkage from an earlier adaptation can survive this.
    void reset_context();

    // Value of the context slot: phi, or theta's input biases for meta-learned context.
    const Array& context_value() const;

    // Forward pass on plain values, no gradient tracking.
    Array forward(const Array& x) const;

    // Binds theta into a graph as leaves, in layout order.
    std::vector<ad::Tensor> bind_theta(ad::Graph& g, bool requires_grad = true) const;

private:
    Architecture arch_;
    ParamSet theta_;
    Array phi_;
};

// He-style initialisation: weights ~ N(0, 2 / fan_in), biases zero, FiLM bias
// so that gamma = 1 and beta = 0. Deterministic in `seed`.
ContextModel init_theta(const Architecture& arch, std::uint64_t seed);

// Index of the context-input weights inside layer0.weight: rows
// [input_dim, input_dim + K). Concatenation only.
std::pair<std::size_t, std::size_t> context_weight_rows(const Architecture& arch);

// Outputs of (A) the model with phi = c and (B) the model with phi = 0 whose
// first-layer bias absorbs the context path, b + c W_phi. Concatenation only.
std::pair<Array, Array> shift_equivalence_witness(const ContextModel& model, const Array& c, const Array& x);

}  // namespace cavia::models
