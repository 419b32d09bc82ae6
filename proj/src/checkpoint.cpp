#include "cavia/checkpoint.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cavia/errors.hpp"

namespace cavia {

namespace {

constexpr const char* kOptimizerPrefix = "optimizer/";
constexpr const char* kArchitectureRecord = "meta/architecture";

void write_record(std::ostream& os, const std::string& name, const Array& a) {
    os << name << '\n';
    for (std::size_t i = 0; i < a.shape.size(); ++i) os << (i ? " " : "") << a.shape[i];
    os << '\n';
    for (std::size_t i = 0; i < a.size(); ++i) os << (i ? " " : "") << format_double(a[i]);
    os << '\n';
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    for (std::string tok; is >> tok;) out.push_back(tok);
    return out;
}

double parse_double(const std::string& tok) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) throw LoadError("checkpoint: bad number '" + tok + "'");
    return v;
}

std::size_t parse_extent(const std::string& tok) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) throw LoadError("checkpoint: bad extent '" + tok + "'");
    return v;
}

Array architecture_record(const models::Architecture& a) {
    std::vector<double> v = {static_cast<double>(a.input_dim),
                             static_cast<double>(a.output_dim),
                             static_cast<double>(a.context_dim),
                             static_cast<double>(a.conditioning),
                             static_cast<double>(a.film_layer),
                             static_cast<double>(a.activation),
                             static_cast<double>(a.context_role),
                             static_cast<double>(a.hidden.size())};
    for (std::size_t h : a.hidden) v.push_back(static_cast<double>(h));
    return Array::vector(std::move(v));
}

models::Architecture architecture_from_record(const Array& r) {
    if (r.size() < 8) throw LoadError("checkpoint: truncated architecture record");
    auto u = [&](std::size_t i) { return static_cast<std::size_t>(r[i]); };
    models::Architecture a;
    a.input_dim = u(0);
    a.output_dim = u(1);
    a.context_dim = u(2);
    a.conditioning = static_cast<models::Conditioning>(u(3));
    a.film_layer = u(4);
    a.activation = static_cast<models::Activation>(u(5));
    a.context_role = static_cast<models::ContextRole>(u(6));
    const std::size_t n = u(7);
    if (r.size() != 8 + n) throw LoadError("checkpoint: architecture record has wrong length");
    a.hidden.clear();
    for (std::size_t i = 0; i < n; ++i) a.hidden.push_back(u(8 + i));
    return a;
}

}  // namespace

std::string format_double(double v) {
    char buf[32];
    const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf, static_cast<std::size_t>(n));
}

const Array* Checkpoint::find(const std::string& name) const {
    for (const auto& r : tensors)
        if (r.name == name) return &r.value;
    return nullptr;
}

const Array& Checkpoint::at(const std::string& name) const {
    if (const Array* a = find(name)) return *a;
    throw LoadError("checkpoint: missing tensor " + name);
}

void Checkpoint::save(std::ostream& os) const {
    os << kCheckpointHeader << '\n';
    for (const auto& r : tensors) write_record(os, r.name, r.value);
    for (const auto& r : optimizer_state) write_record(os, kOptimizerPrefix + r.name, r.value);
}

Checkpoint Checkpoint::load(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kCheckpointHeader)
        throw LoadError("checkpoint: missing '" + std::string(kCheckpointHeader) + "' header");
    Checkpoint ckpt;
    const std::string prefix = kOptimizerPrefix;
    std::string name;
    while (std::getline(is, name)) {
        if (name.empty()) continue;
        std::string shape_line, value_line;
        if (!std::getline(is, shape_line) || !std::getline(is, value_line))
            throw LoadError("checkpoint: truncated record " + name);
        Shape shape;
        for (const auto& tok : split(shape_line)) shape.push_back(parse_extent(tok));
        std::vector<double> values;
        for (const auto& tok : split(value_line)) values.push_back(parse_double(tok));
        if (values.size() != numel(shape))
            throw LoadError("checkpoint: record " + name + " has " + std::to_string(values.size()) +
                            " values for shape " + shape_str(shape));
        Array a(std::move(shape), std::move(values));
        if (name.rfind(prefix, 0) == 0)
            ckpt.optimizer_state.push_back({name.substr(prefix.size()), std::move(a)});
        else
            ckpt.tensors.push_back({name, std::move(a)});
    }
    return ckpt;
}

void Checkpoint::save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw LoadError("cannot write checkpoint " + path);
    save(os);
}

Checkpoint Checkpoint::load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open checkpoint " + path);
    return load(is);
}

Checkpoint make_checkpoint(const models::ContextModel& model, const std::vector<NamedArray>& extras,
                           const optim::Adam* adam) {
    Checkpoint ckpt;
    ckpt.tensors.push_back({kArchitectureRecord, architecture_record(model.architecture())});
    const auto& theta = model.theta();
    std::vector<std::string> names;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        ckpt.tensors.push_back({theta.name(i), theta[i]});
        names.push_back(theta.name(i));
    }
    for (const auto& e : extras) {
        ckpt.tensors.push_back(e);
        names.push_back(e.name);
    }
    if (adam) {
        if (adam->first_moments().size() != names.size())
            throw DimensionError("checkpoint: optimizer tracks " + std::to_string(adam->first_moments().size()) +
                                 " tensors but " + std::to_string(names.size()) + " are saved");
        const auto& c = adam->config();
        ckpt.optimizer_state.push_back({"config", Array::vector({c.lr, c.beta1, c.beta2, c.eps})});
        ckpt.optimizer_state.push_back({"step", Array::scalar(static_cast<double>(adam->step_count()))});
        for (std::size_t i = 0; i < names.size(); ++i) {
            ckpt.optimizer_state.push_back({"m/" + names[i], adam->first_moments()[i]});
            ckpt.optimizer_state.push_back({"v/" + names[i], adam->second_moments()[i]});
        }
    }
    return ckpt;
}

models::ContextModel model_from_checkpoint(const Checkpoint& ckpt) {
    models::Architecture arch = architecture_from_record(ckpt.at(kArchitectureRecord));
    try {
        arch.validate();
    } catch (const ConfigError& e) {
        throw LoadError(std::string("checkpoint: ") + e.what());
    }
    models::ParamSet theta;
    for (const auto& [name, shape] : arch.parameter_layout()) {
        const Array& a = ckpt.at(name);
        if (a.shape != shape)
            throw LoadError("checkpoint: " + name + " has shape " + shape_str(a.shape) + ", architecture needs " +
                            shape_str(shape));
        theta.add(name, a);
    }
    return models::ContextModel(arch, std::move(theta));
}

std::optional<optim::Adam> adam_from_checkpoint(const Checkpoint& ckpt, const std::vector<Array>& params) {
    auto find = [&](const std::string& n) -> const Array* {
        for (const auto& r : ckpt.optimizer_state)
            if (r.name == n) return &r.value;
        return nullptr;
    };
    const Array* config = find("config");
    const Array* step = find("step");
    if (!config || !step) return std::nullopt;
    if (config->size() != 4) throw LoadError("checkpoint: bad optimizer config record");
    optim::Adam adam({(*config)[0], (*config)[1], (*config)[2], (*config)[3]}, params);
    std::vector<Array> m, v;
    for (const auto& r : ckpt.optimizer_state) {
        if (r.name.rfind("m/", 0) == 0) m.push_back(r.value);
        if (r.name.rfind("v/", 0) == 0) v.push_back(r.value);
    }
    adam.restore(static_cast<std::uint64_t>(step->item()), std::move(m), std::move(v));
    return adam;
}

}  // namespace cavia
