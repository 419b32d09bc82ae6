#pragma once

// Versioned text checkpoint:
//
//   CAVIA-CKPT v1
//   <name>
//   <space-separated shape>          (empty line for a scalar)
//   <space-separated values, %.17g>
//   ... one three-line record per tensor ...
//   optimizer/<name>                 (optimizer state, same record format)
//
// Doubles are written with 17 significant digits, so save -> load -> save is
// byte-identical.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cavia/array.hpp"
#include "cavia/models.hpp"
#include "cavia/optim.hpp"

namespace cavia {

inline constexpr const char* kCheckpointHeader = "CAVIA-CKPT v1";

struct NamedArray {
    std::string name;
    Array value;
    bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
    std::vector<NamedArray> tensors;
    std::vector<NamedArray> optimizer_state;  // names without the "optimizer/" prefix

    const Array* find(const std::string& name) const;
    const Array& at(const std::string& name) const;

    void save(std::ostream& os) const;
    static Checkpoint load(std::istream& is);
    void save_file(const std::string& path) const;
    static Checkpoint load_file(const std::string& path);
};

// %.17g: enough digits to round-trip any double.
std::string format_double(double v);

// Model (architecture record + theta) plus optional extra tensors and Adam state.
Checkpoint make_checkpoint(const models::ContextModel& model, const std::vector<NamedArray>& extras = {},
                           const optim::Adam* adam = nullptr);
models::ContextModel model_from_checkpoint(const Checkpoint& ckpt);
// Restores Adam state for `params` (theta followed by extras, in save order).
std::optional<optim::Adam> adam_from_checkpoint(const Checkpoint& ckpt, const std::vector<Array>& params);

}  // namespace cavia
