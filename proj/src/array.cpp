#include "cavia/array.hpp"

#include <numeric>
#include <sstream>

#include "cavia/errors.hpp"

namespace cavia {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Array::Array(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size())
        throw DimensionError("array of shape " + shape_str(shape) + " given " + std::to_string(data.size()) +
                             " values");
}

Array Array::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Array(Shape{n}, std::move(values));
}

Array Array::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Array(Shape{rows, cols}, std::move(values));
}

Array Array::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
        if (row.size() != cols) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return Array(Shape{rows.size(), cols}, std::move(values));
}

double Array::item() const {
    if (data.size() != 1) throw ContractError("item() on array of shape " + shape_str(shape));
    return data[0];
}

double Array::sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

double Array::squared_norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return s;
}

}  // namespace cavia
