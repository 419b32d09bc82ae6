#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace cavia {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major block of doubles. Plain value type: parameters, datasets and
// graph node payloads are all Arrays.
struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Array(Shape s, std::vector<double> values);

    static Array scalar(double v) { return Array(Shape{}, v); }
    static Array vector(std::vector<double> values);
    static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    static Array matrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    double& at(std::size_t r, std::size_t c) { return data[r * shape.back() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape.back() + c]; }

    double item() const;
    double sum() const;
    double squared_norm() const;

    bool operator==(const Array&) const = default;
};

}  // namespace cavia
