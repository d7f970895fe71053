#pragma once

#include <cstddef>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pia {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class AttributeError : public Error {
public:
    using Error::Error;
};

class TapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major double tensor. Shape [] is a scalar with one element.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    Tensor() : data(1, 0.0) {}

    Tensor(Shape s, std::vector<double> values, bool rg = false)
        : shape(std::move(s)), data(std::move(values)), requires_grad(rg) {
        if (data.size() != numel(shape)) {
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + to_string(shape));
        }
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
        }
    }

    static Tensor zeros(Shape s, bool rg = false) {
        auto n = numel(s);
        return Tensor(std::move(s), std::vector<double>(n, 0.0), rg);
    }

    static Tensor full(Shape s, double value, bool rg = false) {
        auto n = numel(s);
        return Tensor(std::move(s), std::vector<double>(n, value), rg);
    }

    static Tensor scalar(double value, bool rg = false) { return Tensor({}, {value}, rg); }

    std::size_t size() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    double item() const {
        if (data.size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape) + " is not a scalar");
        return data[0];
    }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    void zero_grad() { grad.reset(); }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    void accumulate_grad(const std::vector<double>& g) {
        if (!grad) grad.emplace(data.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
    }
};

}  // namespace pia
