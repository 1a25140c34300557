#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace agcm {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when training produces a non-finite loss.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t shape_size(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles. Plain value type; gradient tracking
/// lives in the tape (see diffcore.hpp).
class Array {
public:
    Array() = default;

    explicit Array(Shape shape, double fill = 0.0) : shape_(std::move(shape))
    {
        validate_extents();
        data_.assign(shape_size(shape_), fill);
    }

    Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values))
    {
        validate_extents();
        if (data_.size() != shape_size(shape_)) {
            throw ShapeError("Array: " + std::to_string(data_.size()) + " values do not fill shape " +
                             to_string(shape_));
        }
    }

    static Array scalar(double v) { return Array({1}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

    double item() const
    {
        if (data_.size() != 1) {
            throw ShapeError("Array::item on shape " + to_string(shape_));
        }
        return data_[0];
    }

    /// Same data, new extents. Sizes must agree.
    Array reshaped(Shape shape) const
    {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape));
        }
        Array out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Array&) const = default;

private:
    void validate_extents() const
    {
        for (const auto extent : shape_) {
            if (extent == 0) {
                throw ShapeError("Array: zero extent in shape " + to_string(shape_));
            }
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

} // namespace agcm
