#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fdsim/errors.hpp"

namespace fdsim {

/// Dense n-dimensional array of doubles, row-major.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const { return shape_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<const double> values() const { return data_; }
    std::span<double> values() { return data_; }

    // 2-D helpers.
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    Tensor reshaped(std::vector<std::size_t> shape) const {
        if (count(shape) != data_.size()) {
            throw DimensionError("reshape from " + shape_string(shape_) + " to " +
                                 shape_string(shape) + " changes element count");
        }
        return Tensor(std::move(shape), data_);
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << "x";
            os << shape[i];
        }
        os << "]";
        return os.str();
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline double l2_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    return std::sqrt(s);
}

}  // namespace fdsim
