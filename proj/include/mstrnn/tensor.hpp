#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mstrnn/errors.hpp"

namespace mstrnn {

/// Dense row-major tensor of 64-bit floats with an explicit shape.
/// All maps, kernels and unit states in the library are Tensors.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double value) {
        Tensor t(std::move(shape));
        t.fill(value);
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<double> data) {
        if (count(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("Tensor::from: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Rank-specific accessors; hot loops index data() directly.
    double& operator()(int a, int b) { return data_[static_cast<size_t>(a) * shape_[1] + b]; }
    double operator()(int a, int b) const { return data_[static_cast<size_t>(a) * shape_[1] + b]; }
    double& operator()(int a, int b, int c) {
        return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }
    double operator()(int a, int b, int c) const {
        return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }
    double& operator()(int a, int b, int c, int d) {
        return data_[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    double operator()(int a, int b, int c, int d) const {
        return data_[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    void fill(double v) { data_.assign(data_.size(), v); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// *this += s * other (shapes must agree).
    Tensor& add_scaled(const Tensor& other, double s) {
        require_same_shape(other, "add_scaled");
        const double* o = other.data();
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += s * o[i];
        return *this;
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "operator+=");
        const double* o = other.data();
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o[i];
        return *this;
    }

    Tensor& scale(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    Tensor scaled(double s) const {
        Tensor t = *this;
        t.scale(s);
        return t;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Same data reinterpreted under a new shape of equal element count.
    Tensor reshaped(std::vector<int> shape) const {
        if (count(shape) != size())
            throw ShapeError("reshaped: " + shape_str(shape_) + " -> " + shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return shape.empty() ? 0 : n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

    std::string shape_str() const { return shape_str(shape_); }

  private:
    void require_same_shape(const Tensor& other, const char* op) const {
        if (!same_shape(other))
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str() + " vs " +
                             other.shape_str());
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace mstrnn
