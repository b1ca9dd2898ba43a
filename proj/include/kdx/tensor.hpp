#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace kdx {

// Dense row-major tensor of 64-bit floats. The universal value type for
// images, activations, gradients and weights. data.size() always equals the
// product of shape; operations return fresh tensors instead of resizing.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> shape_);
    Tensor(std::vector<size_t> shape_, std::vector<double> data_);

    static Tensor full(std::vector<size_t> shape_, double value);
    static size_t numel_of(const std::vector<size_t>& shape_);

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    bool empty() const { return data.empty(); }

    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    double& at(size_t i, size_t j) { return data[i * shape[1] + j]; }
    double at(size_t i, size_t j) const { return data[i * shape[1] + j]; }
    double& at(size_t c, size_t h, size_t w) { return data[(c * shape[1] + h) * shape[2] + w]; }
    double at(size_t c, size_t h, size_t w) const { return data[(c * shape[1] + h) * shape[2] + w]; }
    double& at(size_t o, size_t c, size_t h, size_t w) {
        return data[((o * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at(size_t o, size_t c, size_t h, size_t w) const {
        return data[((o * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    double min_value() const;
    double max_value() const;
    double sum() const;
};

// "[2, 3, 3]" -- for error messages.
std::string shape_str(const std::vector<size_t>& shape);

}  // namespace kdx
