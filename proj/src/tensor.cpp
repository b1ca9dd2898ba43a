#include "kdx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "kdx/errors.hpp"

namespace kdx {

size_t Tensor::numel_of(const std::vector<size_t>& shape_) {
    size_t n = 1;
    for (size_t d : shape_) n *= d;
    return n;
}

namespace {
void check_shape(const std::vector<size_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (size_t d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}
}  // namespace

Tensor::Tensor(std::vector<size_t> shape_) : shape(std::move(shape_)) {
    check_shape(shape);
    data.assign(numel_of(shape), 0.0);
}

Tensor::Tensor(std::vector<size_t> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    check_shape(shape);
    if (data.size() != numel_of(shape)) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
}

Tensor Tensor::full(std::vector<size_t> shape_, double value) {
    Tensor t(std::move(shape_));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::min_value() const { return *std::min_element(data.begin(), data.end()); }
double Tensor::max_value() const { return *std::max_element(data.begin(), data.end()); }

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data) s += v;
    return s;
}

std::string shape_str(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace kdx
