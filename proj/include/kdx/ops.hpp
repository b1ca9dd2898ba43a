#pragma once

#include <vector>

#include "kdx/tensor.hpp"

namespace kdx {

// Gradients produced by one layer's backward pass. Shapes mirror the layer's
// weights, bias and input exactly.
struct LayerGrad {
    Tensor weight_grad;
    Tensor bias_grad;
    Tensor input_grad;
};

// 2D cross-correlation of input [C_in,H,W] with weights [C_out,C_in,k_h,k_w]
// plus per-channel bias, before any activation. Requires the strided output
// extent (H + 2*padding - k_h) to divide evenly by stride.
Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      size_t stride, size_t padding);

LayerGrad conv2d_backward(const Tensor& input, const Tensor& weights, size_t stride,
                          size_t padding, const Tensor& upstream);

struct MaxPoolResult {
    Tensor output;
    // Flat input index of the winning element per output element, row-major.
    // Ties resolve to the first index in row-major window scan order.
    std::vector<size_t> argmax;
};

MaxPoolResult maxpool2d(const Tensor& input, size_t window, size_t stride);
Tensor maxpool2d_backward(const std::vector<size_t>& argmax,
                          const std::vector<size_t>& input_shape, const Tensor& upstream);

Tensor avgpool2d(const Tensor& input, size_t window, size_t stride);
Tensor avgpool2d_backward(const std::vector<size_t>& input_shape, size_t window, size_t stride,
                          const Tensor& upstream);

// y = W x + b with W [D_out,D_in], x [D_in].
Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);
LayerGrad dense_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream);

Tensor relu(const Tensor& input);
// Gate is 1 for x > 0 and 0 for x <= 0.
Tensor relu_backward(const Tensor& input, const Tensor& upstream);

// Temperature softmax over a logit vector, computed with max subtraction.
// exp(z_i/T) / sum_j exp(z_j/T); temperature must be positive.
Tensor softmax_t(const Tensor& logits, double temperature);

// Output spatial extent of a convolution/pooling along one axis.
size_t conv_out_dim(size_t in, size_t kernel, size_t stride, size_t padding);
size_t pool_out_dim(size_t in, size_t window, size_t stride);

}  // namespace kdx
