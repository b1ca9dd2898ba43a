#include "kdx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kdx/errors.hpp"

namespace kdx {

namespace {

void require_rank(const Tensor& t, size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape));
    }
}

// Valid output range [lo, hi) along one spatial axis for a fixed kernel tap,
// such that the input coordinate o*stride + k - padding stays in [0, in).
void tap_range(size_t out, size_t in, size_t k, size_t stride, size_t padding, size_t& lo,
               size_t& hi) {
    // o*stride >= padding - k
    if (padding > k) {
        lo = (padding - k + stride - 1) / stride;
    } else {
        lo = 0;
    }
    // o*stride <= in - 1 + padding - k
    if (in + padding < k + 1) {
        hi = 0;
        return;
    }
    size_t max_o = (in - 1 + padding - k) / stride;
    hi = std::min(out, max_o + 1);
    lo = std::min(lo, hi);
}

}  // namespace

size_t conv_out_dim(size_t in, size_t kernel, size_t stride, size_t padding) {
    if (stride == 0) throw ShapeError("stride must be positive");
    size_t padded = in + 2 * padding;
    if (kernel == 0 || kernel > padded) {
        throw ShapeError("kernel " + std::to_string(kernel) + " exceeds padded extent " +
                         std::to_string(padded));
    }
    size_t span = padded - kernel;
    if (span % stride != 0) {
        throw ShapeError("conv extent " + std::to_string(span) + " is not divisible by stride " +
                         std::to_string(stride));
    }
    return span / stride + 1;
}

size_t pool_out_dim(size_t in, size_t window, size_t stride) {
    if (stride == 0 || window == 0) throw ShapeError("pool window and stride must be positive");
    if (window > in) {
        throw ShapeError("pool window " + std::to_string(window) + " exceeds input extent " +
                         std::to_string(in));
    }
    return (in - window) / stride + 1;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      size_t stride, size_t padding) {
    require_rank(input, 3, "conv2d input");
    require_rank(weights, 4, "conv2d weights");
    require_rank(bias, 1, "conv2d bias");
    const size_t c_in = input.shape[0], h = input.shape[1], w = input.shape[2];
    const size_t c_out = weights.shape[0], k_h = weights.shape[2], k_w = weights.shape[3];
    if (weights.shape[1] != c_in) {
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(c_in) +
                         " channels but weights expect " + std::to_string(weights.shape[1]));
    }
    if (bias.shape[0] != c_out) {
        throw ShapeError("conv2d bias length " + std::to_string(bias.shape[0]) +
                         " does not match " + std::to_string(c_out) + " output channels");
    }
    const size_t h_out = conv_out_dim(h, k_h, stride, padding);
    const size_t w_out = conv_out_dim(w, k_w, stride, padding);

    Tensor out({c_out, h_out, w_out});
    for (size_t co = 0; co < c_out; ++co) {
        std::fill(out.data.begin() + co * h_out * w_out,
                  out.data.begin() + (co + 1) * h_out * w_out, bias[co]);
    }

    // Loop order keeps the innermost walk contiguous in both input and output.
    for (size_t co = 0; co < c_out; ++co) {
        double* out_ch = &out.data[co * h_out * w_out];
        for (size_t ci = 0; ci < c_in; ++ci) {
            const double* in_ch = &input.data[ci * h * w];
            for (size_t kh = 0; kh < k_h; ++kh) {
                size_t oh_lo, oh_hi;
                tap_range(h_out, h, kh, stride, padding, oh_lo, oh_hi);
                for (size_t kw = 0; kw < k_w; ++kw) {
                    size_t ow_lo, ow_hi;
                    tap_range(w_out, w, kw, stride, padding, ow_lo, ow_hi);
                    const double wv = weights.at(co, ci, kh, kw);
                    for (size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const size_t ih = oh * stride + kh - padding;
                        const double* in_row = in_ch + ih * w + (ow_lo * stride + kw - padding);
                        double* out_row = out_ch + oh * w_out + ow_lo;
                        const size_t n = ow_hi - ow_lo;
                        if (stride == 1) {
                            for (size_t i = 0; i < n; ++i) out_row[i] += wv * in_row[i];
                        } else {
                            for (size_t i = 0; i < n; ++i) out_row[i] += wv * in_row[i * stride];
                        }
                    }
                }
            }
        }
    }
    return out;
}

LayerGrad conv2d_backward(const Tensor& input, const Tensor& weights, size_t stride,
                          size_t padding, const Tensor& upstream) {
    require_rank(input, 3, "conv2d input");
    require_rank(weights, 4, "conv2d weights");
    require_rank(upstream, 3, "conv2d upstream gradient");
    const size_t c_in = input.shape[0], h = input.shape[1], w = input.shape[2];
    const size_t c_out = weights.shape[0], k_h = weights.shape[2], k_w = weights.shape[3];
    if (weights.shape[1] != c_in) {
        throw ShapeError("conv2d channel mismatch in backward");
    }
    const size_t h_out = conv_out_dim(h, k_h, stride, padding);
    const size_t w_out = conv_out_dim(w, k_w, stride, padding);
    if (upstream.shape != std::vector<size_t>{c_out, h_out, w_out}) {
        throw ShapeError("conv2d upstream shape " + shape_str(upstream.shape) +
                         " does not match forward output [" + std::to_string(c_out) + ", " +
                         std::to_string(h_out) + ", " + std::to_string(w_out) + "]");
    }

    LayerGrad g;
    g.weight_grad = Tensor(weights.shape);
    g.bias_grad = Tensor({c_out});
    g.input_grad = Tensor(input.shape);

    for (size_t co = 0; co < c_out; ++co) {
        const double* up_ch = &upstream.data[co * h_out * w_out];
        double acc = 0.0;
        for (size_t i = 0; i < h_out * w_out; ++i) acc += up_ch[i];
        g.bias_grad[co] = acc;

        for (size_t ci = 0; ci < c_in; ++ci) {
            const double* in_ch = &input.data[ci * h * w];
            double* ig_ch = &g.input_grad.data[ci * h * w];
            for (size_t kh = 0; kh < k_h; ++kh) {
                size_t oh_lo, oh_hi;
                tap_range(h_out, h, kh, stride, padding, oh_lo, oh_hi);
                for (size_t kw = 0; kw < k_w; ++kw) {
                    size_t ow_lo, ow_hi;
                    tap_range(w_out, w, kw, stride, padding, ow_lo, ow_hi);
                    const double wv = weights.at(co, ci, kh, kw);
                    double wg = 0.0;
                    for (size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const size_t ih = oh * stride + kh - padding;
                        const size_t iw0 = ow_lo * stride + kw - padding;
                        const double* in_row = in_ch + ih * w + iw0;
                        double* ig_row = ig_ch + ih * w + iw0;
                        const double* up_row = up_ch + oh * w_out + ow_lo;
                        const size_t n = ow_hi - ow_lo;
                        if (stride == 1) {
                            for (size_t i = 0; i < n; ++i) {
                                wg += up_row[i] * in_row[i];
                                ig_row[i] += up_row[i] * wv;
                            }
                        } else {
                            for (size_t i = 0; i < n; ++i) {
                                wg += up_row[i] * in_row[i * stride];
                                ig_row[i * stride] += up_row[i] * wv;
                            }
                        }
                    }
                    g.weight_grad.at(co, ci, kh, kw) = wg;
                }
            }
        }
    }
    return g;
}

MaxPoolResult maxpool2d(const Tensor& input, size_t window, size_t stride) {
    require_rank(input, 3, "maxpool input");
    const size_t c = input.shape[0], h = input.shape[1], w = input.shape[2];
    const size_t h_out = pool_out_dim(h, window, stride);
    const size_t w_out = pool_out_dim(w, window, stride);

    MaxPoolResult r;
    r.output = Tensor({c, h_out, w_out});
    r.argmax.assign(c * h_out * w_out, 0);
    size_t o = 0;
    for (size_t ch = 0; ch < c; ++ch) {
        for (size_t oh = 0; oh < h_out; ++oh) {
            for (size_t ow = 0; ow < w_out; ++ow, ++o) {
                double best = -std::numeric_limits<double>::infinity();
                size_t best_idx = 0;
                for (size_t dh = 0; dh < window; ++dh) {
                    for (size_t dw = 0; dw < window; ++dw) {
                        size_t idx = (ch * h + oh * stride + dh) * w + ow * stride + dw;
                        if (input.data[idx] > best) {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                r.output.data[o] = best;
                r.argmax[o] = best_idx;
            }
        }
    }
    return r;
}

Tensor maxpool2d_backward(const std::vector<size_t>& argmax,
                          const std::vector<size_t>& input_shape, const Tensor& upstream) {
    if (argmax.size() != upstream.numel()) {
        throw ShapeError("maxpool backward: argmax count " + std::to_string(argmax.size()) +
                         " does not match upstream numel " + std::to_string(upstream.numel()));
    }
    Tensor g(input_shape);
    for (size_t o = 0; o < argmax.size(); ++o) {
        if (argmax[o] >= g.numel()) throw ShapeError("maxpool backward: argmax out of range");
        g.data[argmax[o]] += upstream.data[o];
    }
    return g;
}

Tensor avgpool2d(const Tensor& input, size_t window, size_t stride) {
    require_rank(input, 3, "avgpool input");
    const size_t c = input.shape[0], h = input.shape[1], w = input.shape[2];
    const size_t h_out = pool_out_dim(h, window, stride);
    const size_t w_out = pool_out_dim(w, window, stride);
    const double inv = 1.0 / (static_cast<double>(window) * static_cast<double>(window));

    Tensor out({c, h_out, w_out});
    size_t o = 0;
    for (size_t ch = 0; ch < c; ++ch) {
        for (size_t oh = 0; oh < h_out; ++oh) {
            for (size_t ow = 0; ow < w_out; ++ow, ++o) {
                double s = 0.0;
                for (size_t dh = 0; dh < window; ++dh) {
                    for (size_t dw = 0; dw < window; ++dw) {
                        s += input.data[(ch * h + oh * stride + dh) * w + ow * stride + dw];
                    }
                }
                out.data[o] = s * inv;
            }
        }
    }
    return out;
}

Tensor avgpool2d_backward(const std::vector<size_t>& input_shape, size_t window, size_t stride,
                          const Tensor& upstream) {
    if (input_shape.size() != 3) throw ShapeError("avgpool backward expects a rank-3 input shape");
    const size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    const size_t h_out = pool_out_dim(h, window, stride);
    const size_t w_out = pool_out_dim(w, window, stride);
    if (upstream.shape != std::vector<size_t>{c, h_out, w_out}) {
        throw ShapeError("avgpool backward: upstream shape " + shape_str(upstream.shape) +
                         " does not match pooled output");
    }
    const double inv = 1.0 / (static_cast<double>(window) * static_cast<double>(window));
    Tensor g(input_shape);
    size_t o = 0;
    for (size_t ch = 0; ch < c; ++ch) {
        for (size_t oh = 0; oh < h_out; ++oh) {
            for (size_t ow = 0; ow < w_out; ++ow, ++o) {
                const double v = upstream.data[o] * inv;
                for (size_t dh = 0; dh < window; ++dh) {
                    for (size_t dw = 0; dw < window; ++dw) {
                        g.data[(ch * h + oh * stride + dh) * w + ow * stride + dw] += v;
                    }
                }
            }
        }
    }
    return g;
}

Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    require_rank(input, 1, "dense input");
    require_rank(weights, 2, "dense weights");
    require_rank(bias, 1, "dense bias");
    const size_t d_out = weights.shape[0], d_in = weights.shape[1];
    if (input.shape[0] != d_in) {
        throw ShapeError("dense input length " + std::to_string(input.shape[0]) +
                         " does not match weight columns " + std::to_string(d_in));
    }
    if (bias.shape[0] != d_out) {
        throw ShapeError("dense bias length does not match output units");
    }
    Tensor out({d_out});
    for (size_t o = 0; o < d_out; ++o) {
        double s = bias[o];
        const double* row = &weights.data[o * d_in];
        for (size_t i = 0; i < d_in; ++i) s += row[i] * input.data[i];
        out[o] = s;
    }
    return out;
}

LayerGrad dense_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream) {
    require_rank(input, 1, "dense input");
    require_rank(weights, 2, "dense weights");
    require_rank(upstream, 1, "dense upstream gradient");
    const size_t d_out = weights.shape[0], d_in = weights.shape[1];
    if (input.shape[0] != d_in || upstream.shape[0] != d_out) {
        throw ShapeError("dense backward shape mismatch");
    }
    LayerGrad g;
    g.weight_grad = Tensor(weights.shape);
    g.bias_grad = upstream;
    g.input_grad = Tensor(input.shape);
    for (size_t o = 0; o < d_out; ++o) {
        const double up = upstream[o];
        const double* wrow = &weights.data[o * d_in];
        double* grow = &g.weight_grad.data[o * d_in];
        for (size_t i = 0; i < d_in; ++i) {
            grow[i] = up * input.data[i];
            g.input_grad[i] += up * wrow[i];
        }
    }
    return g;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape);
    for (size_t i = 0; i < input.numel(); ++i) out.data[i] = input.data[i] > 0.0 ? input.data[i] : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
    if (!input.same_shape(upstream)) {
        throw ShapeError("relu backward: input shape " + shape_str(input.shape) +
                         " does not match upstream " + shape_str(upstream.shape));
    }
    Tensor g(input.shape);
    for (size_t i = 0; i < input.numel(); ++i) {
        g.data[i] = input.data[i] > 0.0 ? upstream.data[i] : 0.0;
    }
    return g;
}

Tensor softmax_t(const Tensor& logits, double temperature) {
    if (!(temperature > 0.0)) {
        throw DomainError("softmax temperature must be positive, got " +
                          std::to_string(temperature));
    }
    Tensor out(logits.shape);
    const double m = logits.max_value();
    double denom = 0.0;
    for (size_t i = 0; i < logits.numel(); ++i) {
        out.data[i] = std::exp((logits.data[i] - m) / temperature);
        denom += out.data[i];
    }
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] /= denom;
    return out;
}

}  // namespace kdx
