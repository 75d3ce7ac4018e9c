#pragma once

#include <cstdint>
#include <vector>

#include "mstrnn/rng.hpp"
#include "mstrnn/tensor.hpp"

namespace mstrnn {

/// 2-D cross-correlation (the fixed convolution convention of this library;
/// learned kernels absorb the flip). input is N x H x W, kernels are
/// M x N x kh x kw, bias is M. Output is M x H' x W' with
/// H' = floor((H + 2*pad - kh)/stride) + 1 and likewise for W'.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride,
              int zero_pad);

/// Gradient of conv2d with respect to its input, given the gradient of the
/// loss with respect to the conv output. in_h/in_w are the unpadded extents.
Tensor conv2d_grad_input(const Tensor& kernels, const Tensor& grad_out, int in_h, int in_w,
                         int stride, int zero_pad);

/// Accumulates the gradients with respect to kernels and bias into
/// grad_kernels / grad_bias (shapes must already match).
void conv2d_grad_params(const Tensor& input, const Tensor& grad_out, int stride, int zero_pad,
                        Tensor& grad_kernels, Tensor& grad_bias);

/// 2x2 stride-2 max pooling. Odd extents are padded by replicating the last
/// row/column. argmax holds, per output element, the flat index of the winning
/// input element (ties: first in row-major order); it drives the backward pass.
struct PoolResult {
    Tensor out;
    std::vector<int32_t> argmax;
};
PoolResult maxpool2d(const Tensor& input);

Tensor maxpool2d_backward(const std::vector<int32_t>& argmax, const Tensor& grad_out,
                          const std::vector<int>& input_shape);

/// y = 1.7159 * tanh((2/3) x), the activation of every feature, context and
/// fully-connected unit.
inline constexpr double kTanhGain = 1.7159;
inline constexpr double kTanhSlope = 2.0 / 3.0;

double tanh_scaled(double x);
Tensor tanh_scaled(const Tensor& x);

/// dL/dx given the pre-activation x and dL/dy.
Tensor tanh_scaled_backward(const Tensor& pre, const Tensor& grad_out);

/// Numerically stable softmax (max subtraction).
std::vector<double> softmax(const std::vector<double>& logits);

/// LeCun-style uniform initialization: i.i.d. on [-sqrt(3/fan_in), +sqrt(3/fan_in)],
/// drawn in row-major order so a given (seed, shape) always yields the same
/// tensor. Pairs with the 1.7159*tanh activation.
Tensor lecun_uniform_init(SeededRng& rng, int fan_in, std::vector<int> shape);

/// Output extent of a conv/pool window along one axis.
inline int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace mstrnn
