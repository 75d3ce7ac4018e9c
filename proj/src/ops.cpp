#include "mstrnn/ops.hpp"

#include <algorithm>
#include <cmath>

namespace mstrnn {

namespace {

// Copies an N x H x W tensor into an N x (H+2p) x (W+2p) zero-padded buffer.
Tensor zero_padded(const Tensor& input, int pad) {
    if (pad == 0) return input;
    const int n = input.dim(0), h = input.dim(1), w = input.dim(2);
    Tensor out({n, h + 2 * pad, w + 2 * pad});
    for (int c = 0; c < n; ++c)
        for (int y = 0; y < h; ++y) {
            const double* src = input.data() + (static_cast<int64_t>(c) * h + y) * w;
            double* dst = out.data() +
                          (static_cast<int64_t>(c) * (h + 2 * pad) + y + pad) * (w + 2 * pad) + pad;
            std::copy(src, src + w, dst);
        }
    return out;
}

void check_conv_shapes(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride,
                       int zero_pad) {
    if (input.rank() != 3)
        throw ShapeError("conv2d: input must be N x H x W, got " + input.shape_str());
    if (kernels.rank() != 4)
        throw ShapeError("conv2d: kernels must be M x N x kh x kw, got " + kernels.shape_str());
    if (kernels.dim(1) != input.dim(0))
        throw ShapeError("conv2d: kernel input maps " + std::to_string(kernels.dim(1)) +
                         " do not match input maps " + std::to_string(input.dim(0)));
    if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != kernels.dim(0)))
        throw ShapeError("conv2d: bias must be M = " + std::to_string(kernels.dim(0)) + ", got " +
                         bias.shape_str());
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const int kh = kernels.dim(2), kw = kernels.dim(3);
    if (kh > input.dim(1) + 2 * zero_pad || kw > input.dim(2) + 2 * zero_pad)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + input.shape_str());
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride,
              int zero_pad) {
    check_conv_shapes(input, kernels, bias, stride, zero_pad);
    const Tensor padded = zero_padded(input, zero_pad);
    const int n_maps = input.dim(0);
    const int ph = padded.dim(1), pw = padded.dim(2);
    const int m_maps = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    const int oh = conv_out_extent(input.dim(1), kh, stride, zero_pad);
    const int ow = conv_out_extent(input.dim(2), kw, stride, zero_pad);

    Tensor out({m_maps, oh, ow});
    for (int m = 0; m < m_maps; ++m) {
        double* om = out.data() + static_cast<int64_t>(m) * oh * ow;
        if (!bias.empty()) {
            const double b = bias[m];
            for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) om[i] = b;
        }
        for (int n = 0; n < n_maps; ++n) {
            const double* in = padded.data() + static_cast<int64_t>(n) * ph * pw;
            const double* km = kernels.data() + ((static_cast<int64_t>(m) * n_maps + n) * kh) * kw;
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j) {
                    const double coef = km[static_cast<int64_t>(i) * kw + j];
                    if (coef == 0.0) continue;
                    for (int y = 0; y < oh; ++y) {
                        const double* row = in + static_cast<int64_t>(y * stride + i) * pw + j;
                        double* orow = om + static_cast<int64_t>(y) * ow;
                        for (int x = 0; x < ow; ++x) orow[x] += coef * row[x * stride];
                    }
                }
        }
    }
    return out;
}

Tensor conv2d_grad_input(const Tensor& kernels, const Tensor& grad_out, int in_h, int in_w,
                         int stride, int zero_pad) {
    const int m_maps = kernels.dim(0), n_maps = kernels.dim(1);
    const int kh = kernels.dim(2), kw = kernels.dim(3);
    const int oh = grad_out.dim(1), ow = grad_out.dim(2);
    const int ph = in_h + 2 * zero_pad, pw = in_w + 2 * zero_pad;

    Tensor dpad({n_maps, ph, pw});
    for (int m = 0; m < m_maps; ++m) {
        const double* gm = grad_out.data() + static_cast<int64_t>(m) * oh * ow;
        for (int n = 0; n < n_maps; ++n) {
            double* dn = dpad.data() + static_cast<int64_t>(n) * ph * pw;
            const double* km = kernels.data() + ((static_cast<int64_t>(m) * n_maps + n) * kh) * kw;
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j) {
                    const double coef = km[static_cast<int64_t>(i) * kw + j];
                    if (coef == 0.0) continue;
                    for (int y = 0; y < oh; ++y) {
                        double* row = dn + static_cast<int64_t>(y * stride + i) * pw + j;
                        const double* grow = gm + static_cast<int64_t>(y) * ow;
                        for (int x = 0; x < ow; ++x) row[x * stride] += coef * grow[x];
                    }
                }
        }
    }
    if (zero_pad == 0) return dpad;

    Tensor din({n_maps, in_h, in_w});
    for (int n = 0; n < n_maps; ++n)
        for (int y = 0; y < in_h; ++y) {
            const double* src =
                dpad.data() + (static_cast<int64_t>(n) * ph + y + zero_pad) * pw + zero_pad;
            double* dst = din.data() + (static_cast<int64_t>(n) * in_h + y) * in_w;
            std::copy(src, src + in_w, dst);
        }
    return din;
}

void conv2d_grad_params(const Tensor& input, const Tensor& grad_out, int stride, int zero_pad,
                        Tensor& grad_kernels, Tensor& grad_bias) {
    const Tensor padded = zero_padded(input, zero_pad);
    const int n_maps = input.dim(0);
    const int ph = padded.dim(1), pw = padded.dim(2);
    const int m_maps = grad_kernels.dim(0), kh = grad_kernels.dim(2), kw = grad_kernels.dim(3);
    const int oh = grad_out.dim(1), ow = grad_out.dim(2);

    for (int m = 0; m < m_maps; ++m) {
        const double* gm = grad_out.data() + static_cast<int64_t>(m) * oh * ow;
        if (!grad_bias.empty()) {
            double acc = 0.0;
            for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) acc += gm[i];
            grad_bias[m] += acc;
        }
        for (int n = 0; n < n_maps; ++n) {
            const double* in = padded.data() + static_cast<int64_t>(n) * ph * pw;
            double* dk = grad_kernels.data() + ((static_cast<int64_t>(m) * n_maps + n) * kh) * kw;
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j) {
                    double acc = 0.0;
                    for (int y = 0; y < oh; ++y) {
                        const double* row = in + static_cast<int64_t>(y * stride + i) * pw + j;
                        const double* grow = gm + static_cast<int64_t>(y) * ow;
                        for (int x = 0; x < ow; ++x) acc += grow[x] * row[x * stride];
                    }
                    dk[static_cast<int64_t>(i) * kw + j] += acc;
                }
        }
    }
}

PoolResult maxpool2d(const Tensor& input) {
    if (input.rank() != 3)
        throw ShapeError("maxpool2d: input must be N x H x W, got " + input.shape_str());
    const int n_maps = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int oh = (h + 1) / 2, ow = (w + 1) / 2;

    PoolResult res;
    res.out = Tensor({n_maps, oh, ow});
    res.argmax.assign(static_cast<size_t>(n_maps) * oh * ow, 0);
    int64_t oi = 0;
    for (int n = 0; n < n_maps; ++n) {
        const double* in = input.data() + static_cast<int64_t>(n) * h * w;
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x, ++oi) {
                double best = -HUGE_VAL;
                int32_t best_idx = 0;
                // Replication padding for odd extents = clamping the window;
                // row-major scan keeps the first maximal element on ties.
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int yy = std::min(2 * y + dy, h - 1);
                        const int xx = std::min(2 * x + dx, w - 1);
                        const double v = in[static_cast<int64_t>(yy) * w + xx];
                        if (v > best) {
                            best = v;
                            best_idx = static_cast<int32_t>((static_cast<int64_t>(n) * h + yy) * w + xx);
                        }
                    }
                res.out[oi] = best;
                res.argmax[static_cast<size_t>(oi)] = best_idx;
            }
    }
    return res;
}

Tensor maxpool2d_backward(const std::vector<int32_t>& argmax, const Tensor& grad_out,
                          const std::vector<int>& input_shape) {
    Tensor din(input_shape);
    for (int64_t i = 0; i < grad_out.size(); ++i) din[argmax[static_cast<size_t>(i)]] += grad_out[i];
    return din;
}

double tanh_scaled(double x) { return kTanhGain * std::tanh(kTanhSlope * x); }

Tensor tanh_scaled(const Tensor& x) {
    Tensor y = x;
    double* d = y.data();
    for (int64_t i = 0; i < y.size(); ++i) d[i] = kTanhGain * std::tanh(kTanhSlope * d[i]);
    return y;
}

Tensor tanh_scaled_backward(const Tensor& pre, const Tensor& grad_out) {
    Tensor dx = grad_out;
    const double* p = pre.data();
    double* d = dx.data();
    for (int64_t i = 0; i < dx.size(); ++i) {
        const double t = std::tanh(kTanhSlope * p[i]);
        d[i] *= kTanhGain * kTanhSlope * (1.0 - t * t);
    }
    return dx;
}

std::vector<double> softmax(const std::vector<double>& logits) {
    std::vector<double> out(logits.size());
    const double top = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - top);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

Tensor lecun_uniform_init(SeededRng& rng, int fan_in, std::vector<int> shape) {
    const double bound = std::sqrt(3.0 / fan_in);
    Tensor t(std::move(shape));
    double* d = t.data();
    for (int64_t i = 0; i < t.size(); ++i) d[i] = rng.uniform(-bound, bound);
    return t;
}

}  // namespace mstrnn
