#include "doctest.h"

#include <cmath>

#include "mstrnn/ops.hpp"
#include "mstrnn/rng.hpp"

using namespace mstrnn;

namespace {

Tensor random_tensor(SeededRng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Independent five-nested-loop convolution oracle with explicit bounds
// checks; deliberately structured nothing like the library kernel.
Tensor conv_oracle(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride,
                   int pad) {
    const int n_maps = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int m_maps = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    Tensor out({m_maps, oh, ow});
    for (int m = 0; m < m_maps; ++m)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double acc = bias.empty() ? 0.0 : bias[m];
                for (int n = 0; n < n_maps; ++n)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j) {
                            const int yy = y * stride + i - pad;
                            const int xx = x * stride + j - pad;
                            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                            acc += kernels(m, n, i, j) * input(n, yy, xx);
                        }
                out(m, y, x) = acc;
            }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double worst = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel passes the input through") {
    SeededRng rng(7);
    Tensor input = random_tensor(rng, {1, 3, 3});
    Tensor kernel = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor bias({1});
    Tensor out = conv2d(input, kernel, bias, 1, 0);
    CHECK(max_abs_diff(out, input) == 0.0);
}

TEST_CASE("conv2d: all-ones field sums the window") {
    Tensor input = Tensor::full({1, 4, 4}, 1.0);
    Tensor kernel = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor bias({1});
    Tensor out = conv2d(input, kernel, bias, 1, 0);
    CHECK(out.shape() == std::vector<int>{1, 2, 2});
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(9.0).epsilon(0));
}

TEST_CASE("conv2d matches the naive-loop oracle") {
    SeededRng rng(42);
    for (int trial = 0; trial < 8; ++trial) {
        const int stride = 1 + trial % 2;
        const int pad = trial % 3 == 0 ? 1 : 0;
        Tensor input = random_tensor(rng, {2, 5, 5});
        Tensor kernels = random_tensor(rng, {3, 2, 3, 3});
        Tensor bias = random_tensor(rng, {3});
        CHECK(max_abs_diff(conv2d(input, kernels, bias, stride, pad),
                           conv_oracle(input, kernels, bias, stride, pad)) < 1e-12);
    }
}

TEST_CASE("conv2d rejects mismatched input maps") {
    Tensor input({2, 5, 5});
    Tensor kernels({3, 4, 3, 3});
    Tensor bias({3});
    CHECK_THROWS_AS(conv2d(input, kernels, bias, 1, 0), ShapeError);
}

TEST_CASE("conv2d is linear in its input") {
    SeededRng rng(11);
    Tensor x = random_tensor(rng, {2, 6, 6});
    Tensor y = random_tensor(rng, {2, 6, 6});
    Tensor kernels = random_tensor(rng, {3, 2, 3, 3});
    Tensor no_bias;
    const double a = 1.7, b = -0.4;

    Tensor mix = x.scaled(a);
    mix.add_scaled(y, b);
    Tensor lhs = conv2d(mix, kernels, no_bias, 1, 0);
    Tensor rhs = conv2d(x, kernels, no_bias, 1, 0).scaled(a);
    rhs.add_scaled(conv2d(y, kernels, no_bias, 1, 0), b);
    CHECK(max_abs_diff(lhs, rhs) < 1e-10);
}

TEST_CASE("conv2d output extents follow the closed form") {
    SeededRng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 4 + rng.next_int(12), w = 4 + rng.next_int(12);
        const int kh = 1 + rng.next_int(std::min(4, h)), kw = 1 + rng.next_int(std::min(4, w));
        const int stride = 1 + rng.next_int(3), pad = rng.next_int(2);
        Tensor input = random_tensor(rng, {1, h, w});
        Tensor kernels = random_tensor(rng, {2, 1, kh, kw});
        Tensor bias = random_tensor(rng, {2});
        Tensor out = conv2d(input, kernels, bias, stride, pad);
        CHECK(out.dim(1) == (h + 2 * pad - kh) / stride + 1);
        CHECK(out.dim(2) == (w + 2 * pad - kw) / stride + 1);
    }
}

TEST_CASE("maxpool2d: single window picks the max and its index") {
    Tensor input = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    PoolResult res = maxpool2d(input);
    CHECK(res.out.size() == 1);
    CHECK(res.out[0] == 4.0);
    CHECK(res.argmax[0] == 3);
}

TEST_CASE("maxpool2d: ties go to the first element in row-major order") {
    Tensor input = Tensor::full({1, 4, 4}, 0.5);
    PoolResult res = maxpool2d(input);
    CHECK(res.out.shape() == std::vector<int>{1, 2, 2});
    CHECK(res.argmax[0] == 0);
    CHECK(res.argmax[1] == 2);
    CHECK(res.argmax[2] == 8);
    CHECK(res.argmax[3] == 10);
}

TEST_CASE("maxpool2d matches a brute-force window scan") {
    SeededRng rng(99);
    Tensor input = random_tensor(rng, {1, 6, 6});
    PoolResult res = maxpool2d(input);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
            double want = -1e9;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    want = std::max(want, input(0, 2 * y + dy, 2 * x + dx));
            CHECK(res.out(0, y, x) == want);
        }
}

TEST_CASE("maxpool2d replicates the edge for odd extents") {
    Tensor input = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    PoolResult res = maxpool2d(input);
    CHECK(res.out.shape() == std::vector<int>{1, 2, 2});
    CHECK(res.out(0, 0, 0) == 5.0);
    CHECK(res.out(0, 0, 1) == 6.0);  // window clamped to the last column
    CHECK(res.out(0, 1, 0) == 8.0);
    CHECK(res.out(0, 1, 1) == 9.0);
}

TEST_CASE("maxpool2d backward routes gradients to the winners") {
    SeededRng rng(5);
    Tensor input = random_tensor(rng, {2, 4, 4});
    PoolResult res = maxpool2d(input);
    Tensor grad_out = random_tensor(rng, res.out.shape());
    Tensor din = maxpool2d_backward(res.argmax, grad_out, input.shape());
    double total_in = 0.0, total_out = 0.0;
    for (int64_t i = 0; i < din.size(); ++i) total_in += din[i];
    for (int64_t i = 0; i < grad_out.size(); ++i) total_out += grad_out[i];
    CHECK(total_in == doctest::Approx(total_out).epsilon(1e-12));
}

TEST_CASE("tanh_scaled: zero, saturation bound, hand value") {
    CHECK(tanh_scaled(0.0) == 0.0);
    CHECK(std::abs(tanh_scaled(50.0)) <= kTanhGain - 1e-9);
    CHECK(std::abs(tanh_scaled(-50.0)) <= kTanhGain - 1e-9);
    // x = 0.75 -> 1.7159 * tanh(0.5)
    CHECK(tanh_scaled(0.75) == doctest::Approx(1.7159 * std::tanh(0.5)).epsilon(1e-14));
    CHECK(tanh_scaled(0.75) == doctest::Approx(0.79297).epsilon(1e-4));
}

TEST_CASE("tanh_scaled is odd") {
    SeededRng rng(1);
    for (int i = 0; i < 100; ++i) {
        const double x = rng.uniform(-5.0, 5.0);
        CHECK(tanh_scaled(-x) == -tanh_scaled(x));
    }
}

TEST_CASE("softmax: uniform over equal logits") {
    const auto out = softmax({2.5, 2.5, 2.5, 2.5});
    for (double v : out) CHECK(v == doctest::Approx(0.25).epsilon(1e-13));
}

TEST_CASE("softmax: huge logits do not overflow") {
    const auto out = softmax({1000.0, 0.0});
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out[1] < 1e-300);
    CHECK(std::isfinite(out[0]));
}

TEST_CASE("softmax matches the direct formula and sums to one") {
    const std::vector<double> logits{1.0, 2.0, 3.0};
    const auto out = softmax(logits);
    double z = 0.0;
    for (double v : logits) z += std::exp(v);
    for (size_t i = 0; i < logits.size(); ++i)
        CHECK(out[i] == doctest::Approx(std::exp(logits[i]) / z).epsilon(1e-12));
    CHECK(out[0] + out[1] + out[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax is invariant to a constant shift") {
    SeededRng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> logits(5);
        for (double& v : logits) v = rng.uniform(-3.0, 3.0);
        const auto base = softmax(logits);
        for (double& v : logits) v += 17.25;
        const auto shifted = softmax(logits);
        for (size_t i = 0; i < logits.size(); ++i)
            CHECK(shifted[i] == doctest::Approx(base[i]).epsilon(1e-12));
    }
}

TEST_CASE("lecun_uniform_init: bound, determinism, variance") {
    SeededRng rng(123);
    Tensor t = lecun_uniform_init(rng, 3, {64});
    for (int64_t i = 0; i < t.size(); ++i) CHECK(std::abs(t[i]) <= 1.0);

    SeededRng a(55), b(55);
    Tensor ta = lecun_uniform_init(a, 9, {4, 4});
    Tensor tb = lecun_uniform_init(b, 9, {4, 4});
    CHECK(max_abs_diff(ta, tb) == 0.0);

    SeededRng big(2024);
    Tensor sample = lecun_uniform_init(big, 12, {100000});
    double mean = 0.0;
    for (int64_t i = 0; i < sample.size(); ++i) mean += sample[i];
    mean /= static_cast<double>(sample.size());
    double var = 0.0;
    for (int64_t i = 0; i < sample.size(); ++i) var += (sample[i] - mean) * (sample[i] - mean);
    var /= static_cast<double>(sample.size() - 1);
    CHECK(var == doctest::Approx(1.0 / 12).epsilon(0.05));
}

TEST_CASE("SeededRng: identical seeds give identical streams") {
    SeededRng a(987654321), b(987654321);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}
