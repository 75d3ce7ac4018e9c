#pragma once

#include <vector>

#include "mstrnn/ops.hpp"
#include "mstrnn/tensor.hpp"

namespace mstrnn {

/// Parameters of the feature-unit half of a layer: leaky-integrator
/// convolutional maps. k reads the previous layer's pooling maps, z (optional)
/// reads the previous layer's context maps.
struct FeatureParams {
    double tau = 1.0;
    Tensor k;  // M x N x kh x kw
    Tensor b;  // M
    Tensor z;  // M x A x zh x zw; empty when the previous layer has no context units
    int stride = 1;
    int pad = 0;
    int z_stride = 1;
    int z_pad = 0;

    bool has_context_input() const { return !z.empty(); }
};

/// Parameters of the context-unit half: same leaky dynamics plus a recurrent
/// 3x3 / pad-1 convolution over the units' own previous activations, which
/// keeps the context map extents constant across time steps.
struct ContextParams {
    double tau = 1.0;
    Tensor kt;  // B x M x 2 x 2 (same-layer pooling -> context)
    Tensor bt;  // B
    Tensor zt;  // B x B x 3 x 3 recurrent
    int kt_pad = 0;
};

/// One context layer's learnables (feature + context halves share tau).
struct LayerParams {
    FeatureParams feature;
    ContextParams context;
};

/// Internal states f-hat of the feature-unit leaky integrators. Zeros at t=0.
struct FeatureState {
    Tensor f_hat;
};

/// Internal states c-hat plus the previous step's activations c, which feed
/// the recurrent kernels. Zeros at t=0.
struct ContextState {
    Tensor c_hat;
    Tensor c_prev;
};

/// One leaky-integrator step of the feature units:
///   f-hat' = (1 - 1/tau) f-hat + (1/tau)(k * pool + b) + (1/tau)(z * context)
/// followed by the scaled tanh. Updates state in place, returns activations.
/// prev_context must be empty iff params.z is empty.
Tensor feature_units_step(const Tensor& prev_pool, const Tensor& prev_context, FeatureState& state,
                          const FeatureParams& params);

/// One step of the context units:
///   c-hat' = (1 - 1/tau) c-hat + (1/tau)(kt * pool_t + bt) + (1/tau)(zt * c_{t-1})
/// Updates c_hat and c_prev in place, returns the new activations.
Tensor context_units_step(const Tensor& same_layer_pool, ContextState& state,
                          const ContextParams& params);

/// Gradient sinks for one feature-unit parameter set (accumulated into).
struct FeatureGrads {
    Tensor* dk = nullptr;
    Tensor* db = nullptr;
    Tensor* dz = nullptr;
};

/// Reverse-mode step for feature units. d_act is dE/d(activations at t), may
/// be empty. g_carry holds dE/d(f-hat at t+1) on entry and dE/d(f-hat at t) on
/// exit. Returns dE/d(prev_pool at t); writes dE/d(prev_context at t) into
/// *d_prev_ctx when the layer has a context input.
Tensor feature_units_backward(const Tensor& d_act, const Tensor& f_hat_t,
                              const Tensor& prev_pool_t, const Tensor& prev_ctx_t,
                              const FeatureParams& params, Tensor& g_carry, Tensor* d_prev_ctx,
                              const FeatureGrads& grads);

struct ContextGrads {
    Tensor* dkt = nullptr;
    Tensor* dbt = nullptr;
    Tensor* dzt = nullptr;
};

/// Reverse-mode step for context units. c_prev_t is the activation tensor that
/// fed the recurrent kernels at step t (zeros at t=1). h_carry mirrors g_carry
/// above. Returns dE/d(same_layer_pool at t).
Tensor context_units_backward(const Tensor& d_act, const Tensor& c_hat_t, const Tensor& pool_t,
                              const Tensor& c_prev_t, const ContextParams& params, Tensor& h_carry,
                              const ContextGrads& grads);

/// Fully-connected step: tanh_scaled(W x + b). W is out x in, x a rank-1 tensor.
Tensor fc_step(const Tensor& x, const Tensor& weights, const Tensor& bias);

/// Linear map y = W x + b without activation (head logits and internals).
Tensor linear(const Tensor& x, const Tensor& weights, const Tensor& bias);

/// dE/dx for a linear map; accumulates dW and db.
Tensor linear_backward(const Tensor& x, const Tensor& weights, const Tensor& d_out, Tensor& dW,
                       Tensor& db);

/// Per-head softmax outputs given shared features and per-head (W, b).
std::vector<std::vector<double>> output_heads(const Tensor& features,
                                              const std::vector<Tensor>& head_weights,
                                              const std::vector<Tensor>& head_biases);

/// Minimal LSTM cell for the LRCN baseline. The cell equations are the
/// standard ones and are frozen here:
///   i = sigmoid(Wi [x;h] + bi)      input gate
///   f = sigmoid(Wf [x;h] + bf)      forget gate
///   o = sigmoid(Wo [x;h] + bo)      output gate
///   g = tanh   (Wg [x;h] + bg)      candidate
///   c' = f . c + i . g
///   h' = o . tanh(c')
/// Gate matrices act on the concatenation [x ; h_{t-1}].
struct LstmParams {
    Tensor wi, wf, wo, wg;  // hidden x (in + hidden)
    Tensor bi, bf, bo, bg;  // hidden
};

struct LstmState {
    Tensor h;
    Tensor c;
};

/// Everything the backward step needs about one forward step.
struct LstmTape {
    Tensor xh;  // [x ; h_{t-1}]
    Tensor i, f, o, g;
    Tensor c_prev, c_new;
};

Tensor lstm_step(const Tensor& x, LstmState& state, const LstmParams& params,
                 LstmTape* tape = nullptr);

struct LstmGrads {
    Tensor *dwi, *dwf, *dwo, *dwg;
    Tensor *dbi, *dbf, *dbo, *dbg;
};

/// Reverse step. d_h is dE/d(h_t) from downstream consumers (may be empty);
/// dh_carry / dc_carry are the recurrent gradient carries (zeros before the
/// last step). Returns dE/dx at step t.
Tensor lstm_backward(const Tensor& d_h, const LstmTape& tape, const LstmParams& params,
                     Tensor& dh_carry, Tensor& dc_carry, const LstmGrads& grads);

double logistic(double x);

}  // namespace mstrnn
