#include "mstrnn/layers.hpp"

#include <cmath>

namespace mstrnn {

namespace {

const Tensor kNoBias;

void check_recurrent_kernel(const ContextParams& p) {
    if (p.zt.rank() != 4 || p.zt.dim(2) != 3 || p.zt.dim(3) != 3 || p.zt.dim(0) != p.zt.dim(1))
        throw ShapeError("context units: recurrent kernel must be B x B x 3 x 3, got " +
                         p.zt.shape_str());
}

}  // namespace

Tensor feature_units_step(const Tensor& prev_pool, const Tensor& prev_context, FeatureState& state,
                          const FeatureParams& params) {
    if (params.has_context_input() != !prev_context.empty())
        throw ShapeError("feature units: context input presence does not match z kernels");

    const Tensor drive = conv2d(prev_pool, params.k, params.b, params.stride, params.pad);
    if (state.f_hat.empty()) state.f_hat = Tensor(drive.shape());
    if (!state.f_hat.same_shape(drive))
        throw ShapeError("feature units: state shape " + state.f_hat.shape_str() +
                         " does not match drive " + drive.shape_str());

    const double inv_tau = 1.0 / params.tau;
    const double decay = 1.0 - inv_tau;
    Tensor next = state.f_hat.scaled(decay);
    next.add_scaled(drive, inv_tau);
    if (params.has_context_input()) {
        const Tensor ctx_drive =
            conv2d(prev_context, params.z, kNoBias, params.z_stride, params.z_pad);
        next.add_scaled(ctx_drive, inv_tau);
    }
    state.f_hat = std::move(next);
    return tanh_scaled(state.f_hat);
}

Tensor context_units_step(const Tensor& same_layer_pool, ContextState& state,
                          const ContextParams& params) {
    check_recurrent_kernel(params);

    const Tensor drive = conv2d(same_layer_pool, params.kt, params.bt, 1, params.kt_pad);
    if (state.c_hat.empty()) {
        state.c_hat = Tensor(drive.shape());
        state.c_prev = Tensor(drive.shape());
    }
    if (!state.c_hat.same_shape(drive))
        throw ShapeError("context units: state shape " + state.c_hat.shape_str() +
                         " does not match drive " + drive.shape_str());

    const Tensor recurrent = conv2d(state.c_prev, params.zt, kNoBias, 1, 1);
    const double inv_tau = 1.0 / params.tau;
    Tensor next = state.c_hat.scaled(1.0 - inv_tau);
    next.add_scaled(drive, inv_tau);
    next.add_scaled(recurrent, inv_tau);
    state.c_hat = std::move(next);
    state.c_prev = tanh_scaled(state.c_hat);
    return state.c_prev;
}

Tensor feature_units_backward(const Tensor& d_act, const Tensor& f_hat_t,
                              const Tensor& prev_pool_t, const Tensor& prev_ctx_t,
                              const FeatureParams& params, Tensor& g_carry, Tensor* d_prev_ctx,
                              const FeatureGrads& grads) {
    const double inv_tau = 1.0 / params.tau;
    Tensor g = d_act.empty() ? Tensor(f_hat_t.shape()) : tanh_scaled_backward(f_hat_t, d_act);
    if (!g_carry.empty()) g.add_scaled(g_carry, 1.0 - inv_tau);
    g_carry = g;

    const Tensor scaled = g.scaled(inv_tau);
    conv2d_grad_params(prev_pool_t, scaled, params.stride, params.pad, *grads.dk, *grads.db);
    Tensor d_pool = conv2d_grad_input(params.k, scaled, prev_pool_t.dim(1), prev_pool_t.dim(2),
                                      params.stride, params.pad);
    if (params.has_context_input()) {
        Tensor no_bias;
        conv2d_grad_params(prev_ctx_t, scaled, params.z_stride, params.z_pad, *grads.dz, no_bias);
        if (d_prev_ctx)
            *d_prev_ctx = conv2d_grad_input(params.z, scaled, prev_ctx_t.dim(1), prev_ctx_t.dim(2),
                                            params.z_stride, params.z_pad);
    }
    return d_pool;
}

Tensor context_units_backward(const Tensor& d_act, const Tensor& c_hat_t, const Tensor& pool_t,
                              const Tensor& c_prev_t, const ContextParams& params, Tensor& h_carry,
                              const ContextGrads& grads) {
    const double inv_tau = 1.0 / params.tau;

    // dE/dc_t = downstream consumers + the recurrent route into step t+1.
    Tensor dc = d_act.empty() ? Tensor(c_hat_t.shape()) : d_act;
    if (!h_carry.empty()) {
        const Tensor rec = conv2d_grad_input(params.zt, h_carry.scaled(inv_tau), c_hat_t.dim(1),
                                             c_hat_t.dim(2), 1, 1);
        dc += rec;
    }

    Tensor h = tanh_scaled_backward(c_hat_t, dc);
    if (!h_carry.empty()) h.add_scaled(h_carry, 1.0 - inv_tau);
    h_carry = h;

    const Tensor scaled = h.scaled(inv_tau);
    conv2d_grad_params(pool_t, scaled, 1, params.kt_pad, *grads.dkt, *grads.dbt);
    Tensor no_bias;
    conv2d_grad_params(c_prev_t, scaled, 1, 1, *grads.dzt, no_bias);
    return conv2d_grad_input(params.kt, scaled, pool_t.dim(1), pool_t.dim(2), 1, params.kt_pad);
}

Tensor linear(const Tensor& x, const Tensor& weights, const Tensor& bias) {
    const int out = weights.dim(0), in = weights.dim(1);
    if (x.size() != in)
        throw ShapeError("linear: input size " + std::to_string(x.size()) +
                         " does not match weights " + weights.shape_str());
    Tensor y({out});
    const double* xd = x.data();
    for (int o = 0; o < out; ++o) {
        const double* row = weights.data() + static_cast<int64_t>(o) * in;
        double acc = bias.empty() ? 0.0 : bias[o];
        for (int i = 0; i < in; ++i) acc += row[i] * xd[i];
        y[o] = acc;
    }
    return y;
}

Tensor fc_step(const Tensor& x, const Tensor& weights, const Tensor& bias) {
    return tanh_scaled(linear(x, weights, bias));
}

Tensor linear_backward(const Tensor& x, const Tensor& weights, const Tensor& d_out, Tensor& dW,
                       Tensor& db) {
    const int out = weights.dim(0), in = weights.dim(1);
    Tensor dx({in});
    const double* xd = x.data();
    double* dxd = dx.data();
    for (int o = 0; o < out; ++o) {
        const double g = d_out[o];
        const double* row = weights.data() + static_cast<int64_t>(o) * in;
        double* drow = dW.data() + static_cast<int64_t>(o) * in;
        for (int i = 0; i < in; ++i) {
            drow[i] += g * xd[i];
            dxd[i] += g * row[i];
        }
        if (!db.empty()) db[o] += g;
    }
    return dx;
}

std::vector<std::vector<double>> output_heads(const Tensor& features,
                                              const std::vector<Tensor>& head_weights,
                                              const std::vector<Tensor>& head_biases) {
    std::vector<std::vector<double>> out;
    out.reserve(head_weights.size());
    for (size_t s = 0; s < head_weights.size(); ++s) {
        const Tensor logits = linear(features, head_weights[s], head_biases[s]);
        out.push_back(softmax(std::vector<double>(logits.data(), logits.data() + logits.size())));
    }
    return out;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace {

Tensor concat_vec(const Tensor& a, const Tensor& b) {
    Tensor out({static_cast<int>(a.size() + b.size())});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

}  // namespace

Tensor lstm_step(const Tensor& x, LstmState& state, const LstmParams& params, LstmTape* tape) {
    const int hidden = params.wi.dim(0);
    if (state.h.empty()) {
        state.h = Tensor({hidden});
        state.c = Tensor({hidden});
    }
    const Tensor xh = concat_vec(x.reshaped({static_cast<int>(x.size())}), state.h);

    Tensor i = linear(xh, params.wi, params.bi);
    Tensor f = linear(xh, params.wf, params.bf);
    Tensor o = linear(xh, params.wo, params.bo);
    Tensor g = linear(xh, params.wg, params.bg);
    for (int u = 0; u < hidden; ++u) {
        i[u] = logistic(i[u]);
        f[u] = logistic(f[u]);
        o[u] = logistic(o[u]);
        g[u] = std::tanh(g[u]);
    }

    Tensor c_new({hidden});
    Tensor h_new({hidden});
    for (int u = 0; u < hidden; ++u) {
        c_new[u] = f[u] * state.c[u] + i[u] * g[u];
        h_new[u] = o[u] * std::tanh(c_new[u]);
    }

    if (tape) {
        tape->xh = xh;
        tape->i = i;
        tape->f = f;
        tape->o = o;
        tape->g = g;
        tape->c_prev = state.c;
        tape->c_new = c_new;
    }
    state.c = c_new;
    state.h = h_new;
    return h_new;
}

Tensor lstm_backward(const Tensor& d_h, const LstmTape& tape, const LstmParams& params,
                     Tensor& dh_carry, Tensor& dc_carry, const LstmGrads& grads) {
    const int hidden = params.wi.dim(0);
    const int in = params.wi.dim(1) - hidden;

    Tensor dh_total = d_h.empty() ? Tensor({hidden}) : d_h;
    if (!dh_carry.empty()) dh_total += dh_carry;
    if (dc_carry.empty()) dc_carry = Tensor({hidden});

    Tensor dpre_i({hidden}), dpre_f({hidden}), dpre_o({hidden}), dpre_g({hidden});
    Tensor dc_next({hidden});
    for (int u = 0; u < hidden; ++u) {
        const double tc = std::tanh(tape.c_new[u]);
        const double do_ = dh_total[u] * tc;
        const double dc = dh_total[u] * tape.o[u] * (1.0 - tc * tc) + dc_carry[u];
        dpre_o[u] = do_ * tape.o[u] * (1.0 - tape.o[u]);
        dpre_f[u] = dc * tape.c_prev[u] * tape.f[u] * (1.0 - tape.f[u]);
        dpre_i[u] = dc * tape.g[u] * tape.i[u] * (1.0 - tape.i[u]);
        dpre_g[u] = dc * tape.i[u] * (1.0 - tape.g[u] * tape.g[u]);
        dc_next[u] = dc * tape.f[u];
    }
    dc_carry = dc_next;

    Tensor dxh({in + hidden});
    dxh += linear_backward(tape.xh, params.wi, dpre_i, *grads.dwi, *grads.dbi);
    dxh += linear_backward(tape.xh, params.wf, dpre_f, *grads.dwf, *grads.dbf);
    dxh += linear_backward(tape.xh, params.wo, dpre_o, *grads.dwo, *grads.dbo);
    dxh += linear_backward(tape.xh, params.wg, dpre_g, *grads.dwg, *grads.dbg);

    Tensor dx({in});
    std::copy(dxh.data(), dxh.data() + in, dx.data());
    Tensor dh({hidden});
    std::copy(dxh.data() + in, dxh.data() + in + hidden, dh.data());
    dh_carry = dh;
    return dx;
}

}  // namespace mstrnn
