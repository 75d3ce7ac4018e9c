#include "mstrnn/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mstrnn/errors.hpp"
#include "mstrnn/ops.hpp"

namespace mstrnn {

using nlohmann::json;

std::string stage_kind_name(StageKind kind) {
    switch (kind) {
        case StageKind::Conv: return "conv";
        case StageKind::Pool: return "pool";
        case StageKind::LeakyConv: return "leaky_conv";
        case StageKind::Context: return "context";
        case StageKind::Lstm: return "lstm";
        case StageKind::Fc: return "fc";
    }
    return "?";
}

StageKind stage_kind_from_name(const std::string& name) {
    if (name == "conv") return StageKind::Conv;
    if (name == "pool") return StageKind::Pool;
    if (name == "leaky_conv") return StageKind::LeakyConv;
    if (name == "context") return StageKind::Context;
    if (name == "lstm") return StageKind::Lstm;
    if (name == "fc") return StageKind::Fc;
    throw ConfigError("unknown stage kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// ModelSpec serialization

json ModelSpec::to_json() const {
    json stages_j = json::array();
    for (const StageSpec& s : stages) {
        stages_j.push_back({{"kind", stage_kind_name(s.kind)},
                            {"maps", s.maps},
                            {"context_maps", s.context_maps},
                            {"kh", s.kh},
                            {"kw", s.kw},
                            {"stride", s.stride},
                            {"pad", s.pad},
                            {"tau", s.tau},
                            {"ctx_pad", s.ctx_pad},
                            {"z_pad", s.z_pad}});
    }
    json heads_j = json::array();
    for (const HeadSpec& h : heads) heads_j.push_back({{"name", h.name}, {"size", h.size}});
    return json{{"kind", kind},
                {"input_maps", input_maps},
                {"input_h", input_h},
                {"input_w", input_w},
                {"stages", stages_j},
                {"heads", heads_j}};
}

ModelSpec ModelSpec::from_json(const json& j) {
    ModelSpec spec;
    spec.kind = j.at("kind").get<std::string>();
    spec.input_maps = j.at("input_maps").get<int>();
    spec.input_h = j.at("input_h").get<int>();
    spec.input_w = j.at("input_w").get<int>();
    for (const json& sj : j.at("stages")) {
        StageSpec s;
        s.kind = stage_kind_from_name(sj.at("kind").get<std::string>());
        s.maps = sj.value("maps", 0);
        s.context_maps = sj.value("context_maps", 0);
        s.kh = sj.value("kh", 3);
        s.kw = sj.value("kw", 3);
        s.stride = sj.value("stride", 1);
        s.pad = sj.value("pad", 0);
        s.tau = sj.value("tau", 1.0);
        s.ctx_pad = sj.value("ctx_pad", 0);
        s.z_pad = sj.value("z_pad", 0);
        spec.stages.push_back(s);
    }
    for (const json& hj : j.at("heads"))
        spec.heads.push_back({hj.at("name").get<std::string>(), hj.at("size").get<int>()});
    return spec;
}

uint64_t ModelSpec::digest() const {
    const std::string canon = to_json().dump();
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// GradientBundle

void GradientBundle::zero() {
    for (Tensor& t : tensors) t.fill(0.0);
}

GradientBundle& GradientBundle::add_scaled(const GradientBundle& other, double s) {
    for (size_t i = 0; i < tensors.size(); ++i) tensors[i].add_scaled(other.tensors[i], s);
    return *this;
}

GradientBundle& GradientBundle::scale(double s) {
    for (Tensor& t : tensors) t.scale(s);
    return *this;
}

std::optional<std::string> GradientBundle::find_non_finite() const {
    for (size_t i = 0; i < tensors.size(); ++i)
        if (!tensors[i].all_finite()) return names[i];
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Shared stage helpers

namespace {

int64_t numel(const std::vector<int>& shape) { return Tensor::count(shape); }

Tensor flatten_io(const StageIO& io) {
    if (io.context.empty()) return io.pool.reshaped({static_cast<int>(io.pool.size())});
    Tensor out({static_cast<int>(io.pool.size() + io.context.size())});
    std::copy(io.pool.data(), io.pool.data() + io.pool.size(), out.data());
    std::copy(io.context.data(), io.context.data() + io.context.size(),
              out.data() + io.pool.size());
    return out;
}

StageIO unflatten_io(const Tensor& flat, const StageIOShapes& shapes) {
    StageIO io;
    const int64_t np = numel(shapes.pool);
    io.pool = Tensor(shapes.pool);
    std::copy(flat.data(), flat.data() + np, io.pool.data());
    if (!shapes.context.empty()) {
        io.context = Tensor(shapes.context);
        std::copy(flat.data() + np, flat.data() + np + io.context.size(), io.context.data());
    }
    return io;
}

void require_positive_extents(const std::vector<int>& shape, const std::string& what) {
    for (int e : shape)
        if (e <= 0) throw BuildError(what + " has non-positive extent " + Tensor::shape_str(shape));
}

std::vector<int> conv_out_shape(const std::vector<int>& in, int maps, int kh, int kw, int stride,
                                int pad, const std::string& what) {
    if (in.size() != 3) throw BuildError(what + ": expected a maps x H x W input");
    const std::vector<int> out{maps, conv_out_extent(in[1], kh, stride, pad),
                               conv_out_extent(in[2], kw, stride, pad)};
    require_positive_extents(out, what + " output");
    return out;
}

std::vector<int> pool_out_shape(const std::vector<int>& in) {
    return {in[0], (in[1] + 1) / 2, (in[2] + 1) / 2};
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv stage (stateless conv + scaled tanh)

namespace {

struct ConvState final : StageState {
    std::vector<Tensor> input;
    std::vector<Tensor> pre;
};

class ConvStage final : public Stage {
  public:
    using Stage::Stage;

    void build(const StageIOShapes& in, SeededRng& rng) override {
        if (!in.context.empty())
            throw BuildError("plain conv cannot consume context maps; wire a context layer");
        in_shapes_ = in;
        out_shapes_.pool =
            conv_out_shape(in.pool, spec_.maps, spec_.kh, spec_.kw, spec_.stride, spec_.pad, name_);
        const int fan_in = in.pool[0] * spec_.kh * spec_.kw;
        k_ = lecun_uniform_init(rng, fan_in, {spec_.maps, in.pool[0], spec_.kh, spec_.kw});
        b_ = lecun_uniform_init(rng, fan_in, {spec_.maps});
    }

    StageIOShapes out_shapes() const override { return out_shapes_; }

    void collect_params(std::vector<ParamRef>& out) override {
        out.push_back({name_ + ".k", &k_, false});
        out.push_back({name_ + ".b", &b_, true});
    }

    std::unique_ptr<StageState> new_state() const override { return std::make_unique<ConvState>(); }

    StageIO forward_step(const StageIO& in, StageState& state, const StepCtx& ctx) const override {
        Tensor pre = conv2d(in.pool, k_, b_, spec_.stride, spec_.pad);
        StageIO out{tanh_scaled(pre), {}};
        if (ctx.keep_tape) {
            auto& st = static_cast<ConvState&>(state);
            st.input.push_back(in.pool);
            st.pre.push_back(std::move(pre));
        }
        return out;
    }

    StageIO backward_step(const StageIO& d_out, StageState& state, int t,
                          const std::vector<Tensor*>& grads) const override {
        auto& st = static_cast<ConvState&>(state);
        if (d_out.pool.empty()) return {};  // stateless: no gradient flows further back
        Tensor dpre = tanh_scaled_backward(st.pre[t], d_out.pool);
        conv2d_grad_params(st.input[t], dpre, spec_.stride, spec_.pad, *grads[0], *grads[1]);
        return {conv2d_grad_input(k_, dpre, st.input[t].dim(1), st.input[t].dim(2), spec_.stride,
                                  spec_.pad),
                {}};
    }

  private:
    Tensor k_, b_;
    StageIOShapes in_shapes_, out_shapes_;
};

// ---------------------------------------------------------------------------
// Pool stage

struct PoolState final : StageState {
    std::vector<std::vector<int32_t>> argmax;
};

class PoolStage final : public Stage {
  public:
    using Stage::Stage;

    void build(const StageIOShapes& in, SeededRng&) override {
        if (!in.context.empty())
            throw BuildError("standalone pooling cannot consume context maps");
        in_shapes_ = in;
        out_shapes_.pool = pool_out_shape(in.pool);
    }

    StageIOShapes out_shapes() const override { return out_shapes_; }
    void collect_params(std::vector<ParamRef>&) override {}
    std::unique_ptr<StageState> new_state() const override { return std::make_unique<PoolState>(); }

    StageIO forward_step(const StageIO& in, StageState& state, const StepCtx& ctx) const override {
        PoolResult res = maxpool2d(in.pool);
        if (ctx.keep_tape) static_cast<PoolState&>(state).argmax.push_back(std::move(res.argmax));
        return {std::move(res.out), {}};
    }

    StageIO backward_step(const StageIO& d_out, StageState& state, int t,
                          const std::vector<Tensor*>&) const override {
        if (d_out.pool.empty()) return {};
        auto& st = static_cast<PoolState&>(state);
        return {maxpool2d_backward(st.argmax[t], d_out.pool, in_shapes_.pool), {}};
    }

  private:
    StageIOShapes in_shapes_, out_shapes_;
};

// ---------------------------------------------------------------------------
// Leaky-integrator conv stage (feature units without a context input)

struct LeakyConvState final : StageState {
    FeatureState state;
    std::vector<Tensor> input;
    std::vector<Tensor> f_hat;
    Tensor g_carry;
};

class LeakyConvStage final : public Stage {
  public:
    using Stage::Stage;

    void build(const StageIOShapes& in, SeededRng& rng) override {
        if (!in.context.empty())
            throw BuildError("leaky conv cannot consume context maps; use a context layer");
        in_shapes_ = in;
        out_shapes_.pool =
            conv_out_shape(in.pool, spec_.maps, spec_.kh, spec_.kw, spec_.stride, spec_.pad, name_);
        params_.tau = spec_.tau;
        params_.stride = spec_.stride;
        params_.pad = spec_.pad;
        const int fan_in = in.pool[0] * spec_.kh * spec_.kw;
        params_.k = lecun_uniform_init(rng, fan_in, {spec_.maps, in.pool[0], spec_.kh, spec_.kw});
        params_.b = lecun_uniform_init(rng, fan_in, {spec_.maps});
    }

    StageIOShapes out_shapes() const override { return out_shapes_; }

    void collect_params(std::vector<ParamRef>& out) override {
        out.push_back({name_ + ".k", &params_.k, false});
        out.push_back({name_ + ".b", &params_.b, true});
    }

    std::unique_ptr<StageState> new_state() const override {
        auto st = std::make_unique<LeakyConvState>();
        st->state.f_hat = Tensor(out_shapes_.pool);
        return st;
    }

    StageIO forward_step(const StageIO& in, StageState& state, const StepCtx& ctx) const override {
        auto& st = static_cast<LeakyConvState&>(state);
        Tensor act = feature_units_step(in.pool, {}, st.state, params_);
        if (ctx.keep_tape) {
            st.input.push_back(in.pool);
            st.f_hat.push_back(st.state.f_hat);
        }
        return {std::move(act), {}};
    }

    StageIO backward_step(const StageIO& d_out, StageState& state, int t,
                          const std::vector<Tensor*>& grads) const override {
        auto& st = static_cast<LeakyConvState&>(state);
        FeatureGrads fg{grads[0], grads[1], nullptr};
        Tensor d_in = feature_units_backward(d_out.pool, st.f_hat[t], st.input[t], {}, params_,
                                             st.g_carry, nullptr, fg);
        return {std::move(d_in), {}};
    }

  private:
    FeatureParams params_;
    StageIOShapes in_shapes_, out_shapes_;
};

// ---------------------------------------------------------------------------
// Context layer stage: feature units -> pooling units -> context units,
// in that order within a time step; the context units read the current
// step's pooling and their own previous activations.

struct ContextStageState final : StageState {
    FeatureState fstate;
    ContextState cstate;
    std::vector<Tensor> in_pool, in_ctx;
    std::vector<Tensor> f_hat;
    std::vector<std::vector<int32_t>> argmax;
    std::vector<Tensor> pooled;
    std::vector<Tensor> c_hat;
    std::vector<Tensor> c_before;  // activations c_{t-1} that fed the recurrence
    Tensor g_carry, h_carry;
};

class ContextStage final : public Stage {
  public:
    using Stage::Stage;

    void build(const StageIOShapes& in, SeededRng& rng) override {
        in_shapes_ = in;
        fparams_.tau = spec_.tau;
        fparams_.stride = spec_.stride;
        fparams_.pad = spec_.pad;
        fparams_.z_pad = spec_.z_pad;

        const std::vector<int> f_shape = conv_out_shape(in.pool, spec_.maps, spec_.kh, spec_.kw,
                                                        spec_.stride, spec_.pad, name_ + " features");
        const int fan_k = in.pool[0] * spec_.kh * spec_.kw;
        fparams_.k = lecun_uniform_init(rng, fan_k, {spec_.maps, in.pool[0], spec_.kh, spec_.kw});
        fparams_.b = lecun_uniform_init(rng, fan_k, {spec_.maps});
        if (!in.context.empty()) {
            const std::vector<int> z_shape =
                conv_out_shape(in.context, spec_.maps, 2, 2, 1, spec_.z_pad, name_ + " context drive");
            if (z_shape != f_shape)
                throw BuildError(name_ + ": pooling drive " + Tensor::shape_str(f_shape) +
                                 " and context drive " + Tensor::shape_str(z_shape) +
                                 " extents do not line up");
            const int fan_z = in.context[0] * 2 * 2;
            fparams_.z = lecun_uniform_init(rng, fan_z, {spec_.maps, in.context[0], 2, 2});
        }
        f_shape_ = f_shape;

        const std::vector<int> p_shape = pool_out_shape(f_shape);
        cparams_.tau = spec_.tau;
        cparams_.kt_pad = spec_.ctx_pad;
        const std::vector<int> c_shape = conv_out_shape(p_shape, spec_.context_maps, 2, 2, 1,
                                                        spec_.ctx_pad, name_ + " context units");
        const int fan_kt = spec_.maps * 2 * 2;
        cparams_.kt = lecun_uniform_init(rng, fan_kt, {spec_.context_maps, spec_.maps, 2, 2});
        cparams_.bt = lecun_uniform_init(rng, fan_kt, {spec_.context_maps});
        const int fan_zt = spec_.context_maps * 3 * 3;
        cparams_.zt =
            lecun_uniform_init(rng, fan_zt, {spec_.context_maps, spec_.context_maps, 3, 3});

        out_shapes_.pool = p_shape;
        out_shapes_.context = c_shape;
    }

    StageIOShapes out_shapes() const override { return out_shapes_; }

    void collect_params(std::vector<ParamRef>& out) override {
        out.push_back({name_ + ".k", &fparams_.k, false});
        out.push_back({name_ + ".b", &fparams_.b, true});
        if (fparams_.has_context_input()) out.push_back({name_ + ".z", &fparams_.z, false});
        out.push_back({name_ + ".kt", &cparams_.kt, false});
        out.push_back({name_ + ".bt", &cparams_.bt, true});
        out.push_back({name_ + ".zt", &cparams_.zt, false});
    }

    std::unique_ptr<StageState> new_state() const override {
        auto st = std::make_unique<ContextStageState>();
        st->fstate.f_hat = Tensor(f_shape_);
        st->cstate.c_hat = Tensor(out_shapes_.context);
        st->cstate.c_prev = Tensor(out_shapes_.context);
        return st;
    }

    StageIO forward_step(const StageIO& in, StageState& state, const StepCtx& ctx) const override {
        auto& st = static_cast<ContextStageState&>(state);
        const Tensor c_before = st.cstate.c_prev;

        Tensor f_act = feature_units_step(in.pool, in.context, st.fstate, fparams_);
        PoolResult pooled = maxpool2d(f_act);
        Tensor c_act = context_units_step(pooled.out, st.cstate, cparams_);

        if (ctx.keep_tape) {
            st.in_pool.push_back(in.pool);
            st.in_ctx.push_back(in.context);
            st.f_hat.push_back(st.fstate.f_hat);
            st.argmax.push_back(std::move(pooled.argmax));
            st.pooled.push_back(pooled.out);
            st.c_hat.push_back(st.cstate.c_hat);
            st.c_before.push_back(c_before);
        }
        return {std::move(pooled.out), std::move(c_act)};
    }

    StageIO backward_step(const StageIO& d_out, StageState& state, int t,
                          const std::vector<Tensor*>& grads) const override {
        auto& st = static_cast<ContextStageState&>(state);
        const bool has_z = fparams_.has_context_input();
        ContextGrads cg{grads[has_z ? 3 : 2], grads[has_z ? 4 : 3], grads[has_z ? 5 : 4]};

        Tensor d_pool = context_units_backward(d_out.context, st.c_hat[t], st.pooled[t],
                                               st.c_before[t], cparams_, st.h_carry, cg);
        if (!d_out.pool.empty()) d_pool += d_out.pool;

        Tensor d_f = maxpool2d_backward(st.argmax[t], d_pool, f_shape_);

        FeatureGrads fg{grads[0], grads[1], has_z ? grads[2] : nullptr};
        StageIO d_in;
        d_in.pool = feature_units_backward(d_f, st.f_hat[t], st.in_pool[t], st.in_ctx[t], fparams_,
                                           st.g_carry, has_z ? &d_in.context : nullptr, fg);
        return d_in;
    }

  private:
    FeatureParams fparams_;
    ContextParams cparams_;
    std::vector<int> f_shape_;
    StageIOShapes in_shapes_, out_shapes_;
};

// ---------------------------------------------------------------------------
// LSTM stage

struct LstmStageState final : StageState {
    LstmState state;
    std::vector<LstmTape> tape;
    Tensor dh_carry, dc_carry;
};

class LstmStage final : public Stage {
  public:
    using Stage::Stage;

    void build(const StageIOShapes& in, SeededRng& rng) override {
        in_shapes_ = in;
        in_size_ = static_cast<int>(numel(in.pool) + numel(in.context));
        const int hidden = spec_.maps;
        const int fan = in_size_ + hidden;
        params_.wi = lecun_uniform_init(rng, fan, {hidden, fan});
        params_.bi = lecun_uniform_init(rng, fan, {hidden});
        params_.wf = lecun_uniform_init(rng, fan, {hidden, fan});
        params_.bf = lecun_uniform_init(rng, fan, {hidden});
        params_.wo = lecun_uniform_init(rng, fan, {hidden, fan});
        params_.bo = lecun_uniform_init(rng, fan, {hidden});
        params_.wg = lecun_uniform_init(rng, fan, {hidden, fan});
        params_.bg = lecun_uniform_init(rng, fan, {hidden});
        out_shapes_.pool = {hidden};
    }

    StageIOShapes out_shapes() const override { return out_shapes_; }

    void collect_params(std::vector<ParamRef>& out) override {
        out.push_back({name_ + ".wi", &params_.wi, false});
        out.push_back({name_ + ".bi", &params_.bi, true});
        out.push_back({name_ + ".wf", &params_.wf, false});
        out.push_back({name_ + ".bf", &params_.bf, true});
        out.push_back({name_ + ".wo", &params_.wo, false});
        out.push_back({name_ + ".bo", &params_.bo, true});
        out.push_back({name_ + ".wg", &params_.wg, false});
        out.push_back({name_ + ".bg", &params_.bg, true});
    }

    std::unique_ptr<StageState> new_state() const override {
        auto st = std::make_unique<LstmStageState>();
        st->state.h = Tensor({spec_.maps});
        st->state.c = Tensor({spec_.maps});
        return st;
    }

    StageIO forward_step(const StageIO& in, StageState& state, const StepCtx& ctx) const override {
        auto& st = static_cast<LstmStageState&>(state);
        const Tensor x = flatten_io(in);
        if (ctx.keep_tape) {
            st.tape.emplace_back();
            return {lstm_step(x, st.state, params_, &st.tape.back()), {}};
        }
        return {lstm_step(x, st.state, params_, nullptr), {}};
    }

    StageIO backward_step(const StageIO& d_out, StageState& state, int t,
                          const std::vector<Tensor*>& grads) const override {
        auto& st = static_cast<LstmStageState&>(state);
        LstmGrads lg{grads[0], grads[2], grads[4], grads[6], grads[1], grads[3], grads[5], grads[7]};
        Tensor dx = lstm_backward(d_out.pool, st.tape[t], params_, st.dh_carry, st.dc_carry, lg);
        return unflatten_io(dx, in_shapes_);
    }

  private:
    LstmParams params_;
    StageIOShapes in_shapes_, out_shapes_;
    int in_size_ = 0;
};

// ---------------------------------------------------------------------------
// Fully-connected stage. Inverted dropout on the activations when training.

struct FcState final : StageState {
    std::vector<Tensor> input;  // flattened
    std::vector<Tensor> pre;
    std::vector<Tensor> mask;  // per-unit multiplier, {0, 1/(1-p)}; empty = off
};

class FcStage final : public Stage {
  public:
    using Stage::Stage;

    void build(const StageIOShapes& in, SeededRng& rng) override {
        in_shapes_ = in;
        in_size_ = static_cast<int>(numel(in.pool) + numel(in.context));
        w_ = lecun_uniform_init(rng, in_size_, {spec_.maps, in_size_});
        b_ = lecun_uniform_init(rng, in_size_, {spec_.maps});
        out_shapes_.pool = {spec_.maps};
    }

    StageIOShapes out_shapes() const override { return out_shapes_; }

    void collect_params(std::vector<ParamRef>& out) override {
        out.push_back({name_ + ".W", &w_, false});
        out.push_back({name_ + ".b", &b_, true});
    }

    std::unique_ptr<StageState> new_state() const override { return std::make_unique<FcState>(); }

    StageIO forward_step(const StageIO& in, StageState& state, const StepCtx& ctx) const override {
        const Tensor x = flatten_io(in);
        Tensor pre = linear(x, w_, b_);
        Tensor act = tanh_scaled(pre);

        Tensor mask;
        if (ctx.training && ctx.dropout_p > 0.0) {
            mask = Tensor({spec_.maps});
            const double keep_scale = 1.0 / (1.0 - ctx.dropout_p);
            for (int i = 0; i < spec_.maps; ++i) {
                mask[i] = ctx.dropout_rng->next_double() >= ctx.dropout_p ? keep_scale : 0.0;
                act[i] *= mask[i];
            }
        }
        if (ctx.keep_tape) {
            auto& st = static_cast<FcState&>(state);
            st.input.push_back(x);
            st.pre.push_back(std::move(pre));
            st.mask.push_back(std::move(mask));
        }
        return {std::move(act), {}};
    }

    StageIO backward_step(const StageIO& d_out, StageState& state, int t,
                          const std::vector<Tensor*>& grads) const override {
        if (d_out.pool.empty()) return {};
        auto& st = static_cast<FcState&>(state);
        Tensor d_act = d_out.pool;
        if (!st.mask[t].empty())
            for (int i = 0; i < spec_.maps; ++i) d_act[i] *= st.mask[t][i];
        Tensor dpre = tanh_scaled_backward(st.pre[t], d_act);
        Tensor dx = linear_backward(st.input[t], w_, dpre, *grads[0], *grads[1]);
        return unflatten_io(dx, in_shapes_);
    }

  private:
    Tensor w_, b_;
    StageIOShapes in_shapes_, out_shapes_;
    int in_size_ = 0;
};

std::unique_ptr<Stage> make_stage(const std::string& name, const StageSpec& spec) {
    switch (spec.kind) {
        case StageKind::Conv: return std::make_unique<ConvStage>(name, spec);
        case StageKind::Pool: return std::make_unique<PoolStage>(name, spec);
        case StageKind::LeakyConv: return std::make_unique<LeakyConvStage>(name, spec);
        case StageKind::Context: return std::make_unique<ContextStage>(name, spec);
        case StageKind::Lstm: return std::make_unique<LstmStage>(name, spec);
        case StageKind::Fc: return std::make_unique<FcStage>(name, spec);
    }
    throw BuildError("unhandled stage kind");
}

}  // namespace

// ---------------------------------------------------------------------------
// Model

Model Model::build(const ModelSpec& spec, uint64_t seed) {
    if (spec.stages.empty()) throw BuildError("model has no stages");
    if (spec.heads.empty()) throw BuildError("model has no output heads");
    for (const HeadSpec& h : spec.heads)
        if (h.size < 2) throw BuildError("head '" + h.name + "' needs at least 2 categories");

    Model model;
    model.spec_ = spec;
    SeededRng rng(seed);

    // Stage names: 1-based per kind, matching the usual layer-counting idiom
    // (context2 = second context layer).
    std::vector<int> kind_counts(6, 0);
    StageIOShapes io{{spec.input_maps, spec.input_h, spec.input_w}, {}};
    for (size_t i = 0; i < spec.stages.size(); ++i) {
        const StageSpec& s = spec.stages[i];
        const int n = ++kind_counts[static_cast<int>(s.kind)];
        std::string name = stage_kind_name(s.kind) + std::to_string(n);
        auto stage = make_stage(name, s);
        try {
            stage->build(io, rng);
        } catch (const BuildError& e) {
            throw BuildError("stage " + std::to_string(i) + " (" + name + "): " + e.what());
        } catch (const ShapeError& e) {
            throw BuildError("stage " + std::to_string(i) + " (" + name + "): " + e.what());
        }
        io = stage->out_shapes();
        model.stages_.push_back(std::move(stage));
    }
    model.trunk_out_shapes_ = io;
    model.head_input_size_ = static_cast<int>(numel(io.pool) + numel(io.context));

    for (const HeadSpec& h : spec.heads) {
        model.head_w_.push_back(
            lecun_uniform_init(rng, model.head_input_size_, {h.size, model.head_input_size_}));
        model.head_b_.push_back(lecun_uniform_init(rng, model.head_input_size_, {h.size}));
    }

    // Record per-stage parameter spans for routing gradients.
    std::vector<ParamRef> all;
    for (auto& st : model.stages_) {
        const int first = static_cast<int>(all.size());
        st->collect_params(all);
        model.stage_param_spans_.emplace_back(first, static_cast<int>(all.size()) - first);
    }
    model.head_param_first_ = static_cast<int>(all.size());
    return model;
}

std::vector<ParamRef> Model::params() {
    std::vector<ParamRef> out;
    for (auto& st : stages_) st->collect_params(out);
    for (size_t s = 0; s < head_w_.size(); ++s) {
        out.push_back({"head_" + spec_.heads[s].name + ".W", &head_w_[s], false});
        out.push_back({"head_" + spec_.heads[s].name + ".b", &head_b_[s], true});
    }
    return out;
}

std::vector<std::string> Model::stage_names() const {
    std::vector<std::string> out;
    for (const auto& st : stages_) out.push_back(st->name());
    return out;
}

int64_t Model::count_parameters() const {
    int64_t n = 0;
    auto& self = const_cast<Model&>(*this);
    for (const ParamRef& p : self.params()) n += p.tensor->size();
    return n;
}

GradientBundle Model::zero_gradients() const {
    GradientBundle g;
    auto& self = const_cast<Model&>(*this);
    for (const ParamRef& p : self.params()) {
        g.names.push_back(p.name);
        g.tensors.emplace_back(p.tensor->shape());
    }
    return g;
}

Tensor Model::black_frame() const {
    return Tensor::full({spec_.input_maps, spec_.input_h, spec_.input_w}, -1.0);
}

PassState Model::new_pass(bool keep_tape) const {
    PassState pass;
    for (const auto& st : stages_) pass.stages.push_back(st->new_state());
    pass.keep_tape = keep_tape;
    return pass;
}

std::vector<std::vector<double>> Model::step_forward(const Tensor& frame, PassState& pass,
                                                     const StepCtx& ctx) const {
    StageIO io{frame, {}};
    for (size_t i = 0; i < stages_.size(); ++i) {
        io = stages_[i]->forward_step(io, *pass.stages[i], ctx);
        if (static_cast<int>(i) == pass.record_stage) {
            const Tensor& tap = io.context.empty() ? io.pool : io.context;
            pass.recorded.emplace_back(tap.data(), tap.data() + tap.size());
        }
    }
    const Tensor x = flatten_io(io);
    std::vector<std::vector<double>> probs = output_heads(x, head_w_, head_b_);
    if (ctx.keep_tape) {
        pass.head_inputs.push_back(x);
        pass.head_probs.push_back(probs);
    }
    return probs;
}

void Model::step_backward(const std::vector<std::vector<double>>& d_logits, PassState& pass, int t,
                          GradientBundle& grads) const {
    StageIO dio;
    bool any = false;
    for (const auto& dl : d_logits)
        if (!dl.empty()) any = true;
    if (any) {
        const Tensor& x = pass.head_inputs[t];
        Tensor dx({head_input_size_});
        for (size_t s = 0; s < head_w_.size(); ++s) {
            if (d_logits[s].empty()) continue;
            Tensor dl({static_cast<int>(d_logits[s].size())});
            std::copy(d_logits[s].begin(), d_logits[s].end(), dl.data());
            Tensor& dW = grads.tensors[head_param_first_ + 2 * s];
            Tensor& db = grads.tensors[head_param_first_ + 2 * s + 1];
            dx += linear_backward(x, head_w_[s], dl, dW, db);
        }
        dio = unflatten_io(dx, trunk_out_shapes_);
    }
    for (int i = static_cast<int>(stages_.size()) - 1; i >= 0; --i) {
        std::vector<Tensor*> span;
        const auto [first, count] = stage_param_spans_[i];
        span.reserve(count);
        for (int k = 0; k < count; ++k) span.push_back(&grads.tensors[first + k]);
        dio = stages_[i]->backward_step(dio, *pass.stages[i], t, span);
    }
}

ForwardTrace Model::forward_sequence(const std::vector<Tensor>& frames, int delay,
                                     const ForwardOptions& opts) const {
    if (frames.empty()) throw ShapeError("forward_sequence: no frames");
    const std::vector<int> want{spec_.input_maps, spec_.input_h, spec_.input_w};
    for (size_t i = 0; i < frames.size(); ++i)
        if (frames[i].shape() != want)
            throw ShapeError("frame " + std::to_string(i) + " has shape " + frames[i].shape_str() +
                             ", expected " + Tensor::shape_str(want));

    PassState pass = new_pass(false);
    if (!opts.record.empty()) {
        const auto names = stage_names();
        const auto it = std::find(names.begin(), names.end(), opts.record);
        if (it == names.end()) {
            std::string avail;
            for (const auto& n : names) avail += (avail.empty() ? "" : ", ") + n;
            throw ConfigError("unknown record stage '" + opts.record + "'; available: " + avail);
        }
        pass.record_stage = static_cast<int>(it - names.begin());
    }

    SeededRng dropout_rng(opts.dropout_seed);
    StepCtx ctx{opts.training, opts.dropout_p, &dropout_rng, false};

    ForwardTrace trace;
    trace.t_frames = static_cast<int>(frames.size());
    trace.delay = delay;
    const Tensor black = black_frame();
    for (int t = 0; t < trace.steps(); ++t)
        trace.head_probs.push_back(
            step_forward(t < trace.t_frames ? frames[t] : black, pass, ctx));
    trace.recorded = std::move(pass.recorded);
    return trace;
}

// ---------------------------------------------------------------------------
// Presets

namespace {

struct KernelRegime {
    int k1h, k1w, k1s;  // first conv
    int k2h, k2w;       // first conv after the first pooling
};

KernelRegime regime_for(int h, int w) {
    if (std::max(h, w) >= 96) return {3, 3, 3, 3, 3};
    if (std::abs(h - w) >= 4) {
        if (w > h) return {3, 5, 1, 3, 5};
        return {5, 3, 1, 5, 3};
    }
    return {3, 3, 1, 3, 3};
}

StageSpec conv_spec(int maps, int kh, int kw, int stride) {
    StageSpec s;
    s.kind = StageKind::Conv;
    s.maps = maps;
    s.kh = kh;
    s.kw = kw;
    s.stride = stride;
    return s;
}

StageSpec pool_spec() {
    StageSpec s;
    s.kind = StageKind::Pool;
    return s;
}

StageSpec fc_spec(int width) {
    StageSpec s;
    s.kind = StageKind::Fc;
    s.maps = width;
    return s;
}

}  // namespace

ModelSpec mstrnn_preset(int input_h, int input_w, std::vector<HeadSpec> heads,
                        const PresetOptions& opt) {
    const KernelRegime kr = regime_for(input_h, input_w);
    ModelSpec spec;
    spec.kind = "mstrnn";
    spec.input_h = input_h;
    spec.input_w = input_w;
    spec.heads = std::move(heads);

    spec.stages.push_back(conv_spec(opt.conv1_maps, kr.k1h, kr.k1w, kr.k1s));
    spec.stages.push_back(pool_spec());

    StageSpec cl1;
    cl1.kind = StageKind::Context;
    cl1.maps = opt.cl1_maps;
    cl1.context_maps = opt.cl1_context;
    cl1.kh = kr.k2h;
    cl1.kw = kr.k2w;
    cl1.tau = opt.tau1;
    spec.stages.push_back(cl1);

    StageSpec cl2;
    cl2.kind = StageKind::Context;
    cl2.maps = opt.cl2_maps;
    cl2.context_maps = opt.cl2_context;
    cl2.tau = opt.tau2;
    spec.stages.push_back(cl2);

    spec.stages.push_back(fc_spec(opt.fc1));
    spec.stages.push_back(fc_spec(opt.fc2));
    return spec;
}

ModelSpec mstnn_preset(int input_h, int input_w, std::vector<HeadSpec> heads,
                       const PresetOptions& opt) {
    const KernelRegime kr = regime_for(input_h, input_w);
    ModelSpec spec;
    spec.kind = "mstnn";
    spec.input_h = input_h;
    spec.input_w = input_w;
    spec.heads = std::move(heads);

    spec.stages.push_back(conv_spec(opt.conv1_maps, kr.k1h, kr.k1w, kr.k1s));
    spec.stages.push_back(pool_spec());

    StageSpec l1;
    l1.kind = StageKind::LeakyConv;
    l1.maps = opt.mstnn_l1_maps;
    l1.kh = kr.k2h;
    l1.kw = kr.k2w;
    l1.tau = opt.tau1;
    spec.stages.push_back(l1);
    spec.stages.push_back(pool_spec());

    StageSpec l2;
    l2.kind = StageKind::LeakyConv;
    l2.maps = opt.mstnn_l2_maps;
    l2.tau = opt.tau2;
    spec.stages.push_back(l2);
    spec.stages.push_back(pool_spec());

    spec.stages.push_back(fc_spec(opt.mstnn_fc1));
    spec.stages.push_back(fc_spec(opt.mstnn_fc2));
    return spec;
}

ModelSpec lrcn_preset(int input_h, int input_w, std::vector<HeadSpec> heads,
                      const PresetOptions& opt) {
    const KernelRegime kr = regime_for(input_h, input_w);
    ModelSpec spec;
    spec.kind = "lrcn";
    spec.input_h = input_h;
    spec.input_w = input_w;
    spec.heads = std::move(heads);

    spec.stages.push_back(conv_spec(opt.conv1_maps, kr.k1h, kr.k1w, kr.k1s));
    spec.stages.push_back(pool_spec());
    spec.stages.push_back(conv_spec(opt.lrcn_c2_maps, kr.k2h, kr.k2w, 1));
    spec.stages.push_back(pool_spec());
    spec.stages.push_back(conv_spec(opt.lrcn_c3_maps, 3, 3, 1));
    spec.stages.push_back(pool_spec());

    StageSpec lstm;
    lstm.kind = StageKind::Lstm;
    lstm.maps = opt.lstm_hidden;
    spec.stages.push_back(lstm);

    spec.stages.push_back(fc_spec(opt.lrcn_fc));
    return spec;
}

ModelSpec build_preset(const std::string& kind, int input_h, int input_w,
                       std::vector<HeadSpec> heads, const PresetOptions& opt) {
    if (kind == "mstrnn") return mstrnn_preset(input_h, input_w, std::move(heads), opt);
    if (kind == "mstnn") return mstnn_preset(input_h, input_w, std::move(heads), opt);
    if (kind == "lrcn") return lrcn_preset(input_h, input_w, std::move(heads), opt);
    throw ConfigError("unknown model kind '" + kind + "' (expected mstrnn, mstnn or lrcn)");
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[4] = {'M', 'S', 'T', 'R'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<uint64_t>(v)); }

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

}  // namespace

void save_checkpoint(Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u64(out, model.spec().digest());
    const auto params = model.params();
    write_u32(out, static_cast<uint32_t>(params.size()));
    for (const ParamRef& p : params) {
        write_u32(out, static_cast<uint32_t>(p.tensor->rank()));
        for (int d = 0; d < p.tensor->rank(); ++d)
            write_u32(out, static_cast<uint32_t>(p.tensor->dim(d)));
        for (int64_t i = 0; i < p.tensor->size(); ++i) write_f64(out, (*p.tensor)[i]);
    }
    if (!out) throw IoError("short write to checkpoint: " + path.string());
}

void load_checkpoint(Model& model, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not a checkpoint file (bad magic): " + path.string());
    const uint32_t version = read_u32(in);
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " +
                      path.string());
    const uint64_t digest = read_u64(in);
    if (digest != model.spec().digest())
        throw IoError("checkpoint spec digest mismatch (file written by a different architecture): " +
                      path.string());
    const auto params = model.params();
    const uint32_t n = read_u32(in);
    if (n != params.size())
        throw IoError("checkpoint tensor count " + std::to_string(n) + " != model " +
                      std::to_string(params.size()) + ": " + path.string());
    for (const ParamRef& p : params) {
        const uint32_t rank = read_u32(in);
        std::vector<int> shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_u32(in));
        if (shape != p.tensor->shape())
            throw IoError("checkpoint tensor '" + p.name + "' shape " + Tensor::shape_str(shape) +
                          " != model " + p.tensor->shape_str() + ": " + path.string());
        for (int64_t i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] = read_f64(in);
    }
    if (!in) throw IoError("checkpoint truncated: " + path.string());
}

}  // namespace mstrnn
