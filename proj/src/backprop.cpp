#include "mstrnn/backprop.hpp"

#include <cmath>
#include <iostream>

#include "mstrnn/errors.hpp"

namespace mstrnn {

namespace {

void check_targets(const TargetLabels& targets, const ModelSpec& spec) {
    if (targets.per_head.size() != spec.heads.size())
        throw ShapeError("targets cover " + std::to_string(targets.per_head.size()) +
                         " heads, model has " + std::to_string(spec.heads.size()));
    for (size_t s = 0; s < spec.heads.size(); ++s)
        if (targets.per_head[s] < 0 || targets.per_head[s] >= spec.heads[s].size)
            throw ShapeError("target " + std::to_string(targets.per_head[s]) +
                             " out of range for head '" + spec.heads[s].name + "' of size " +
                             std::to_string(spec.heads[s].size));
}

}  // namespace

double kl_delay_loss(const ForwardTrace& trace, const TargetLabels& targets, int t_frames,
                     int delay) {
    if (delay == 0) {
        std::cerr << "warning: delay window is empty (d = 0); the loss carries no signal\n";
        return 0.0;
    }
    if (trace.steps() < t_frames + delay)
        throw ShapeError("trace has " + std::to_string(trace.steps()) + " steps, need " +
                         std::to_string(t_frames + delay));
    double loss = 0.0;
    for (int t = t_frames; t < t_frames + delay; ++t) {
        const auto& step = trace.head_probs[t];
        for (size_t s = 0; s < targets.per_head.size(); ++s)
            loss -= std::log(step[s][static_cast<size_t>(targets.per_head[s])]);
    }
    return loss;
}

LossGrads loss_and_gradients(const Model& model, const std::vector<Tensor>& frames,
                             const TargetLabels& targets, int delay, const ForwardOptions& opts,
                             double loss_scale) {
    check_targets(targets, model.spec());

    LossGrads result;
    result.grads = model.zero_gradients();
    const int t_frames = static_cast<int>(frames.size());
    const int total = t_frames + delay;

    PassState pass = model.new_pass(true);
    SeededRng dropout_rng(opts.dropout_seed);
    StepCtx ctx{opts.training, opts.dropout_p, &dropout_rng, true};

    const Tensor black = model.black_frame();
    for (int t = 0; t < total; ++t)
        model.step_forward(t < t_frames ? frames[t] : black, pass, ctx);

    if (delay == 0) {
        std::cerr << "warning: delay window is empty (d = 0); gradients are zero\n";
        return result;
    }

    const size_t n_heads = model.spec().heads.size();
    const std::vector<std::vector<double>> empty_logits(n_heads);
    for (int t = total - 1; t >= 0; --t) {
        if (t >= t_frames) {
            // Softmax + KL against a one-hot target: dE/dlogits = o - o~.
            std::vector<std::vector<double>> d_logits(n_heads);
            for (size_t s = 0; s < n_heads; ++s) {
                d_logits[s] = pass.head_probs[t][s];
                d_logits[s][static_cast<size_t>(targets.per_head[s])] -= 1.0;
                for (double& v : d_logits[s]) v *= loss_scale;
            }
            for (size_t s = 0; s < n_heads; ++s)
                result.loss -= std::log(pass.head_probs[t][s][static_cast<size_t>(targets.per_head[s])]);
            model.step_backward(d_logits, pass, t, result.grads);
        } else {
            model.step_backward(empty_logits, pass, t, result.grads);
        }
    }
    result.loss *= loss_scale;

    if (!std::isfinite(result.loss)) throw NumericError("non-finite loss");
    if (auto bad = result.grads.find_non_finite())
        throw NumericError("non-finite gradient in " + *bad);
    return result;
}

double loss_only(const Model& model, const std::vector<Tensor>& frames, const TargetLabels& targets,
                 int delay, const ForwardOptions& opts) {
    check_targets(targets, model.spec());
    const ForwardTrace trace = model.forward_sequence(frames, delay, opts);
    return kl_delay_loss(trace, targets, static_cast<int>(frames.size()), delay);
}

namespace {

FdReport compare_subsample(Model& model, const std::vector<Tensor>& frames,
                           const TargetLabels& targets, int delay, const GradientBundle& analytic,
                           double h, int min_samples) {
    auto params = model.params();
    int64_t total = 0;
    for (const ParamRef& p : params) total += p.tensor->size();

    // Deterministic subsample: every tensor contributes proportionally, at
    // least one entry each.
    SeededRng rng(0xFDC0FFEE);
    FdReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& tensor = *params[pi].tensor;
        const int64_t sz = tensor.size();
        int64_t want = (min_samples * sz + total - 1) / total;
        want = std::max<int64_t>(1, std::min(want, sz));

        // Partial Fisher-Yates over the index range for distinct picks.
        std::vector<int64_t> idx(static_cast<size_t>(sz));
        for (int64_t i = 0; i < sz; ++i) idx[static_cast<size_t>(i)] = i;
        for (int64_t i = 0; i < want; ++i) {
            const int64_t j = i + rng.next_int(static_cast<int>(sz - i));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }

        for (int64_t i = 0; i < want; ++i) {
            const int64_t k = idx[static_cast<size_t>(i)];
            const double saved = tensor[k];
            tensor[k] = saved + h;
            const double plus = loss_only(model, frames, targets, delay);
            tensor[k] = saved - h;
            const double minus = loss_only(model, frames, targets, delay);
            tensor[k] = saved;

            const double numeric = (plus - minus) / (2.0 * h);
            const double g = analytic.tensors[pi][k];
            const double rel = std::abs(numeric - g) / std::max(std::abs(g), 1e-8);
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = params[pi].name;
                report.worst_index = k;
                report.analytic = g;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace

FdReport finite_difference_check(Model& model, const std::vector<Tensor>& frames,
                                 const TargetLabels& targets, int delay, double h,
                                 int min_samples) {
    const LossGrads lg = loss_and_gradients(model, frames, targets, delay);
    return compare_subsample(model, frames, targets, delay, lg.grads, h, min_samples);
}

FdReport finite_difference_compare(Model& model, const std::vector<Tensor>& frames,
                                   const TargetLabels& targets, int delay,
                                   const GradientBundle& analytic, double h, int min_samples) {
    return compare_subsample(model, frames, targets, delay, analytic, h, min_samples);
}

}  // namespace mstrnn
