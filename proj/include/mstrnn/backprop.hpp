#pragma once

#include <map>
#include <string>
#include <vector>

#include "mstrnn/model.hpp"

namespace mstrnn {

/// Per-head correct category indices; expanded to one-hot targets inside the
/// loss. Head order follows the model spec.
struct TargetLabels {
    std::vector<int> per_head;
};

/// Delay-response KL objective: the sum over the d delay steps and all heads
/// of KL(one-hot target || head output). With one-hot targets this is the
/// negative log-likelihood of the correct category, which avoids 0*ln(0)
/// terms. Error is injected only during the delay window [T+1, T+d].
double kl_delay_loss(const ForwardTrace& trace, const TargetLabels& targets, int t_frames,
                     int delay);

struct LossGrads {
    double loss = 0.0;
    GradientBundle grads;
};

/// Full-unrolled reverse-mode gradients of the delay loss with respect to
/// every parameter; no truncation. loss_scale multiplies both the loss and
/// every gradient (used by linearity checks). Dropout, when enabled through
/// opts, uses masks reproducible from opts.dropout_seed so the same call is
/// bit-repeatable.
LossGrads loss_and_gradients(const Model& model, const std::vector<Tensor>& frames,
                             const TargetLabels& targets, int delay,
                             const ForwardOptions& opts = {}, double loss_scale = 1.0);

/// Forward-only loss evaluation (the probe the finite-difference check uses).
double loss_only(const Model& model, const std::vector<Tensor>& frames,
                 const TargetLabels& targets, int delay, const ForwardOptions& opts = {});

struct FdReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    int64_t worst_index = 0;
    double analytic = 0.0, numeric = 0.0;
    int checked = 0;
};

/// Central-difference verification of the analytic gradients on a
/// deterministic subsample of at least min_samples parameters spanning every
/// tensor. Relative error uses max(|analytic|, 1e-8) as denominator.
FdReport finite_difference_check(Model& model, const std::vector<Tensor>& frames,
                                 const TargetLabels& targets, int delay, double h = 1e-5,
                                 int min_samples = 200);

/// Same comparison against an externally supplied bundle, so tests can verify
/// that a corrupted gradient is caught.
FdReport finite_difference_compare(Model& model, const std::vector<Tensor>& frames,
                                   const TargetLabels& targets, int delay,
                                   const GradientBundle& analytic, double h = 1e-5,
                                   int min_samples = 200);

}  // namespace mstrnn
