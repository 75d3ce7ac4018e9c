#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mstrnn/layers.hpp"
#include "mstrnn/rng.hpp"
#include "mstrnn/tensor.hpp"

namespace mstrnn {

enum class StageKind { Conv, Pool, LeakyConv, Context, Lstm, Fc };

std::string stage_kind_name(StageKind kind);
StageKind stage_kind_from_name(const std::string& name);

/// Declarative description of one trunk stage. Kernel fields apply to the
/// stage kinds that own kernels; tau to the leaky kinds. Context layers
/// additionally carry the fixed-size 2x2 pooling->context kernel (pad
/// configurable for very small toy geometries) and, via z_pad, the pad of the
/// 2x2 kernel reading the previous layer's context maps.
struct StageSpec {
    StageKind kind = StageKind::Conv;
    int maps = 0;          // conv/leaky/context feature maps, fc width, lstm hidden
    int context_maps = 0;  // context units (Context only)
    int kh = 3, kw = 3;
    int stride = 1;
    int pad = 0;
    double tau = 1.0;
    int ctx_pad = 0;
    int z_pad = 0;
};

struct HeadSpec {
    std::string name;
    int size = 0;
};

struct ModelSpec {
    std::string kind = "custom";  // mstrnn | mstnn | lrcn | custom
    int input_maps = 3;
    int input_h = 24;
    int input_w = 24;
    std::vector<StageSpec> stages;
    std::vector<HeadSpec> heads;

    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
    /// FNV-1a over the canonical serialization; stored in checkpoints so a
    /// file can only be loaded into the architecture that wrote it.
    uint64_t digest() const;
};

/// Widths of the three presets. Defaults are the desk-scale configuration;
/// the baselines' widths are set so all three land within 5% of the MSTRNN
/// parameter count at desk scale.
struct PresetOptions {
    int conv1_maps = 8;
    int cl1_maps = 8, cl1_context = 8;
    int cl2_maps = 16, cl2_context = 16;
    int fc1 = 64, fc2 = 32;
    double tau1 = 2.0, tau2 = 100.0;
    int mstnn_l1_maps = 12, mstnn_l2_maps = 26;
    int mstnn_fc1 = 72, mstnn_fc2 = 32;
    int lrcn_c2_maps = 12, lrcn_c3_maps = 20;
    int lstm_hidden = 24;
    int lrcn_fc = 32;
};

/// Fig-2-style presets. Kernel-size regime is picked from the input extents:
/// large inputs (>= 96 px) use a 3x3 stride-3 first conv; clearly non-square
/// inputs use 3x5 kernels on the first conv and the first conv after the
/// first pooling; everything else is 3x3 stride 1. Context-unit kernels are
/// always 2x2 (in/out) with a 3x3 pad-1 recurrent kernel.
ModelSpec mstrnn_preset(int input_h, int input_w, std::vector<HeadSpec> heads,
                        const PresetOptions& opt = {});
ModelSpec mstnn_preset(int input_h, int input_w, std::vector<HeadSpec> heads,
                       const PresetOptions& opt = {});
ModelSpec lrcn_preset(int input_h, int input_w, std::vector<HeadSpec> heads,
                      const PresetOptions& opt = {});
ModelSpec build_preset(const std::string& kind, int input_h, int input_w,
                       std::vector<HeadSpec> heads, const PresetOptions& opt = {});

struct ParamRef {
    std::string name;  // e.g. "context2.k"
    Tensor* tensor = nullptr;
    bool is_bias = false;
};

struct GradientBundle {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    void zero();
    GradientBundle& add_scaled(const GradientBundle& other, double s);
    GradientBundle& scale(double s);
    /// Name of the first non-finite tensor, if any.
    std::optional<std::string> find_non_finite() const;
};

/// Activations and drives flowing between stages: the pooling (or plain
/// activation/vector) path plus, after a context layer, the context maps.
struct StageIO {
    Tensor pool;
    Tensor context;
};

struct StageIOShapes {
    std::vector<int> pool;
    std::vector<int> context;  // empty unless the producer has context units
};

struct StepCtx {
    bool training = false;
    double dropout_p = 0.0;
    SeededRng* dropout_rng = nullptr;
    bool keep_tape = false;
};

class StageState {
  public:
    virtual ~StageState() = default;
};

class Stage {
  public:
    Stage(std::string name, StageSpec spec) : name_(std::move(name)), spec_(std::move(spec)) {}
    virtual ~Stage() = default;

    const std::string& name() const { return name_; }
    const StageSpec& spec() const { return spec_; }

    /// Infers output shapes, allocates and seeds parameters. Throws BuildError
    /// on impossible geometry.
    virtual void build(const StageIOShapes& in, SeededRng& rng) = 0;
    virtual StageIOShapes out_shapes() const = 0;
    virtual void collect_params(std::vector<ParamRef>& out) = 0;
    virtual std::unique_ptr<StageState> new_state() const = 0;
    virtual StageIO forward_step(const StageIO& in, StageState& state, const StepCtx& ctx) const = 0;
    /// One reverse step; t indexes the taped forward steps. d_out members may
    /// be empty (no downstream gradient); returned members may be empty for
    /// absent inputs. grads are this stage's tensors in collect order.
    virtual StageIO backward_step(const StageIO& d_out, StageState& state, int t,
                                  const std::vector<Tensor*>& grads) const = 0;

  protected:
    std::string name_;
    StageSpec spec_;
};

struct ForwardOptions {
    bool training = false;
    double dropout_p = 0.0;
    uint64_t dropout_seed = 0;
    std::string record;  // stage name whose activations to capture ("" = off)
};

/// Head outputs per time step over the T input frames plus the d black
/// delay-response frames; optionally the flattened activations of one stage.
struct ForwardTrace {
    int t_frames = 0;
    int delay = 0;
    std::vector<std::vector<std::vector<double>>> head_probs;  // [T+d][head][category]
    std::vector<std::vector<double>> recorded;                 // [T+d][units]
    int steps() const { return t_frames + delay; }
};

/// A running pass: per-stage states/tapes plus the heads tape. One pass per
/// concurrent evaluation; the model itself stays const.
struct PassState {
    std::vector<std::unique_ptr<StageState>> stages;
    std::vector<Tensor> head_inputs;                           // per step (taped passes)
    std::vector<std::vector<std::vector<double>>> head_probs;  // per step
    bool keep_tape = false;
    int record_stage = -1;
    std::vector<std::vector<double>> recorded;
};

class Model {
  public:
    static Model build(const ModelSpec& spec, uint64_t seed);

    const ModelSpec& spec() const { return spec_; }
    std::vector<ParamRef> params();
    std::vector<std::string> stage_names() const;
    int64_t count_parameters() const;
    int head_input_size() const { return head_input_size_; }

    GradientBundle zero_gradients() const;

    /// Runs T frames then `delay` black frames (value -1 everywhere, the
    /// normalized black level) through freshly zeroed states.
    ForwardTrace forward_sequence(const std::vector<Tensor>& frames, int delay,
                                  const ForwardOptions& opts = {}) const;

    // Low-level pass control used by the objective/backprop module.
    PassState new_pass(bool keep_tape) const;
    std::vector<std::vector<double>> step_forward(const Tensor& frame, PassState& pass,
                                                  const StepCtx& ctx) const;
    /// d_logits: per head, dE/d(logits) at step t (empty vector = zero).
    void step_backward(const std::vector<std::vector<double>>& d_logits, PassState& pass, int t,
                       GradientBundle& grads) const;

    Tensor black_frame() const;
    const std::vector<std::unique_ptr<Stage>>& stages() const { return stages_; }

  private:
    Model() = default;

    ModelSpec spec_;
    std::vector<std::unique_ptr<Stage>> stages_;
    std::vector<Tensor> head_w_;
    std::vector<Tensor> head_b_;
    StageIOShapes trunk_out_shapes_;
    int head_input_size_ = 0;
    // offsets of each stage's tensors inside the flat parameter list
    std::vector<std::pair<int, int>> stage_param_spans_;  // (first, count)
    int head_param_first_ = 0;
};

/// Checkpoint format: magic "MSTR", u32 version, u64 spec digest, u32 tensor
/// count, then every parameter tensor in declared stage order (u32 rank, u32
/// extents, raw little-endian 64-bit floats). Round-trips bit-exactly.
void save_checkpoint(Model& model, const std::filesystem::path& path);
void load_checkpoint(Model& model, const std::filesystem::path& path);

}  // namespace mstrnn
