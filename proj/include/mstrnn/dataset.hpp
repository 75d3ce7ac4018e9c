#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mstrnn/model.hpp"
#include "mstrnn/tensor.hpp"

namespace mstrnn {

/// One video: RGB frames in [-1, 1], one label per head, and the identity of
/// the subject that "performed" it (drives the LOSOCV folds).
struct VideoSample {
    std::vector<Tensor> frames;  // each 3 x H x W
    std::map<std::string, int> labels;
    int subject = 0;
    std::string dir;  // on-disk subdirectory name
};

struct HeadCategories {
    std::string name;
    std::vector<std::string> categories;
};

struct Dataset {
    std::string task;
    int height = 0, width = 0;
    std::vector<HeadCategories> heads;
    std::vector<VideoSample> samples;

    std::vector<HeadSpec> head_specs() const;
    int label_of(const VideoSample& s, const std::string& head) const;
};

/// Parameters of the synthetic compositional-action generators. Generation is
/// a pure function of this struct (the seed is part of it).
struct SynthSpec {
    std::string task = "concat3";  // concat3 | level1 | level2
    int height = 24, width = 24;
    int frames_per_primitive = 8;  // concat3: video length is 3x this
    int total_frames = 30;         // level1 / level2 video length
    int subjects = 6;
    int repeats = 0;  // videos per (subject, category); 0 = task default (6 / 2)
    uint64_t seed = 1;
};

/// Three sprite motion primitives (vertical bounce, one-sided oscillation,
/// two-sided oscillation) concatenated in every ordered triple: 27 categories,
/// one video per category per subject, single head "action".
Dataset generate_concat3(const SynthSpec& spec);

/// An agent sprite performs one of 9 motion patterns directed at one of 4
/// object glyphs while a distractor glyph (never the target) sits elsewhere in
/// the scene. 15 valid object-action pairs; heads "object" (4), "action" (9).
Dataset generate_level1(const SynthSpec& spec);

/// Object-action-modifier triplets (4 x 4 x 6, 42 valid) where the modifiers
/// (repetition counts and speeds) only show up in the temporal structure of
/// the execution window. Heads "object" (4), "action" (4), "modifier" (6).
Dataset generate_level2(const SynthSpec& spec);

Dataset generate(const SynthSpec& spec);

SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json synth_spec_to_json(const SynthSpec& spec);

/// On-disk layout: <dir>/manifest.json plus one subdirectory per sample
/// holding binary PPM (P6, 8-bit RGB) frames frame_0000.ppm, frame_0001.ppm,
/// ... Pixels map to [-1, 1] via v / 127.5 - 1. Saving is deterministic:
/// identical datasets produce identical bytes.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Foreground emphasis: per-pixel absolute difference against a background
/// frame, rescaled to [-1, 1] (a pixel equal to the background maps to -1).
std::vector<Tensor> background_subtract(const std::vector<Tensor>& frames,
                                        const Tensor& background);
Tensor background_subtract(const Tensor& frame, const Tensor& background);

// --- generator internals exposed for tests -------------------------------

namespace synth {

inline constexpr int kNumObjects = 4;
inline constexpr int kNumLevel1Actions = 9;
inline constexpr int kNumLevel2Actions = 4;
inline constexpr int kNumModifiers = 6;

extern const char* const kObjectNames[kNumObjects];
extern const char* const kLevel1ActionNames[kNumLevel1Actions];
extern const char* const kLevel2ActionNames[kNumLevel2Actions];
extern const char* const kModifierNames[kNumModifiers];
extern const char* const kPrimitiveNames[3];

/// Per-subject rendering style, a deterministic function of (seed, subject).
struct SubjectStyle {
    double size_scale = 1.0;
    double speed_scale = 1.0;
    double amp_scale = 1.0;
    double brightness = 1.0;
    double gap_scale = 1.0;  // idle spacing between repetition cycles
};
SubjectStyle subject_style(uint64_t seed, int subject);

/// Valid object-action pairs of the level-1 task (15 of 36).
const std::vector<std::pair<int, int>>& level1_pairs();

/// Valid (object, action, modifier) triplets of the level-2 task (42 of 96).
const std::vector<std::array<int, 3>>& level2_triplets();

/// Agent offset from its rest position (relative to the object) at every
/// frame of a level-2 video; offset (0, 0) means contact. The first third of
/// the frames is a modifier-independent lead-in.
std::vector<std::pair<double, double>> level2_motion(int action, int modifier,
                                                     const SubjectStyle& style,
                                                     uint64_t jitter_seed, int total_frames);

/// Number of contact events (offset reaching zero) in a motion trace.
int count_contacts(const std::vector<std::pair<double, double>>& motion);

/// Number of contacts a (action, modifier) combination must produce, or -1
/// when contact counting is not the category's signature.
int expected_contacts(int action, int modifier);

}  // namespace synth

}  // namespace mstrnn
