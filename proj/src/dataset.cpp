#include "mstrnn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mstrnn/errors.hpp"
#include "mstrnn/rng.hpp"

namespace mstrnn {

using nlohmann::json;

std::vector<HeadSpec> Dataset::head_specs() const {
    std::vector<HeadSpec> out;
    for (const HeadCategories& h : heads)
        out.push_back({h.name, static_cast<int>(h.categories.size())});
    return out;
}

int Dataset::label_of(const VideoSample& s, const std::string& head) const {
    const auto it = s.labels.find(head);
    if (it == s.labels.end()) throw ConfigError("sample has no label for head '" + head + "'");
    return it->second;
}

// ---------------------------------------------------------------------------
// Rendering primitives

namespace {

struct Color {
    double r, g, b;
};

constexpr Color kAgentColor{1.0, 1.0, 1.0};
constexpr Color kObjectColors[synth::kNumObjects] = {
    {1.0, -1.0, -1.0},  // square: red
    {-1.0, 1.0, -1.0},  // diamond: green
    {-1.0, -1.0, 1.0},  // wedge: blue
    {1.0, 1.0, -1.0},   // cross: yellow
};

void put_pixel(Tensor& img, int x, int y, Color c, double brightness) {
    const int h = img.dim(1), w = img.dim(2);
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    // Colors live in [-1,1]; brightness pulls toward the -1 background.
    img(0, y, x) = -1.0 + (c.r + 1.0) * brightness;
    img(1, y, x) = -1.0 + (c.g + 1.0) * brightness;
    img(2, y, x) = -1.0 + (c.b + 1.0) * brightness;
}

void fill_rect(Tensor& img, int x0, int y0, int w, int h, Color c, double brightness) {
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) put_pixel(img, x, y, c, brightness);
}

// Glyph masks on an s x s grid.
bool glyph_mask(int object, int s, int dx, int dy) {
    const double cx = (s - 1) / 2.0, cy = (s - 1) / 2.0;
    switch (object) {
        case 0: return true;                                            // square
        case 1: return std::abs(dx - cx) + std::abs(dy - cy) <= s / 2.0;  // diamond
        case 2: return std::abs(dx - cx) <= (dy + 1) / 2.0;             // wedge (widens downward)
        case 3: return std::abs(dx - cx) <= 0.75 || std::abs(dy - cy) <= 0.75;  // cross
    }
    return false;
}

void draw_glyph(Tensor& img, int object, bool filled, int x0, int y0, int s, double brightness) {
    const Color c = kObjectColors[object];
    for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx) {
            if (!glyph_mask(object, s, dx, dy)) continue;
            if (!filled) {
                // Outline state: keep only cells bordering the outside.
                bool border = dx == 0 || dy == 0 || dx == s - 1 || dy == s - 1 ||
                              !glyph_mask(object, s, dx - 1, dy) ||
                              !glyph_mask(object, s, dx + 1, dy) ||
                              !glyph_mask(object, s, dx, dy - 1) ||
                              !glyph_mask(object, s, dx, dy + 1);
                if (!border) continue;
            }
            put_pixel(img, x0 + dx, y0 + dy, c, brightness);
        }
}

Tensor blank_frame(int h, int w) { return Tensor::full({3, h, w}, -1.0); }

/// Snaps to the 8-bit storage grid so generated pixels survive a save/load
/// round trip unchanged.
void quantize_frame(Tensor& img) {
    double* d = img.data();
    for (int64_t i = 0; i < img.size(); ++i) {
        const double q = std::clamp(std::round((d[i] + 1.0) * 127.5), 0.0, 255.0);
        d[i] = q / 127.5 - 1.0;
    }
}

int iround(double v) { return static_cast<int>(std::lround(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// Subject styles and shared tables

namespace synth {

const char* const kObjectNames[kNumObjects] = {"square", "diamond", "wedge", "cross"};
const char* const kLevel1ActionNames[kNumLevel1Actions] = {
    "reach_left", "reach_right", "reach_top", "reach_bottom", "circle_cw",
    "circle_ccw", "poke",        "push",      "hover"};
const char* const kLevel2ActionNames[kNumLevel2Actions] = {"touch", "push", "lift", "shake"};
const char* const kModifierNames[kNumModifiers] = {"once", "twice",  "thrice",
                                                   "slow", "medium", "fast"};
const char* const kPrimitiveNames[3] = {"bounce", "wave1", "wave2"};

SubjectStyle subject_style(uint64_t seed, int subject) {
    SeededRng rng(SeededRng::mix(seed, 1000 + static_cast<uint64_t>(subject)));
    SubjectStyle s;
    s.size_scale = rng.uniform(0.85, 1.30);
    s.speed_scale = rng.uniform(0.80, 1.25);
    s.amp_scale = rng.uniform(0.75, 1.30);
    s.brightness = rng.uniform(0.75, 1.00);
    s.gap_scale = rng.uniform(0.70, 1.30);
    return s;
}

const std::vector<std::pair<int, int>>& level1_pairs() {
    static const std::vector<std::pair<int, int>> pairs = {
        // square: reach_left, reach_right, poke, push
        {0, 0}, {0, 1}, {0, 6}, {0, 7},
        // diamond: reach_top, circle_cw, circle_ccw, hover
        {1, 2}, {1, 4}, {1, 5}, {1, 8},
        // wedge: reach_bottom, poke, hover
        {2, 3}, {2, 6}, {2, 8},
        // cross: reach_left, circle_cw, push, poke
        {3, 0}, {3, 4}, {3, 7}, {3, 6}};
    return pairs;
}

const std::vector<std::array<int, 3>>& level2_triplets() {
    static const std::vector<std::array<int, 3>> triplets = [] {
        std::vector<std::array<int, 3>> t;
        // touch and lift take repetition counts on every object; push and
        // shake take speeds; shake only applies to square and diamond.
        for (int obj = 0; obj < kNumObjects; ++obj)
            for (int m = 0; m < 3; ++m) t.push_back({obj, 0, m});  // touch x once/twice/thrice
        for (int obj = 0; obj < kNumObjects; ++obj)
            for (int m = 3; m < 6; ++m) t.push_back({obj, 1, m});  // push x speeds
        for (int obj = 0; obj < kNumObjects; ++obj)
            for (int m = 0; m < 3; ++m) t.push_back({obj, 2, m});  // lift x counts
        for (int obj = 0; obj < 2; ++obj)
            for (int m = 3; m < 6; ++m) t.push_back({obj, 3, m});  // shake x speeds
        return t;
    }();
    return triplets;
}

int expected_contacts(int action, int modifier) {
    if ((action == 0 || action == 2) && modifier < 3) return modifier + 1;
    return -1;
}

std::vector<std::pair<double, double>> level2_motion(int action, int modifier,
                                                     const SubjectStyle& style,
                                                     uint64_t jitter_seed, int total_frames) {
    SeededRng rng(jitter_seed);
    const int lead = total_frames / 3;
    const int win = total_frames - lead;

    // Approach axis: lift comes from below, everything else from the left.
    const double ax = action == 2 ? 0.0 : -1.0;
    const double ay = action == 2 ? 1.0 : 0.0;
    const double far = 9.0, rest = 4.0;

    std::vector<std::pair<double, double>> out(static_cast<size_t>(total_frames), {ax * rest, ay * rest});
    // Lead-in at a fixed pace shared by every modifier: the first third of a
    // video never identifies the modifier.
    for (int t = 0; t < lead; ++t) {
        const double f = far - (far - rest) * (t + 1.0) / lead;
        out[static_cast<size_t>(t)] = {ax * f, ay * f};
    }
    auto set_dist = [&](int t, double dist) {
        if (t >= lead && t < total_frames) out[static_cast<size_t>(t)] = {ax * dist, ay * dist};
    };

    if (action == 0 || action == 2) {
        // Repetition counts: k identical contact cycles spread over the window
        // with subject-dependent idle gaps.
        const int k = modifier + 1;
        const int cyc = action == 0 ? 6 : 8;
        const double segment = static_cast<double>(win) / k;
        for (int i = 0; i < k; ++i) {
            const double slack = std::max(0.0, segment - cyc);
            const double jitter = slack * 0.5 * style.gap_scale * (rng.next_double() - 0.5);
            int start = lead + iround(i * segment + slack * 0.5 + jitter);
            start = std::clamp(start, lead, total_frames - cyc);
            const int in_len = cyc / 2, out_len = cyc - cyc / 2;
            for (int u = 0; u < in_len; ++u)
                set_dist(start + u, rest * (1.0 - static_cast<double>(u + 1) / in_len));
            for (int u = 0; u < out_len; ++u)
                set_dist(start + in_len + u, rest * static_cast<double>(u + 1) / out_len);
        }
    } else if (action == 1) {
        // Push: reach contact quickly, stay glued for a speed-dependent
        // duration (the object translates meanwhile), then retreat.
        const int durations[3] = {17, 11, 6};
        int dur = durations[modifier - 3] + rng.next_int(3) - 1;
        dur = std::min(dur, win - 5);
        for (int u = 0; u < 3; ++u) set_dist(lead + u, rest * (1.0 - (u + 1) / 3.0));
        for (int u = 0; u < dur; ++u) set_dist(lead + 3 + u, 0.0);
        for (int u = 0; u < 2; ++u) set_dist(lead + 3 + dur + u, rest * (u + 1) / 2.0);
    } else {
        // Shake: reach contact, stay glued through the window (the pair
        // oscillates at a speed-dependent period).
        for (int u = 0; u < 3; ++u) set_dist(lead + u, rest * (1.0 - (u + 1) / 3.0));
        for (int t = lead + 3; t < total_frames; ++t) set_dist(t, 0.0);
    }
    return out;
}

int count_contacts(const std::vector<std::pair<double, double>>& motion) {
    int events = 0;
    bool touching = false;
    for (const auto& [dx, dy] : motion) {
        const bool now = std::hypot(dx, dy) < 0.5;
        if (now && !touching) ++events;
        touching = now;
    }
    return events;
}

}  // namespace synth

// ---------------------------------------------------------------------------
// concat3

namespace {

using synth::SubjectStyle;

void render_concat3_frame(Tensor& img, int primitive, double phase, const SubjectStyle& style) {
    const int h = img.dim(1), w = img.dim(2);
    const int body_w = std::max(3, iround(4 * style.size_scale));
    const int body_h = std::max(5, iround(7 * style.size_scale));
    const int ground = h - 2;
    const int cx = w / 2 - body_w / 2;
    const double amp = 4.0 * style.amp_scale;

    int body_bottom = ground;
    if (primitive == 0) body_bottom = ground - iround(amp * std::abs(std::sin(M_PI * phase)));
    const int body_top = body_bottom - body_h;
    fill_rect(img, cx, body_top, body_w, body_h, kAgentColor, style.brightness);

    const double wave = 0.5 * (1.0 + std::sin(2.0 * M_PI * phase));
    if (primitive == 1 || primitive == 2) {
        const int arm_y = body_top + 1 - iround(amp * wave);
        fill_rect(img, cx + body_w + 1, arm_y, 2, 2, kAgentColor, style.brightness);
        if (primitive == 2)
            fill_rect(img, cx - 3, arm_y, 2, 2, kAgentColor, style.brightness);
    }
}

}  // namespace

Dataset generate_concat3(const SynthSpec& spec) {
    Dataset ds;
    ds.task = "concat3";
    ds.height = spec.height;
    ds.width = spec.width;

    HeadCategories action_head;
    action_head.name = "action";
    for (int c = 0; c < 27; ++c) {
        const int p0 = c / 9, p1 = (c / 3) % 3, p2 = c % 3;
        action_head.categories.push_back(std::string(synth::kPrimitiveNames[p0]) + "-" +
                                         synth::kPrimitiveNames[p1] + "-" +
                                         synth::kPrimitiveNames[p2]);
    }
    ds.heads.push_back(std::move(action_head));

    const int fpp = spec.frames_per_primitive;
    int index = 0;
    for (int subj = 0; subj < spec.subjects; ++subj) {
        const SubjectStyle style = synth::subject_style(spec.seed, subj);
        for (int cat = 0; cat < 27; ++cat, ++index) {
            SeededRng rng(SeededRng::mix(spec.seed, 7000 + static_cast<uint64_t>(index)));
            const double phase0 = rng.uniform(0.0, 0.25);

            VideoSample sample;
            sample.subject = subj;
            sample.labels["action"] = cat;
            char dir[32];
            std::snprintf(dir, sizeof dir, "sample_%04d", index);
            sample.dir = dir;

            const int prims[3] = {cat / 9, (cat / 3) % 3, cat % 3};
            for (int t = 0; t < 3 * fpp; ++t) {
                Tensor img = blank_frame(spec.height, spec.width);
                const double phase = phase0 + style.speed_scale * (t % fpp) / fpp;
                render_concat3_frame(img, prims[t / fpp], phase, style);
                quantize_frame(img);
                sample.frames.push_back(std::move(img));
            }
            ds.samples.push_back(std::move(sample));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// level1

namespace {

struct ScenePositions {
    double ado_x, ado_y;
    double dis_x, dis_y;
    double start_x, start_y;
};

ScenePositions pick_positions(SeededRng& rng, int h, int w) {
    const double anchors[4][2] = {{w * 0.30, h * 0.30},
                                  {w * 0.70, h * 0.30},
                                  {w * 0.30, h * 0.70},
                                  {w * 0.70, h * 0.70}};
    const int a = rng.next_int(4);
    int b = rng.next_int(3);
    if (b >= a) ++b;
    ScenePositions p;
    p.ado_x = anchors[a][0] + rng.uniform(-1.5, 1.5);
    p.ado_y = anchors[a][1] + rng.uniform(-1.5, 1.5);
    p.dis_x = anchors[b][0] + rng.uniform(-1.5, 1.5);
    p.dis_y = anchors[b][1] + rng.uniform(-1.5, 1.5);
    p.start_x = 2.0;
    p.start_y = h - 3.0;
    return p;
}

double lerp(double a, double b, double f) { return a + (b - a) * f; }

/// Agent (and, for push, object) trajectory of a level-1 video.
void level1_motion(int action, const ScenePositions& p, const SubjectStyle& style, int total,
                   std::vector<std::pair<double, double>>& agent,
                   std::vector<std::pair<double, double>>& object_shift) {
    agent.resize(static_cast<size_t>(total));
    object_shift.assign(static_cast<size_t>(total), {0.0, 0.0});
    const double gap = 4.0;

    double sx = 0.0, sy = 0.0;  // staging offset from the target object
    switch (action) {
        case 0: sx = -gap; break;
        case 1: sx = gap; break;
        case 2: sy = -gap; break;
        case 3: sy = gap; break;
        case 4:
        case 5: sx = -gap; break;  // circles start west
        case 6: sx = -gap; break;
        case 7: sx = -gap; break;
        case 8: sy = -gap; break;  // hover stages above
    }
    const double tx = p.ado_x + sx, ty = p.ado_y + sy;
    const int reach = iround(total * 0.4);

    for (int t = 0; t < total; ++t) {
        const double ft = static_cast<double>(t);
        double x, y;
        if (t < reach) {
            const double f = (ft + 1.0) / reach;
            x = lerp(p.start_x, tx, f);
            y = lerp(p.start_y, ty, f);
        } else {
            x = tx;
            y = ty;
            const double u = (ft - reach) * style.speed_scale;
            switch (action) {
                case 4:
                case 5: {
                    const double dir = action == 4 ? 1.0 : -1.0;
                    const double ang = M_PI + dir * 2.0 * M_PI * u / (total - reach) * 1.25;
                    x = p.ado_x + gap * std::cos(ang);
                    y = p.ado_y + gap * std::sin(ang);
                    break;
                }
                case 6: {  // poke: in, touch, out
                    const int in_end = reach + iround(total * 0.15);
                    const int out_end = in_end + iround(total * 0.15);
                    if (t < in_end)
                        x = lerp(tx, p.ado_x, (ft - reach + 1) / (in_end - reach));
                    else if (t < out_end)
                        x = lerp(p.ado_x, tx, (ft - in_end + 1) / (out_end - in_end));
                    break;
                }
                case 7: {  // push: contact then shove east
                    const int in_end = reach + iround(total * 0.1);
                    const int push_end = in_end + iround(total * 0.3);
                    const double shove = 5.0;
                    if (t < in_end) {
                        x = lerp(tx, p.ado_x, (ft - reach + 1) / (in_end - reach));
                    } else if (t < push_end) {
                        const double f = (ft - in_end + 1) / (push_end - in_end);
                        x = p.ado_x + f * shove;
                        object_shift[static_cast<size_t>(t)] = {f * shove, 0.0};
                    } else {
                        x = p.ado_x + shove;
                        object_shift[static_cast<size_t>(t)] = {shove, 0.0};
                    }
                    break;
                }
                case 8:  // hover: bob above the object
                    y = ty + 1.5 * std::sin(2.0 * M_PI * u / 6.0);
                    break;
                default: break;  // reach_*: hold the staging point
            }
        }
        agent[static_cast<size_t>(t)] = {x, y};
    }
    // push keeps the shift after release
    if (action == 7)
        for (int t = 1; t < total; ++t)
            if (object_shift[static_cast<size_t>(t)].first <
                object_shift[static_cast<size_t>(t - 1)].first)
                object_shift[static_cast<size_t>(t)] = object_shift[static_cast<size_t>(t - 1)];
}

void render_scene(Tensor& img, int ado, int distractor, bool dis_filled,
                  const ScenePositions& p, std::pair<double, double> object_shift,
                  std::pair<double, double> agent, const SubjectStyle& style) {
    const int s = std::max(4, iround(5 * style.size_scale));
    draw_glyph(img, ado, true, iround(p.ado_x + object_shift.first) - s / 2,
               iround(p.ado_y + object_shift.second) - s / 2, s, style.brightness);
    draw_glyph(img, distractor, dis_filled, iround(p.dis_x) - s / 2, iround(p.dis_y) - s / 2, s,
               style.brightness);
    fill_rect(img, iround(agent.first) - 1, iround(agent.second) - 1, 3, 3, kAgentColor,
              style.brightness);
}

}  // namespace

Dataset generate_level1(const SynthSpec& spec) {
    Dataset ds;
    ds.task = "level1";
    ds.height = spec.height;
    ds.width = spec.width;

    HeadCategories obj_head{"object", {}};
    for (const char* n : synth::kObjectNames) obj_head.categories.push_back(n);
    HeadCategories act_head{"action", {}};
    for (const char* n : synth::kLevel1ActionNames) act_head.categories.push_back(n);
    ds.heads.push_back(std::move(obj_head));
    ds.heads.push_back(std::move(act_head));

    const int repeats = spec.repeats > 0 ? spec.repeats : 6;
    const auto& pairs = synth::level1_pairs();
    int index = 0;
    for (int subj = 0; subj < spec.subjects; ++subj) {
        const SubjectStyle style = synth::subject_style(spec.seed, subj);
        for (size_t pi = 0; pi < pairs.size(); ++pi) {
            const auto [obj, act] = pairs[pi];
            for (int rep = 0; rep < repeats; ++rep, ++index) {
                SeededRng rng(SeededRng::mix(spec.seed, 30000 + static_cast<uint64_t>(index)));
                const ScenePositions pos = pick_positions(rng, spec.height, spec.width);
                // 3 possible distractors x 2 states cycle through the repeats.
                int dis = rng.next_int(synth::kNumObjects - 1);
                if (repeats >= 6) dis = (rep / 2) % 3;
                if (dis >= obj) ++dis;
                const bool dis_filled = rep % 2 == 0;

                std::vector<std::pair<double, double>> agent, shift;
                level1_motion(act, pos, style, spec.total_frames, agent, shift);

                VideoSample sample;
                sample.subject = subj;
                sample.labels["object"] = obj;
                sample.labels["action"] = act;
                char dir[32];
                std::snprintf(dir, sizeof dir, "sample_%04d", index);
                sample.dir = dir;
                for (int t = 0; t < spec.total_frames; ++t) {
                    Tensor img = blank_frame(spec.height, spec.width);
                    render_scene(img, obj, dis, dis_filled, pos, shift[static_cast<size_t>(t)],
                                 agent[static_cast<size_t>(t)], style);
                    quantize_frame(img);
                    sample.frames.push_back(std::move(img));
                }
                ds.samples.push_back(std::move(sample));
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// level2

Dataset generate_level2(const SynthSpec& spec) {
    Dataset ds;
    ds.task = "level2";
    ds.height = spec.height;
    ds.width = spec.width;

    HeadCategories obj_head{"object", {}};
    for (const char* n : synth::kObjectNames) obj_head.categories.push_back(n);
    HeadCategories act_head{"action", {}};
    for (const char* n : synth::kLevel2ActionNames) act_head.categories.push_back(n);
    HeadCategories mod_head{"modifier", {}};
    for (const char* n : synth::kModifierNames) mod_head.categories.push_back(n);
    ds.heads.push_back(std::move(obj_head));
    ds.heads.push_back(std::move(act_head));
    ds.heads.push_back(std::move(mod_head));

    const int repeats = spec.repeats > 0 ? spec.repeats : 2;
    const auto& triplets = synth::level2_triplets();
    int index = 0;
    for (int subj = 0; subj < spec.subjects; ++subj) {
        const SubjectStyle style = synth::subject_style(spec.seed, subj);
        for (size_t ti = 0; ti < triplets.size(); ++ti) {
            const auto [obj, act, mod] = triplets[ti];
            for (int rep = 0; rep < repeats; ++rep, ++index) {
                const uint64_t sample_seed =
                    SeededRng::mix(spec.seed, 60000 + static_cast<uint64_t>(index));
                SeededRng rng(sample_seed);
                ScenePositions pos = pick_positions(rng, spec.height, spec.width);
                // Keep room for the approach: lift comes from below, the rest
                // from the left.
                if (act == 2)
                    pos.ado_y = std::min(pos.ado_y, spec.height * 0.45);
                else
                    pos.ado_x = std::max(pos.ado_x, spec.width * 0.45);
                int dis = rng.next_int(synth::kNumObjects - 1);
                if (dis >= obj) ++dis;
                const bool dis_filled = rep % 2 == 0;

                const auto motion = synth::level2_motion(act, mod, style,
                                                         SeededRng::mix(sample_seed, 17),
                                                         spec.total_frames);

                VideoSample sample;
                sample.subject = subj;
                sample.labels["object"] = obj;
                sample.labels["action"] = act;
                sample.labels["modifier"] = mod;
                char dir[32];
                std::snprintf(dir, sizeof dir, "sample_%04d", index);
                sample.dir = dir;

                const int lead = spec.total_frames / 3;
                for (int t = 0; t < spec.total_frames; ++t) {
                    Tensor img = blank_frame(spec.height, spec.width);
                    std::pair<double, double> shift{0.0, 0.0};
                    const auto [mx, my] = motion[static_cast<size_t>(t)];
                    if (act == 1 && t >= lead) {
                        // Push: once contact starts, the pair slides east at a
                        // speed set by the modifier.
                        const int durations[3] = {17, 11, 6};
                        const int dur = durations[mod - 3];
                        const int moved = std::clamp(t - (lead + 3), 0, dur);
                        shift.first = 5.0 * moved / dur;
                    } else if (act == 2) {
                        // Lift: the object rises with the agent while touching.
                        if (std::hypot(mx, my) < 0.5) shift.second = -2.0;
                    } else if (act == 3 && t >= lead + 3) {
                        const double periods[3] = {10.0, 6.0, 4.0};
                        const double period = periods[mod - 3] / style.speed_scale;
                        shift.first = 1.5 * std::sin(2.0 * M_PI * (t - lead - 3) / period);
                    }
                    // Agent sits at object position + contact offset + motion.
                    const std::pair<double, double> agent{
                        pos.ado_x + shift.first + mx + (act == 2 ? 0.0 : -2.0),
                        pos.ado_y + shift.second + my + (act == 2 ? 2.0 : 0.0)};
                    render_scene(img, obj, dis, dis_filled, pos, shift, agent, style);
                    quantize_frame(img);
                    sample.frames.push_back(std::move(img));
                }
                ds.samples.push_back(std::move(sample));
            }
        }
    }
    return ds;
}

Dataset generate(const SynthSpec& spec) {
    if (spec.task == "concat3") return generate_concat3(spec);
    if (spec.task == "level1") return generate_level1(spec);
    if (spec.task == "level2") return generate_level2(spec);
    throw ConfigError("unknown synth task '" + spec.task +
                      "' (expected concat3, level1 or level2)");
}

SynthSpec synth_spec_from_json(const json& j) {
    static const std::vector<std::string> known = {"task",         "height",
                                                   "width",        "frames_per_primitive",
                                                   "total_frames", "subjects",
                                                   "repeats",      "seed"};
    for (const auto& [key, value] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown key '" + key + "' in synth spec");
    SynthSpec s;
    s.task = j.value("task", s.task);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.frames_per_primitive = j.value("frames_per_primitive", s.frames_per_primitive);
    s.total_frames = j.value("total_frames", s.total_frames);
    s.subjects = j.value("subjects", s.subjects);
    s.repeats = j.value("repeats", s.repeats);
    s.seed = j.value("seed", s.seed);
    if (s.subjects < 1) throw ConfigError("synth spec: subjects must be >= 1");
    if (s.height < 12 || s.width < 12) throw ConfigError("synth spec: frames must be >= 12x12");
    return s;
}

json synth_spec_to_json(const SynthSpec& s) {
    return json{{"task", s.task},
                {"height", s.height},
                {"width", s.width},
                {"frames_per_primitive", s.frames_per_primitive},
                {"total_frames", s.total_frames},
                {"subjects", s.subjects},
                {"repeats", s.repeats},
                {"seed", s.seed}};
}

// ---------------------------------------------------------------------------
// Disk format

namespace {

void write_ppm(const Tensor& frame, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write frame: " + path.string());
    const int h = frame.dim(1), w = frame.dim(2);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(std::round((frame(c, y, x) + 1.0) * 127.5), 0.0, 255.0);
                row[static_cast<size_t>(x) * 3 + c] = static_cast<unsigned char>(v);
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("short write: " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing frame file: " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
        throw IoError("corrupt PPM header: " + path.string());
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw IoError("truncated PPM data: " + path.string());
    Tensor frame({3, h, w});
    size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c, ++i) frame(c, y, x) = raw[i] / 127.5 - 1.0;
    return frame;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    json heads = json::array();
    for (const HeadCategories& h : dataset.heads)
        heads.push_back({{"name", h.name}, {"categories", h.categories}});
    json samples = json::array();
    for (const VideoSample& s : dataset.samples) {
        json labels = json::object();
        for (const auto& [head, idx] : s.labels) labels[head] = idx;
        samples.push_back({{"dir", s.dir},
                           {"subject", s.subject},
                           {"frames", static_cast<int>(s.frames.size())},
                           {"labels", labels}});
    }
    const json manifest{{"task", dataset.task},
                        {"height", dataset.height},
                        {"width", dataset.width},
                        {"heads", heads},
                        {"samples", samples}};
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot write manifest: " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";

    for (const VideoSample& s : dataset.samples) {
        const std::filesystem::path sdir = dir / s.dir;
        std::filesystem::create_directories(sdir);
        for (size_t t = 0; t < s.frames.size(); ++t) {
            char name[32];
            std::snprintf(name, sizeof name, "frame_%04d.ppm", static_cast<int>(t));
            write_ppm(s.frames[t], sdir / name);
        }
    }
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const std::filesystem::path mpath = dir / "manifest.json";
    std::ifstream mf(mpath);
    if (!mf) throw IoError("missing manifest: " + mpath.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw IoError("corrupt manifest " + mpath.string() + ": " + e.what());
    }

    Dataset ds;
    try {
        ds.task = manifest.at("task").get<std::string>();
        ds.height = manifest.at("height").get<int>();
        ds.width = manifest.at("width").get<int>();
        for (const json& hj : manifest.at("heads")) {
            HeadCategories h;
            h.name = hj.at("name").get<std::string>();
            h.categories = hj.at("categories").get<std::vector<std::string>>();
            ds.heads.push_back(std::move(h));
        }
        for (const json& sj : manifest.at("samples")) {
            VideoSample s;
            s.dir = sj.at("dir").get<std::string>();
            s.subject = sj.at("subject").get<int>();
            const int n_frames = sj.at("frames").get<int>();
            for (const auto& [head, idx] : sj.at("labels").items()) s.labels[head] = idx.get<int>();
            for (int t = 0; t < n_frames; ++t) {
                char name[32];
                std::snprintf(name, sizeof name, "frame_%04d.ppm", t);
                s.frames.push_back(read_ppm(dir / s.dir / name));
            }
            ds.samples.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw IoError("manifest " + mpath.string() + " missing fields: " + e.what());
    }
    return ds;
}

Tensor background_subtract(const Tensor& frame, const Tensor& background) {
    if (!frame.same_shape(background))
        throw ShapeError("background_subtract: frame " + frame.shape_str() + " vs background " +
                         background.shape_str());
    Tensor out = frame;
    const double* b = background.data();
    double* d = out.data();
    for (int64_t i = 0; i < out.size(); ++i) d[i] = std::abs(d[i] - b[i]) - 1.0;
    return out;
}

std::vector<Tensor> background_subtract(const std::vector<Tensor>& frames,
                                        const Tensor& background) {
    std::vector<Tensor> out;
    out.reserve(frames.size());
    for (const Tensor& f : frames) out.push_back(background_subtract(f, background));
    return out;
}

}  // namespace mstrnn
