#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmotion/rng.hpp"
#include "cmotion/tensor.hpp"

namespace cmotion {

constexpr double kPi = 3.14159265358979323846;

// J joints: 0 root/pelvis, 1 left foot, 2 right foot, 3 left hand, 4 right hand.
struct SkeletonConfig {
    int64_t joints = 5;
    std::vector<std::string> names = {"root", "left_foot", "right_foot", "left_hand", "right_hand"};
    std::vector<int64_t> control_joints = {0, 1, 2};
    double diameter = 2.5;  // bound on any inter-joint distance, meters

    int64_t feature_dim() const { return 3 + 3 * (joints - 1) + 2; }

    void validate() const {
        if (joints < 2) tensor_error("SkeletonConfig: need at least 2 joints");
        std::vector<bool> seen(static_cast<size_t>(joints), false);
        for (int64_t j : control_joints) {
            if (j < 0 || j >= joints) tensor_error("SkeletonConfig: control joint out of range");
            if (seen[static_cast<size_t>(j)]) tensor_error("SkeletonConfig: duplicate control joint");
            seen[static_cast<size_t>(j)] = true;
        }
    }
};

struct MotionGlobal {
    int64_t frames = 0;
    int64_t joints = 0;
    double fps = 20.0;
    std::vector<double> pos;  // frames x joints x 3, row-major

    double& at(int64_t i, int64_t j, int64_t c) { return pos[static_cast<size_t>((i * joints + j) * 3 + c)]; }
    double at(int64_t i, int64_t j, int64_t c) const { return pos[static_cast<size_t>((i * joints + j) * 3 + c)]; }

    void validate(const SkeletonConfig& sk) const {
        if (frames < 2) tensor_error("MotionGlobal: need at least 2 frames");
        if (joints != sk.joints) tensor_error("MotionGlobal: joint count mismatch");
        for (double v : pos)
            if (!std::isfinite(v)) tensor_error("MotionGlobal: non-finite position");
        for (int64_t i = 0; i < frames; ++i)
            for (int64_t a = 0; a < joints; ++a)
                for (int64_t b = a + 1; b < joints; ++b) {
                    double d2 = 0;
                    for (int64_t c = 0; c < 3; ++c) {
                        double d = at(i, a, c) - at(i, b, c);
                        d2 += d * d;
                    }
                    if (d2 > sk.diameter * sk.diameter) tensor_error("MotionGlobal: inter-joint distance exceeds skeleton diameter");
                }
    }
};

// Per-frame channels: [vx, vz, root height, 3*(J-1) root-relative offsets,
// left/right foot contact]. Velocities are backward differences with frame 0
// duplicated from frame 1, which makes recover_global an exact inverse.
struct MotionFeatures {
    int64_t frames = 0;
    int64_t dim = 0;
    double fps = 20.0;
    std::vector<double> f;  // frames x dim

    double& at(int64_t i, int64_t c) { return f[static_cast<size_t>(i * dim + c)]; }
    double at(int64_t i, int64_t c) const { return f[static_cast<size_t>(i * dim + c)]; }
};

struct TextPrompt {
    uint16_t template_id = 0;
    std::vector<uint16_t> tokens;
    std::array<float, 3> params = {0.f, 0.f, 0.f};
};

enum class MotionTemplate : uint16_t { walk_line = 0, walk_circle = 1, raise_hands = 2, jump = 3, stand = 4 };
constexpr int kNumTemplates = 5;

// ---------------------------------------------------------------- vocabulary

inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::vector<std::string> v = {"walk", "line", "circle", "raise", "hands", "jump", "stand"};
        auto push_range = [&](const std::string& stem, int n, int start = 0) {
            for (int i = start; i < start + n; ++i) v.push_back(stem + "_" + std::to_string(i));
        };
        push_range("speed", 6);
        push_range("head", 8);
        push_range("radius", 4);
        v.push_back("cw");
        v.push_back("ccw");
        push_range("amp", 4);
        v.push_back("left");
        v.push_back("right");
        v.push_back("both");
        push_range("period", 2);
        push_range("height", 4);
        push_range("times", 3, 1);
        push_range("drift", 2);
        push_range("arm", 6);
        v.push_back("narrow");
        v.push_back("wide");
        v.push_back("near");
        v.push_back("far");
        return v;
    }();
    return vocab;
}

inline uint16_t token_id(const std::string& word) {
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == word) return static_cast<uint16_t>(i);
    tensor_error("vocabulary: unknown token '" + word + "'");
}

inline std::string prompt_text(const TextPrompt& p) {
    std::string s;
    for (size_t i = 0; i < p.tokens.size(); ++i) {
        if (i) s += " ";
        s += vocabulary()[p.tokens[i]];
    }
    return s;
}

inline std::vector<uint16_t> tokenize(const std::string& text) {
    std::vector<uint16_t> out;
    std::string word;
    for (char c : text) {
        if (c == ' ' || c == '\t') {
            if (!word.empty()) out.push_back(token_id(word));
            word.clear();
        } else {
            word += c;
        }
    }
    if (!word.empty()) out.push_back(token_id(word));
    return out;
}

// ---------------------------------------------------------------- templates

struct ParamRange {
    double lo, hi;
    int buckets;
};

inline const std::array<ParamRange, 3>& template_param_ranges(MotionTemplate t) {
    static const std::array<std::array<ParamRange, 3>, kNumTemplates> ranges = {{
        {{{0.5, 2.0, 6}, {0.0, 2.0 * kPi, 8}, {0.0, 0.0, 1}}},   // walk_line: speed, heading, unused
        {{{0.5, 2.0, 4}, {0.4, 1.2, 3}, {0.0, 1.0, 2}}},         // walk_circle: radius, speed, direction
        {{{0.3, 0.8, 4}, {0.0, 1.0, 3}, {1.0, 3.0, 2}}},         // raise_hands: amplitude, side, period
        {{{0.1, 0.5, 4}, {1.0, 3.0, 3}, {0.0, 0.5, 2}}},         // jump: height, count, drift speed
        {{{0.0, 1.0, 6}, {0.15, 0.35, 2}, {0.0, 0.3, 2}}},       // stand: arm height, stance width, arm forward
    }};
    return ranges[static_cast<size_t>(t)];
}

inline int param_bucket(double v, const ParamRange& r) {
    if (r.buckets <= 1 || r.hi <= r.lo) return 0;
    int b = static_cast<int>((v - r.lo) / (r.hi - r.lo) * r.buckets);
    return std::min(std::max(b, 0), r.buckets - 1);
}

inline std::vector<uint16_t> prompt_tokens(MotionTemplate t, const std::array<double, 3>& p) {
    const auto& r = template_param_ranges(t);
    auto tid = [](const std::string& w) { return token_id(w); };
    std::vector<uint16_t> tok;
    switch (t) {
        case MotionTemplate::walk_line:
            tok = {tid("walk"), tid("line"), tid("speed_" + std::to_string(param_bucket(p[0], r[0]))),
                   tid("head_" + std::to_string(param_bucket(p[1], r[1])))};
            break;
        case MotionTemplate::walk_circle:
            tok = {tid("walk"), tid("circle"), tid("radius_" + std::to_string(param_bucket(p[0], r[0]))),
                   tid("speed_" + std::to_string(param_bucket(p[1], r[1]))), p[2] < 0.5 ? tid("cw") : tid("ccw")};
            break;
        case MotionTemplate::raise_hands: {
            const char* side = p[1] < 1.0 / 3 ? "left" : (p[1] < 2.0 / 3 ? "right" : "both");
            tok = {tid("raise"), tid("hands"), tid("amp_" + std::to_string(param_bucket(p[0], r[0]))), tid(side),
                   tid("period_" + std::to_string(param_bucket(p[2], r[2])))};
            break;
        }
        case MotionTemplate::jump: {
            int times = 1 + param_bucket(p[1], r[1]);  // same binning the generator uses
            tok = {tid("jump"), tid("height_" + std::to_string(param_bucket(p[0], r[0]))),
                   tid("times_" + std::to_string(times)), tid("drift_" + std::to_string(param_bucket(p[2], r[2])))};
            break;
        }
        case MotionTemplate::stand:
            tok = {tid("stand"), tid("arm_" + std::to_string(param_bucket(p[0], r[0]))),
                   p[1] < 0.25 ? tid("narrow") : tid("wide"), p[2] < 0.15 ? tid("near") : tid("far")};
            break;
    }
    return tok;
}

namespace detail {

struct BodyPose {
    // fills one frame given root xz, root height, heading unit vector,
    // swing phase and per-limb vertical offsets
    static void place(MotionGlobal& m, int64_t i, double rx, double rz, double ry, double ux, double uz,
                      double gait_phase, double foot_lift, double hand_swing, double stance = 0.10,
                      double hand_y_l = 0.70, double hand_y_r = 0.70, double hand_fwd = 0.0) {
        double wx = -uz, wz = ux;  // lateral unit vector
        m.at(i, 0, 0) = rx;
        m.at(i, 0, 1) = ry;
        m.at(i, 0, 2) = rz;
        double sL = std::sin(gait_phase), sR = std::sin(gait_phase + kPi);
        // feet
        m.at(i, 1, 0) = rx + wx * stance + ux * 0.25 * sL;
        m.at(i, 1, 1) = 0.02 + foot_lift * std::max(0.0, sL);
        m.at(i, 1, 2) = rz + wz * stance + uz * 0.25 * sL;
        m.at(i, 2, 0) = rx - wx * stance + ux * 0.25 * sR;
        m.at(i, 2, 1) = 0.02 + foot_lift * std::max(0.0, sR);
        m.at(i, 2, 2) = rz - wz * stance + uz * 0.25 * sR;
        // hands swing opposite to the same-side foot
        m.at(i, 3, 0) = rx + wx * 0.25 + ux * (hand_swing * sR + hand_fwd);
        m.at(i, 3, 1) = hand_y_l;
        m.at(i, 3, 2) = rz + wz * 0.25 + uz * (hand_swing * sR + hand_fwd);
        m.at(i, 4, 0) = rx - wx * 0.25 + ux * (hand_swing * sL + hand_fwd);
        m.at(i, 4, 1) = hand_y_r;
        m.at(i, 4, 2) = rz - wz * 0.25 + uz * (hand_swing * sL + hand_fwd);
    }
};

}  // namespace detail

// Deterministic procedural clip for one template. Noise is a per-coordinate
// low-frequency sinusoid with amplitude <= noise_scale, so every geometric
// property of the clean template holds to within noise_scale.
inline std::pair<MotionGlobal, TextPrompt> generate_motion(MotionTemplate tmpl, const std::array<double, 3>& params,
                                                           int64_t N, uint64_t seed, double noise_scale = 0.01) {
    if (N < 16 || N > 64) tensor_error("generate_motion: N must be in [16, 64]");
    const auto& ranges = template_param_ranges(tmpl);
    for (int k = 0; k < 3; ++k)
        if (params[static_cast<size_t>(k)] < ranges[static_cast<size_t>(k)].lo - 1e-12 ||
            params[static_cast<size_t>(k)] > ranges[static_cast<size_t>(k)].hi + 1e-12)
            tensor_error("generate_motion: param " + std::to_string(k) + " = " + std::to_string(params[static_cast<size_t>(k)]) +
                         " outside declared range");

    MotionGlobal m;
    m.frames = N;
    m.joints = 5;
    m.fps = 20.0;
    m.pos.assign(static_cast<size_t>(N * 5 * 3), 0.0);
    double dt = 1.0 / m.fps;

    using BP = detail::BodyPose;
    switch (tmpl) {
        case MotionTemplate::walk_line: {
            double v = params[0], heading = params[1];
            double ux = std::cos(heading), uz = std::sin(heading);
            double f = 1.4 + 0.4 * v;
            for (int64_t i = 0; i < N; ++i) {
                double tt = static_cast<double>(i) * dt;
                double ph = 2.0 * kPi * f * tt;
                BP::place(m, i, ux * v * tt, uz * v * tt, 0.90 + 0.02 * std::sin(2.0 * ph), ux, uz, ph, 0.10, 0.15);
            }
            break;
        }
        case MotionTemplate::walk_circle: {
            double r = params[0], v = params[1];
            double d = params[2] < 0.5 ? -1.0 : 1.0;
            double a = v / r;
            double f = 1.4 + 0.4 * v;
            for (int64_t i = 0; i < N; ++i) {
                double tt = static_cast<double>(i) * dt;
                double ang = a * tt;
                double rx = r * std::sin(ang), rz = d * r * (1.0 - std::cos(ang));
                double ux = std::cos(ang), uz = d * std::sin(ang);
                double ph = 2.0 * kPi * f * tt;
                BP::place(m, i, rx, rz, 0.90 + 0.02 * std::sin(2.0 * ph), ux, uz, ph, 0.10, 0.15);
            }
            break;
        }
        case MotionTemplate::raise_hands: {
            double amp = params[0], side = params[1], period = params[2];
            for (int64_t i = 0; i < N; ++i) {
                double tt = static_cast<double>(i) * dt;
                double lift = amp * 0.5 * (1.0 - std::cos(2.0 * kPi * tt / period));
                double yl = 0.70 + (side < 1.0 / 3 || side >= 2.0 / 3 ? lift : 0.0);
                double yr = 0.70 + (side >= 1.0 / 3 ? lift : 0.0);
                BP::place(m, i, 0.0, 0.0, 0.90, 1.0, 0.0, 0.0, 0.0, 0.0, 0.10, yl, yr);
            }
            break;
        }
        case MotionTemplate::jump: {
            double h = params[0], drift = params[2];
            int jumps = 1 + param_bucket(params[1], ranges[1]);
            double cycle = static_cast<double>(N) / jumps;
            for (int64_t i = 0; i < N; ++i) {
                double tt = static_cast<double>(i) * dt;
                double u = std::fmod(static_cast<double>(i), cycle) / cycle;
                double ry = 0.90, air = 0.0;
                if (u < 0.2) {
                    ry = 0.90 - 0.05 * std::sin(kPi * u / 0.2);
                } else if (u < 0.6) {
                    double s = (u - 0.2) / 0.4;
                    air = 4.0 * h * s * (1.0 - s);
                    ry = 0.90 + air;
                }
                BP::place(m, i, drift * tt, 0.0, ry, 1.0, 0.0, 0.0, 0.0, 0.05, 0.10, 0.70 + 0.3 * air,
                          0.70 + 0.3 * air);
                // feet track the root during flight
                m.at(i, 1, 1) = 0.02 + air;
                m.at(i, 2, 1) = 0.02 + air;
            }
            break;
        }
        case MotionTemplate::stand: {
            double arm = params[0], stance = params[1], fwd = params[2];
            for (int64_t i = 0; i < N; ++i)
                BP::place(m, i, 0.0, 0.0, 0.90, 1.0, 0.0, 0.0, 0.0, 0.0, stance / 2.0, 0.50 + 0.5 * arm,
                          0.50 + 0.5 * arm, fwd);
            break;
        }
    }

    if (noise_scale > 0.0) {
        Prng nrng = Prng::stream(seed, "generate", "noise", static_cast<uint64_t>(tmpl));
        for (int64_t j = 0; j < m.joints; ++j)
            for (int64_t c = 0; c < 3; ++c) {
                double amp = nrng.uniform(0.0, noise_scale);
                double phase = nrng.uniform(0.0, 2.0 * kPi);
                double freq = nrng.uniform(0.5, 2.0);
                for (int64_t i = 0; i < N; ++i)
                    m.at(i, j, c) += amp * std::sin(2.0 * kPi * freq * static_cast<double>(i) / static_cast<double>(N) + phase);
            }
    }

    // canonicalize: root xz starts at the origin
    double ox = m.at(0, 0, 0), oz = m.at(0, 0, 2);
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < m.joints; ++j) {
            m.at(i, j, 0) -= ox;
            m.at(i, j, 2) -= oz;
        }

    TextPrompt prompt;
    prompt.template_id = static_cast<uint16_t>(tmpl);
    prompt.tokens = prompt_tokens(tmpl, params);
    for (int k = 0; k < 3; ++k) prompt.params[static_cast<size_t>(k)] = static_cast<float>(params[static_cast<size_t>(k)]);
    return {std::move(m), std::move(prompt)};
}

// ---------------------------------------------------------------- representation

constexpr double kContactHeight = 0.05;
constexpr double kContactSpeed = 0.1;

inline MotionFeatures to_features(const MotionGlobal& m, const SkeletonConfig& sk) {
    if (m.frames < 2) tensor_error("to_features: need at least 2 frames");
    MotionFeatures out;
    out.frames = m.frames;
    out.dim = sk.feature_dim();
    out.fps = m.fps;
    out.f.assign(static_cast<size_t>(out.frames * out.dim), 0.0);
    int64_t J = sk.joints;
    for (int64_t i = 0; i < m.frames; ++i) {
        int64_t ip = std::max<int64_t>(i, 1);  // frame 0 duplicates frame 1's difference
        out.at(i, 0) = (m.at(ip, 0, 0) - m.at(ip - 1, 0, 0)) * m.fps;
        out.at(i, 1) = (m.at(ip, 0, 2) - m.at(ip - 1, 0, 2)) * m.fps;
        out.at(i, 2) = m.at(i, 0, 1);
        for (int64_t j = 1; j < J; ++j)
            for (int64_t c = 0; c < 3; ++c) out.at(i, 3 + (j - 1) * 3 + c) = m.at(i, j, c) - m.at(i, 0, c);
        for (int64_t foot = 0; foot < 2; ++foot) {
            int64_t j = 1 + foot;
            double dx = (m.at(ip, j, 0) - m.at(ip - 1, j, 0)) * m.fps;
            double dz = (m.at(ip, j, 2) - m.at(ip - 1, j, 2)) * m.fps;
            bool contact = m.at(i, j, 1) < kContactHeight && std::sqrt(dx * dx + dz * dz) < kContactSpeed;
            out.at(i, 3 + (J - 1) * 3 + foot) = contact ? 1.0 : 0.0;
        }
    }
    return out;
}

// R(.): integrate root velocity from the origin and add local offsets back.
// Exact inverse of to_features on generator output (root xz starts at origin).
inline MotionGlobal recover_global(const MotionFeatures& f, const SkeletonConfig& sk, double origin_x = 0.0,
                                   double origin_z = 0.0) {
    MotionGlobal m;
    m.frames = f.frames;
    m.joints = sk.joints;
    m.fps = f.fps;
    m.pos.assign(static_cast<size_t>(m.frames * m.joints * 3), 0.0);
    double px = origin_x, pz = origin_z;
    for (int64_t i = 0; i < f.frames; ++i) {
        if (i > 0) {
            px += f.at(i, 0) / f.fps;
            pz += f.at(i, 1) / f.fps;
        }
        m.at(i, 0, 0) = px;
        m.at(i, 0, 1) = f.at(i, 2);
        m.at(i, 0, 2) = pz;
        for (int64_t j = 1; j < sk.joints; ++j)
            for (int64_t c = 0; c < 3; ++c) m.at(i, j, c) = m.at(i, 0, c) + f.at(i, 3 + (j - 1) * 3 + c);
    }
    return m;
}

// Differentiable R(.) on a (B, N, D) feature tensor -> (B, N, J, 3) global
// positions; the gradient path used by the control loss.
template <typename T>
Tensor<T> recover_global_ad(const Tensor<T>& feats, const SkeletonConfig& sk, T fps) {
    const Shape& s = feats.shape();
    if (s.size() != 3 || s[2] != sk.feature_dim())
        tensor_error("recover_global_ad: expected (B,N," + std::to_string(sk.feature_dim()) + "), got " + shape_str(s));
    int64_t B = s[0], N = s[1], J = sk.joints;
    Tensor<T> v = slice(feats, 2, 0, 2);                         // (B,N,2)
    Tensor<T> h = slice(feats, 2, 2, 1);                         // (B,N,1)
    Tensor<T> offs = slice(feats, 2, 3, 3 * (J - 1));            // (B,N,3(J-1))
    Tensor<T> v_tail = slice(v, 1, 1, N - 1);                    // frame 0 velocity unused, as in the scalar path
    Tensor<T> steps = mul_scalar(v_tail, T(1) / fps);
    Tensor<T> xz_tail = cumsum(steps, 1);
    Tensor<T> xz = concat<T>({Tensor<T>::zeros({B, 1, 2}), xz_tail}, 1);  // (B,N,2), origin (0,0)
    Tensor<T> rx = slice(xz, 2, 0, 1);
    Tensor<T> rz = slice(xz, 2, 1, 1);
    Tensor<T> root = concat<T>({rx, h, rz}, 2);                           // (B,N,3)
    Tensor<T> root4 = reshape(root, {B, N, 1, 3});
    Tensor<T> offs4 = reshape(offs, {B, N, J - 1, 3});
    Tensor<T> rest = add(broadcast_to(root4, {B, N, J - 1, 3}), offs4);
    return concat<T>({root4, rest}, 2);  // (B,N,J,3)
}

}  // namespace cmotion
