#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cmotion/motion.hpp"
#include "cmotion/rng.hpp"
#include "cmotion/tensor.hpp"

namespace cmotion {

struct CorpusSample {
    std::vector<float> features;  // N x D, row-major
    std::vector<uint16_t> tokens;
    uint16_t template_id = 0;
    std::array<float, 3> params = {0.f, 0.f, 0.f};
};

struct DataConfig {
    int64_t frames = 64;
    double noise_scale = 0.01;
};

struct Corpus {
    int schema_version = 1;
    SkeletonConfig skeleton;
    int64_t frames = 64;
    double fps = 20.0;
    uint64_t seed = 0;
    double noise_scale = 0.01;
    std::vector<CorpusSample> samples;
    std::vector<int64_t> test_indices;

    bool is_test(int64_t i) const {
        for (int64_t t : test_indices)
            if (t == i) return true;
        return false;
    }
    std::vector<int64_t> train_indices() const {
        std::vector<bool> test(samples.size(), false);
        for (int64_t t : test_indices) test[static_cast<size_t>(t)] = true;
        std::vector<int64_t> out;
        for (size_t i = 0; i < samples.size(); ++i)
            if (!test[i]) out.push_back(static_cast<int64_t>(i));
        return out;
    }

    MotionFeatures sample_features(int64_t i) const {
        const auto& s = samples[static_cast<size_t>(i)];
        MotionFeatures f;
        f.frames = frames;
        f.dim = skeleton.feature_dim();
        f.fps = fps;
        f.f.assign(s.features.begin(), s.features.end());
        return f;
    }
};

// ---------------------------------------------------------------- generation

// Balanced over templates (index mod 5); every tenth block of 5 is test, so
// the 90/10 split is balanced too. Each sample draws from its own stream.
inline Corpus build_dataset(const DataConfig& cfg, int64_t n_samples, uint64_t seed) {
    if (n_samples < 100) tensor_error("build_dataset: need at least 100 samples");
    Corpus corpus;
    corpus.skeleton.validate();
    corpus.frames = cfg.frames;
    corpus.seed = seed;
    corpus.noise_scale = cfg.noise_scale;
    corpus.samples.reserve(static_cast<size_t>(n_samples));
    for (int64_t i = 0; i < n_samples; ++i) {
        auto tmpl = static_cast<MotionTemplate>(i % kNumTemplates);
        Prng prng = Prng::stream(seed, "data", "params", static_cast<uint64_t>(i));
        const auto& ranges = template_param_ranges(tmpl);
        std::array<double, 3> params{};
        for (int k = 0; k < 3; ++k) params[static_cast<size_t>(k)] = prng.uniform(ranges[static_cast<size_t>(k)].lo, ranges[static_cast<size_t>(k)].hi);
        uint64_t sample_seed = Prng::stream(seed, "data", "sample", static_cast<uint64_t>(i)).next_u64();
        auto [motion, prompt] = generate_motion(tmpl, params, cfg.frames, sample_seed, cfg.noise_scale);
        motion.validate(corpus.skeleton);
        MotionFeatures feats = to_features(motion, corpus.skeleton);
        CorpusSample s;
        s.features.assign(feats.f.begin(), feats.f.end());
        s.tokens = prompt.tokens;
        s.template_id = prompt.template_id;
        s.params = prompt.params;
        corpus.samples.push_back(std::move(s));
        if ((i / kNumTemplates) % 10 == 9) corpus.test_indices.push_back(i);
    }
    return corpus;
}

// ---------------------------------------------------------------- serialization

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::string& buf, uint16_t v) { buf.append(reinterpret_cast<const char*>(&v), 2); }
inline void put_f32(std::string& buf, float v) { buf.append(reinterpret_cast<const char*>(&v), 4); }

struct ByteReader {
    const char* p;
    const char* end;
    void need(size_t n, const char* what) const {
        if (static_cast<size_t>(end - p) < n) tensor_error(std::string("corpus: truncated while reading ") + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, p, 4);
        p += 4;
        return v;
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v;
        std::memcpy(&v, p, 2);
        p += 2;
        return v;
    }
    float f32(const char* what) {
        need(4, what);
        float v;
        std::memcpy(&v, p, 4);
        p += 4;
        return v;
    }
};

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// One binary record: N u32, D u32, N*D f32, token count u32, tokens u16,
// template id u16, 3 param f32. Little-endian throughout.
inline std::string encode_record(const CorpusSample& s, uint32_t n_frames, uint32_t dim) {
    if (s.features.size() != static_cast<size_t>(n_frames) * dim) tensor_error("encode_record: feature size mismatch");
    std::string buf;
    detail::put_u32(buf, n_frames);
    detail::put_u32(buf, dim);
    for (float v : s.features) detail::put_f32(buf, v);
    detail::put_u32(buf, static_cast<uint32_t>(s.tokens.size()));
    for (uint16_t t : s.tokens) detail::put_u16(buf, t);
    detail::put_u16(buf, s.template_id);
    for (float p : s.params) detail::put_f32(buf, p);
    return buf;
}

inline CorpusSample decode_record(detail::ByteReader& r, uint32_t expect_frames, uint32_t expect_dim) {
    CorpusSample s;
    uint32_t n = r.u32("frame count");
    uint32_t d = r.u32("feature dim");
    if (n != expect_frames || d != expect_dim) tensor_error("corpus: record shape disagrees with header");
    s.features.resize(static_cast<size_t>(n) * d);
    for (auto& v : s.features) v = r.f32("features");
    uint32_t tc = r.u32("token count");
    s.tokens.resize(tc);
    for (auto& t : s.tokens) t = r.u16("tokens");
    s.template_id = r.u16("template id");
    for (auto& p : s.params) p = r.f32("params");
    return s;
}

inline void save_corpus(const Corpus& c, const std::string& path) {
    std::ostringstream os;
    os << "cmotion-corpus " << c.schema_version << "\n";
    os << "J " << c.skeleton.joints << "\n";
    os << "D " << c.skeleton.feature_dim() << "\n";
    os << "fps " << detail::fmt_double(c.fps) << "\n";
    os << "N " << c.frames << "\n";
    os << "samples " << c.samples.size() << "\n";
    os << "seed " << c.seed << "\n";
    os << "noise " << detail::fmt_double(c.noise_scale) << "\n";
    os << "vocab";
    for (const auto& w : vocabulary()) os << " " << w;
    os << "\n";
    os << "test";
    for (int64_t t : c.test_indices) os << " " << t;
    os << "\n";
    os << "data\n";
    for (const auto& s : c.samples) os << encode_record(s, static_cast<uint32_t>(c.frames), static_cast<uint32_t>(c.skeleton.feature_dim()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) tensor_error("save_corpus: cannot open '" + path + "' for writing");
    const std::string blob = os.str();
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) tensor_error("save_corpus: write failed for '" + path + "'");
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) tensor_error("load_corpus: cannot open '" + path + "'");
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Corpus c;
    size_t pos = 0;
    int64_t n_samples = -1;
    auto next_line = [&]() {
        size_t e = blob.find('\n', pos);
        if (e == std::string::npos) tensor_error("load_corpus: header truncated in '" + path + "'");
        std::string line = blob.substr(pos, e - pos);
        pos = e + 1;
        return line;
    };
    for (;;) {
        std::istringstream ls(next_line());
        std::string key;
        ls >> key;
        if (key == "data") break;
        if (key == "cmotion-corpus") {
            ls >> c.schema_version;
            if (c.schema_version != 1) tensor_error("load_corpus: unsupported schema version in '" + path + "'");
        } else if (key == "J") {
            ls >> c.skeleton.joints;
        } else if (key == "D") {
            int64_t d;
            ls >> d;
            if (d != c.skeleton.feature_dim()) tensor_error("load_corpus: D inconsistent with J in '" + path + "'");
        } else if (key == "fps") {
            ls >> c.fps;
        } else if (key == "N") {
            ls >> c.frames;
        } else if (key == "samples") {
            ls >> n_samples;
        } else if (key == "seed") {
            ls >> c.seed;
        } else if (key == "noise") {
            ls >> c.noise_scale;
        } else if (key == "vocab") {
            std::string w;
            std::vector<std::string> words;
            while (ls >> w) words.push_back(w);
            if (words != vocabulary()) tensor_error("load_corpus: vocabulary mismatch in '" + path + "'");
        } else if (key == "test") {
            int64_t t;
            while (ls >> t) c.test_indices.push_back(t);
        } else {
            tensor_error("load_corpus: unknown header key '" + key + "' in '" + path + "'");
        }
    }
    if (n_samples < 0) tensor_error("load_corpus: missing sample count in '" + path + "'");

    detail::ByteReader r{blob.data() + pos, blob.data() + blob.size()};
    c.samples.reserve(static_cast<size_t>(n_samples));
    for (int64_t i = 0; i < n_samples; ++i)
        c.samples.push_back(decode_record(r, static_cast<uint32_t>(c.frames), static_cast<uint32_t>(c.skeleton.feature_dim())));
    if (r.p != r.end) tensor_error("load_corpus: trailing bytes in '" + path + "'");
    return c;
}

// (B, N, D) feature batch for the given sample indices.
template <typename T>
Tensor<T> features_batch(const Corpus& c, const std::vector<int64_t>& indices) {
    int64_t N = c.frames, D = c.skeleton.feature_dim();
    std::vector<T> data;
    data.reserve(indices.size() * static_cast<size_t>(N * D));
    for (int64_t i : indices) {
        const auto& s = c.samples[static_cast<size_t>(i)];
        for (float v : s.features) data.push_back(static_cast<T>(v));
    }
    return Tensor<T>::from_vector({static_cast<int64_t>(indices.size()), N, D}, std::move(data));
}

}  // namespace cmotion
