#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cmotion/corpus.hpp"
#include "cmotion/motion.hpp"

using namespace cmotion;

namespace {
SkeletonConfig sk;

double dist_xz(double x0, double z0, double x1, double z1) {
    return std::sqrt((x0 - x1) * (x0 - x1) + (z0 - z1) * (z0 - z1));
}
}  // namespace

TEST_CASE("stand with zero noise is stationary") {
    auto [m, p] = generate_motion(MotionTemplate::stand, {0.5, 0.2, 0.1}, 32, 1, 0.0);
    for (int64_t i = 1; i < m.frames; ++i)
        for (int64_t j = 0; j < m.joints; ++j)
            for (int64_t c = 0; c < 3; ++c) REQUIRE(m.at(i, j, c) == m.at(0, j, c));
    REQUIRE(m.at(0, 0, 0) == 0.0);
    REQUIRE(m.at(0, 0, 2) == 0.0);
}

TEST_CASE("walk_line displacement is speed * (N-1) / fps") {
    double v = 1.3;
    auto [m, p] = generate_motion(MotionTemplate::walk_line, {v, 0.7, 0.0}, 64, 2, 0.0);
    double d = dist_xz(m.at(63, 0, 0), m.at(63, 0, 2), m.at(0, 0, 0), m.at(0, 0, 2));
    REQUIRE(d == Catch::Approx(v * 63.0 / 20.0).epsilon(1e-9));
}

TEST_CASE("walk_circle roots stay on the circle") {
    double r = 1.2;
    double noise = 0.01;
    auto [m, p] = generate_motion(MotionTemplate::walk_circle, {r, 0.8, 0.9}, 64, 3, noise);
    // ccw circle through the origin has center (0, r); canonicalization and
    // noise each move a point by at most noise
    for (int64_t i = 0; i < m.frames; ++i) {
        double d = dist_xz(m.at(i, 0, 0), m.at(i, 0, 2), 0.0, r);
        REQUIRE(d >= r - 2 * noise - 1e-9);
        REQUIRE(d <= r + 2 * noise + 1e-9);
    }
}

TEST_CASE("generator rejects out-of-range params") {
    REQUIRE_THROWS_WITH(generate_motion(MotionTemplate::walk_line, {5.0, 0.0, 0.0}, 32, 1),
                        Catch::Matchers::ContainsSubstring("range"));
    REQUIRE_THROWS(generate_motion(MotionTemplate::walk_line, {1.0, 0.0, 0.0}, 8, 1));
}

TEST_CASE("generator is deterministic") {
    auto a = generate_motion(MotionTemplate::jump, {0.3, 2.0, 0.2}, 48, 99, 0.01);
    auto b = generate_motion(MotionTemplate::jump, {0.3, 2.0, 0.2}, 48, 99, 0.01);
    REQUIRE(a.first.pos == b.first.pos);
    REQUIRE(a.second.tokens == b.second.tokens);
}

TEST_CASE("to_features basics") {
    SECTION("stationary motion") {
        auto [m, p] = generate_motion(MotionTemplate::stand, {0.2, 0.2, 0.0}, 32, 1, 0.0);
        MotionFeatures f = to_features(m, sk);
        for (int64_t i = 0; i < f.frames; ++i) {
            REQUIRE(f.at(i, 0) == 0.0);
            REQUIRE(f.at(i, 1) == 0.0);
            for (int64_t c = 0; c < 12; ++c) REQUIRE(f.at(i, 3 + c) == f.at(0, 3 + c));
        }
    }
    SECTION("constant +x velocity shows up exactly") {
        MotionGlobal m;
        m.frames = 16;
        m.joints = 5;
        m.fps = 20.0;
        m.pos.assign(static_cast<size_t>(16 * 5 * 3), 0.0);
        for (int64_t i = 0; i < 16; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                m.at(i, j, 0) = static_cast<double>(i) / 20.0;
                m.at(i, j, 1) = j == 0 ? 0.9 : 0.02;
            }
        MotionFeatures f = to_features(m, sk);
        for (int64_t i = 0; i < 16; ++i) {
            REQUIRE(f.at(i, 0) == Catch::Approx(1.0).margin(1e-12));
            REQUIRE(f.at(i, 1) == Catch::Approx(0.0).margin(1e-12));
        }
    }
    SECTION("frame 3 of a walk clip matches an independent recomputation") {
        auto [m, p] = generate_motion(MotionTemplate::walk_line, {1.1, 0.3, 0.0}, 32, 7, 0.01);
        MotionFeatures f = to_features(m, sk);
        int64_t i = 3;
        REQUIRE(f.at(i, 0) == Catch::Approx((m.at(3, 0, 0) - m.at(2, 0, 0)) * 20.0).epsilon(1e-12));
        REQUIRE(f.at(i, 1) == Catch::Approx((m.at(3, 0, 2) - m.at(2, 0, 2)) * 20.0).epsilon(1e-12));
        REQUIRE(f.at(i, 2) == m.at(3, 0, 1));
        for (int64_t j = 1; j < 5; ++j)
            for (int64_t c = 0; c < 3; ++c)
                REQUIRE(f.at(i, 3 + (j - 1) * 3 + c) == Catch::Approx(m.at(3, j, c) - m.at(3, 0, c)).margin(1e-15));
        for (int foot = 0; foot < 2; ++foot) {
            double speed = dist_xz(m.at(3, 1 + foot, 0), m.at(3, 1 + foot, 2), m.at(2, 1 + foot, 0), m.at(2, 1 + foot, 2)) * 20.0;
            bool contact = m.at(3, 1 + foot, 1) < 0.05 && speed < 0.1;
            REQUIRE(f.at(i, 15 + foot) == (contact ? 1.0 : 0.0));
        }
    }
    SECTION("too-short motion rejected") {
        MotionGlobal m;
        m.frames = 1;
        m.joints = 5;
        m.pos.assign(15, 0.0);
        REQUIRE_THROWS(to_features(m, sk));
    }
}

TEST_CASE("recover_global basics") {
    SECTION("zero velocity and offsets give a fixed point at height h") {
        MotionFeatures f;
        f.frames = 8;
        f.dim = 17;
        f.fps = 20.0;
        f.f.assign(8 * 17, 0.0);
        for (int64_t i = 0; i < 8; ++i) f.at(i, 2) = 0.77;
        MotionGlobal m = recover_global(f, sk, 0.25, -0.5);
        for (int64_t i = 0; i < 8; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                REQUIRE(m.at(i, j, 0) == 0.25);
                REQUIRE(m.at(i, j, 1) == (j == 0 ? 0.77 : 0.77));
                REQUIRE(m.at(i, j, 2) == -0.5);
            }
    }
    SECTION("constant velocity integrates to origin + 1") {
        MotionFeatures f;
        f.frames = 21;
        f.dim = 17;
        f.fps = 20.0;
        f.f.assign(21 * 17, 0.0);
        for (int64_t i = 0; i < 21; ++i) f.at(i, 0) = 1.0;
        MotionGlobal m = recover_global(f, sk, 0.0, 0.0);
        REQUIRE(m.at(20, 0, 0) == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("R-roundtrip over 100 random generated motions") {
    Prng rng(404);
    for (int trial = 0; trial < 100; ++trial) {
        auto tmpl = static_cast<MotionTemplate>(rng.below(5));
        const auto& ranges = template_param_ranges(tmpl);
        std::array<double, 3> params{};
        for (int k = 0; k < 3; ++k) params[static_cast<size_t>(k)] = rng.uniform(ranges[static_cast<size_t>(k)].lo, ranges[static_cast<size_t>(k)].hi);
        auto [m, p] = generate_motion(tmpl, params, 16 + static_cast<int64_t>(rng.below(49)), rng.next_u64(), 0.01);
        MotionGlobal back = recover_global(to_features(m, sk), sk, 0.0, 0.0);
        double worst = 0.0;
        for (size_t i = 0; i < m.pos.size(); ++i) worst = std::max(worst, std::abs(m.pos[i] - back.pos[i]));
        REQUIRE(worst <= 1e-6);
    }
}

TEST_CASE("autodiff R matches the scalar R exactly") {
    auto [m, p] = generate_motion(MotionTemplate::walk_circle, {1.0, 0.8, 0.2}, 32, 5, 0.01);
    MotionFeatures f = to_features(m, sk);
    Tensor<double> ft = Tensor<double>::from_vector({1, f.frames, f.dim}, f.f);
    Tensor<double> rec = recover_global_ad(ft, sk, 20.0);
    REQUIRE(rec.shape() == Shape{1, f.frames, 5, 3});
    MotionGlobal scalar = recover_global(f, sk, 0.0, 0.0);
    for (size_t i = 0; i < scalar.pos.size(); ++i) REQUIRE(rec.data()[i] == Catch::Approx(scalar.pos[i]).margin(1e-14));
}

TEST_CASE("feature dim is a pure function of J") {
    SkeletonConfig s3;
    s3.joints = 3;
    s3.names = {"root", "a", "b"};
    s3.control_joints = {0};
    REQUIRE(s3.feature_dim() == 3 + 6 + 2);
    REQUIRE(sk.feature_dim() == 17);
}

TEST_CASE("dataset balance, split and determinism") {
    DataConfig cfg;
    Corpus c = build_dataset(cfg, 500, 42);
    REQUIRE(c.samples.size() == 500);
    std::array<int, 5> per_template{};
    for (const auto& s : c.samples) per_template[s.template_id]++;
    for (int n : per_template) REQUIRE(n == 100);
    REQUIRE(c.test_indices.size() == 50);
    REQUIRE(c.train_indices().size() == 450);
    // test split covers all templates equally
    std::array<int, 5> test_per_template{};
    for (int64_t t : c.test_indices) test_per_template[c.samples[static_cast<size_t>(t)].template_id]++;
    for (int n : test_per_template) REQUIRE(n == 10);

    auto tmp = std::filesystem::temp_directory_path();
    std::string f1 = (tmp / "corpus_a.bin").string();
    std::string f2 = (tmp / "corpus_b.bin").string();
    save_corpus(c, f1);
    save_corpus(build_dataset(cfg, 500, 42), f2);
    std::ifstream a(f1, std::ios::binary), b(f2, std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    REQUIRE(ba == bb);

    Corpus back = load_corpus(f1);
    REQUIRE(back.samples.size() == c.samples.size());
    REQUIRE(back.test_indices == c.test_indices);
    for (size_t i = 0; i < c.samples.size(); ++i) {
        REQUIRE(back.samples[i].features == c.samples[i].features);  // bit-exact
        REQUIRE(back.samples[i].tokens == c.samples[i].tokens);
    }
    std::filesystem::remove(f1);
    std::filesystem::remove(f2);
}

TEST_CASE("golden record encoding") {
    CorpusSample s;
    s.features = {1.5f, -2.0f};
    s.tokens = {3};
    s.template_id = 4;
    s.params = {0.5f, 0.25f, -1.0f};
    std::string got = encode_record(s, 1, 2);
    // hand-assembled little-endian bytes for the record above
    static const unsigned char want[] = {
        0x01, 0x00, 0x00, 0x00,              // N = 1
        0x02, 0x00, 0x00, 0x00,              // D = 2
        0x00, 0x00, 0xC0, 0x3F,              // 1.5f
        0x00, 0x00, 0x00, 0xC0,              // -2.0f
        0x01, 0x00, 0x00, 0x00,              // token count
        0x03, 0x00,                          // token 3
        0x04, 0x00,                          // template id 4
        0x00, 0x00, 0x00, 0x3F,              // 0.5f
        0x00, 0x00, 0x80, 0x3E,              // 0.25f
        0x00, 0x00, 0x80, 0xBF,              // -1.0f
    };
    REQUIRE(got.size() == sizeof(want));
    for (size_t i = 0; i < sizeof(want); ++i) REQUIRE(static_cast<unsigned char>(got[i]) == want[i]);
}

TEST_CASE("prompt text round-trips through the tokenizer") {
    auto [m, p] = generate_motion(MotionTemplate::raise_hands, {0.5, 0.2, 2.0}, 32, 11, 0.0);
    std::string text = prompt_text(p);
    REQUIRE(tokenize(text) == p.tokens);
    REQUIRE(vocabulary().size() <= 64);
}

TEST_CASE("skeleton diameter bound is enforced") {
    MotionGlobal m;
    m.frames = 2;
    m.joints = 5;
    m.pos.assign(2 * 5 * 3, 0.0);
    m.at(0, 3, 0) = 10.0;
    REQUIRE_THROWS_WITH(m.validate(sk), Catch::Matchers::ContainsSubstring("diameter"));
}
