#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "motok/motion.hpp"

using namespace motok;
namespace fs = std::filesystem;

namespace {

Config small_spec() {
    return Config::parse("[corpus]\n"
                         "dim = 16\n"
                         "fps = 30\n"
                         "train = 12\n"
                         "eval = 4\n"
                         "min_frames = 20\n"
                         "max_frames = 40\n"
                         "[archetype walk-circle]\n"
                         "radius = 0.5..2.0\n"
                         "cycles = 1..2\n"
                         "cadence = 1.0..2.0\n"
                         "amplitude = 0.8..1.2\n"
                         "[archetype jump]\n"
                         "height = 0.2..0.6\n"
                         "count = 1..3\n"
                         "amplitude = 0.8..1.2\n"
                         "[archetype wave]\n"
                         "freq = 0.5..1.5\n"
                         "amplitude = 0.5..1.5\n");
}

} // namespace

TEST_CASE("corpus generation is bitwise deterministic under a fixed seed") {
    Dataset a = synthesize_corpus(small_spec(), 7);
    Dataset b = synthesize_corpus(small_spec(), 7);
    REQUIRE(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].data == b.train[i].data);
        CHECK(a.train[i].caption == b.train[i].caption);
    }
    Dataset c = synthesize_corpus(small_spec(), 8);
    bool any_diff = false;
    for (size_t i = 0; i < a.train.size() && !any_diff; ++i)
        any_diff = a.train[i].data != c.train[i].data;
    CHECK(any_diff);
}

TEST_CASE("zero amplitude collapses to a constant pose") {
    MotionSequence s =
        synthesize_one("walk-circle", {{"radius", 1.0}, {"amplitude", 0.0}}, 50, 16, 30.0f);
    for (int t = 1; t < s.frames; ++t)
        for (int j = 0; j < s.dim; ++j)
            if (j != 3) CHECK(s.at(t, j) == doctest::Approx(s.at(0, j)).epsilon(1e-6));
    // heading still sweeps; positional features must be frozen
    CHECK(s.at(s.frames - 1, 0) == doctest::Approx(0.0));
    CHECK(s.at(s.frames - 1, 1) == doctest::Approx(0.0));
}

TEST_CASE("walk-circle closes: root returns to the start") {
    MotionSequence s =
        synthesize_one("walk-circle", {{"radius", 1.0}, {"cycles", 1.0}}, 120, 16, 30.0f);
    const float dx = s.at(119, 0) - s.at(0, 0);
    const float dz = s.at(119, 1) - s.at(0, 1);
    CHECK(std::sqrt(dx * dx + dz * dz) < 1e-3);
}

TEST_CASE("generator config validation") {
    Config none = Config::parse("[corpus]\ntrain = 2\neval = 1\n");
    CHECK_THROWS_AS(synthesize_corpus(none, 1), ConfigError);
    Config one = Config::parse("[corpus]\ntrain = 2\neval = 1\n"
                               "[archetype jump]\nheight = 0.3..0.4\n");
    CHECK_THROWS_AS(synthesize_corpus(one, 1), ConfigError);
    CHECK_THROWS_AS(synthesize_one("backflip", {}, 10, 16, 30.0f), ConfigError);
}

TEST_CASE("normalization") {
    Dataset ds = synthesize_corpus(small_spec(), 3);

    SUBCASE("identity stats are the identity") {
        NormStats id;
        id.mean.assign(16, 0.0f);
        id.stdev.assign(16, 1.0f);
        MotionSequence n = normalize(ds.train[0], id);
        CHECK(n.data == ds.train[0].data);
    }

    SUBCASE("round trip within 1e-5") {
        for (const auto& s : ds.train) {
            MotionSequence back = denormalize(normalize(s, ds.stats), ds.stats);
            for (size_t i = 0; i < s.data.size(); ++i)
                CHECK(std::fabs(back.data[i] - s.data[i]) < 1e-5);
        }
    }

    SUBCASE("constant features hit the clamp and stay finite") {
        std::vector<MotionSequence> seqs(2);
        for (auto& s : seqs) {
            s.frames = 10;
            s.dim = 3;
            s.data.assign(30, 2.5f); // zero variance everywhere
        }
        NormStats st = compute_stats(seqs);
        for (float v : st.stdev) CHECK(v == 1e-6f);
        MotionSequence n = normalize(seqs[0], st);
        for (float v : n.data) CHECK(std::isfinite(v));
    }

    SUBCASE("dimension mismatch raises") {
        NormStats st;
        st.mean.assign(4, 0.0f);
        st.stdev.assign(4, 1.0f);
        CHECK_THROWS_AS(normalize(ds.train[0], st), DimensionError);
    }
}

TEST_CASE("batch iteration") {
    Dataset ds = synthesize_corpus(small_spec(), 5);

    SUBCASE("batch 1 with a full-length window returns the sequence itself") {
        // all sequences have length >= 20; use a single-sequence dataset
        std::vector<MotionSequence> one = {ds.train[0]};
        NormStats id;
        id.mean.assign(16, 0.0f);
        id.stdev.assign(16, 1.0f);
        BatchIter it(&one, &id, 1, one[0].frames, 99);
        Batch b = *it.next();
        CHECK(b.frames.dim(1) == one[0].frames);
        for (int t = 0; t < one[0].frames; ++t)
            for (int j = 0; j < 16; ++j)
                CHECK(b.frames.values()[static_cast<size_t>(t) * 16 + j] == one[0].at(t, j));
        for (float m : b.mask) CHECK(m == 1.0f);
    }

    SUBCASE("same seed gives an identical batch stream") {
        BatchIter a(&ds.train, &ds.stats, 4, 16, 42);
        BatchIter b(&ds.train, &ds.stats, 4, 16, 42);
        for (int i = 0; i < 10; ++i) {
            Batch ba = *a.next();
            Batch bb = *b.next();
            CHECK(ba.seq_index == bb.seq_index);
            CHECK(ba.window_start == bb.window_start);
            CHECK(std::equal(ba.frames.values().begin(), ba.frames.values().end(),
                             bb.frames.values().begin()));
        }
    }

    SUBCASE("windows are contiguous and in bounds") {
        MotionSequence hundred =
            synthesize_one("wave", {{"freq", 1.0}, {"amplitude", 1.0}}, 100, 16, 30.0f);
        std::vector<MotionSequence> seqs = {hundred};
        NormStats st = compute_stats(seqs);
        BatchIter it(&seqs, &st, 1, 32, 11);
        for (int i = 0; i < 50; ++i) {
            Batch b = *it.next();
            const int start = b.window_start[0];
            CHECK(start >= 0);
            CHECK(start + 32 <= 100);
            // contiguity: window content equals the normalized slice
            const MotionSequence norm = normalize(hundred, st);
            for (int t = 0; t < 32; ++t)
                for (int j = 0; j < 16; ++j)
                    CHECK(b.frames.values()[static_cast<size_t>(t) * 16 + j] ==
                          norm.at(start + t, j));
        }
    }

    SUBCASE("batch larger than the dataset with drop-last is an exhaustion error") {
        CHECK_THROWS_AS(BatchIter(&ds.eval, &ds.stats, 100, 16, 1), StateError);
    }

    SUBCASE("state restore resumes the identical stream") {
        BatchIter a(&ds.train, &ds.stats, 4, 16, 13);
        for (int i = 0; i < 7; ++i) a.next();
        auto st = a.state();
        Batch expect = *a.next();
        BatchIter b(&ds.train, &ds.stats, 4, 16, 13);
        b.restore(st);
        Batch got = *b.next();
        CHECK(expect.seq_index == got.seq_index);
        CHECK(expect.window_start == got.window_start);
    }

    SUBCASE("padding fills short sequences with zeros and masks them out") {
        std::vector<MotionSequence> seqs = {
            synthesize_one("jump", {{"height", 0.4}}, 10, 16, 30.0f)};
        NormStats st = compute_stats(seqs);
        BatchIter it(&seqs, &st, 1, 16, 3);
        Batch b = *it.next();
        for (int t = 10; t < 16; ++t) {
            CHECK(b.mask[t] == 0.0f);
            for (int j = 0; j < 16; ++j)
                CHECK(b.frames.values()[static_cast<size_t>(t) * 16 + j] == 0.0f);
        }
        BatchIterOptions strict;
        strict.pad = false;
        CHECK_THROWS_AS(BatchIter(&seqs, &st, 1, 16, 3, strict), ValidationError);
    }
}

TEST_CASE("sequence files and corpus directory round trip") {
    Dataset ds = synthesize_corpus(small_spec(), 21);
    const fs::path dir = fs::temp_directory_path() / "motok_test_corpus";
    fs::remove_all(dir);
    write_corpus(dir.string(), ds);
    CHECK(fs::exists(dir / "train"));
    CHECK(fs::exists(dir / "eval"));
    CHECK(fs::exists(dir / "captions"));

    Dataset back = load_corpus(dir.string());
    REQUIRE(back.train.size() == ds.train.size());
    REQUIRE(back.eval.size() == ds.eval.size());
    for (size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(back.train[i].data == ds.train[i].data); // f32 payload is bit-exact
        CHECK(back.train[i].caption == ds.train[i].caption);
        CHECK(back.train[i].fps == ds.train[i].fps);
    }
    // stats recomputed from the same training split agree
    for (int j = 0; j < ds.dim; ++j) {
        CHECK(back.stats.mean[j] == doctest::Approx(ds.stats.mean[j]));
        CHECK(back.stats.stdev[j] == doctest::Approx(ds.stats.stdev[j]));
    }
    fs::remove_all(dir);
}
