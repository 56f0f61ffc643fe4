#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"
#include "rockscope/trace.hpp"

using namespace rockscope;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("rockscope_trace_" + name)).string();
}

Corpus tiny_corpus() {
    Corpus c;
    c.vocabulary.id_to_string = {"a", "b", "c", "d"};
    c.checkpoints = {"pre", "post"};
    TrajectoryTrace t0;
    t0.trajectory_id = 0;
    t0.prompt_id = 0;
    t0.tokens = {0, 1, 2};
    t0.losses["pre"] = {0.5, 0.25, 0.125};
    t0.losses["post"] = {0.1, 0.2, 0.3};
    TrajectoryTrace t1;
    t1.trajectory_id = 1;
    t1.prompt_id = 1;
    t1.tokens = {3, 3};
    t1.losses["pre"] = {1.0, 2.0};
    t1.losses["post"] = {0.0, 0.5};
    c.trajectories = {t0, t1};
    return c;
}

Corpus random_corpus(std::uint64_t seed, std::size_t n_traj, std::size_t vocab) {
    SplitMix64 rng(seed);
    Corpus c;
    c.vocabulary.id_to_string.resize(vocab);
    for (std::size_t i = 0; i < vocab; ++i) c.vocabulary.id_to_string[i] = "t" + std::to_string(i);
    c.checkpoints = {"pre", "post"};
    for (std::size_t i = 0; i < n_traj; ++i) {
        TrajectoryTrace t;
        t.trajectory_id = i;
        t.prompt_id = i / 2;
        const std::size_t len = 1 + rng.next_below(12);
        for (std::size_t j = 0; j < len; ++j) {
            t.tokens.push_back(static_cast<std::uint32_t>(rng.next_below(vocab)));
            t.losses["pre"].push_back(rng.next_double() * 3.0);
            t.losses["post"].push_back(rng.next_double() * 2.0);
        }
        c.trajectories.push_back(std::move(t));
    }
    return c;
}

bool corpora_equal(const Corpus& a, const Corpus& b) {
    if (a.trajectories.size() != b.trajectories.size()) return false;
    if (a.vocabulary.id_to_string != b.vocabulary.id_to_string) return false;
    if (a.checkpoints != b.checkpoints) return false;
    for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
        const auto& x = a.trajectories[i];
        const auto& y = b.trajectories[i];
        if (x.trajectory_id != y.trajectory_id || x.prompt_id != y.prompt_id) return false;
        if (x.tokens != y.tokens) return false;
        if (x.losses.size() != y.losses.size()) return false;
        for (const auto& [name, values] : x.losses) {
            auto it = y.losses.find(name);
            if (it == y.losses.end() || it->second.size() != values.size()) return false;
            for (std::size_t j = 0; j < values.size(); ++j)
                if (std::fabs(values[j] - it->second[j]) > 1e-9) return false;
        }
    }
    return true;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("format_double is shortest roundtrip capped at 9 digits") {
    CHECK(format_double(0.0) == "0");
    CHECK(format_double(2.0) == "2");
    CHECK(format_double(0.5) == "0.5");
    CHECK(format_double(1.0 / 3.0) == "0.333333333");
    // round-trips exactly whenever 9 significant digits suffice
    for (double v : {0.1, 0.25, 123456.0, 1e-7, 3.5e9}) {
        CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
    }
}

TEST_CASE("empty trace file with valid vocab loads as empty corpus") {
    const std::string tp = temp_path("empty.jsonl");
    const std::string vp = temp_path("empty_vocab.json");
    {
        std::ofstream t(tp);
        Vocabulary v;
        v.id_to_string = {"x", "y"};
        write_vocabulary(v, vp);
    }
    Corpus c = load_corpus(tp, vp);
    CHECK(c.trajectories.empty());
    CHECK(c.vocabulary.size() == 2);
}

TEST_CASE("losses length mismatch raises validation error naming the trajectory") {
    const std::string tp = temp_path("badlen.jsonl");
    const std::string vp = temp_path("badlen_vocab.json");
    {
        std::ofstream t(tp);
        t << R"({"schema":1,"trajectory_id":7,"prompt_id":0,"tokens":[0,1],"losses":{"pre":[0.5]}})"
          << "\n";
        Vocabulary v;
        v.id_to_string = {"x", "y"};
        write_vocabulary(v, vp);
    }
    CHECK_THROWS_WITH_AS(load_corpus(tp, vp),
                         doctest::Contains("trajectory 7"), ValidationError);
}

TEST_CASE("malformed line raises parse error with line number") {
    const std::string tp = temp_path("badline.jsonl");
    const std::string vp = temp_path("badline_vocab.json");
    {
        std::ofstream t(tp);
        t << R"({"schema":1,"trajectory_id":0,"prompt_id":0,"tokens":[0],"losses":{"pre":[0.5]}})"
          << "\n";
        t << "{not json\n";
        Vocabulary v;
        v.id_to_string = {"x"};
        write_vocabulary(v, vp);
    }
    try {
        load_corpus(tp, vp);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("write then load is identity and writing twice is byte-identical") {
    Corpus c = tiny_corpus();
    const std::string tp = temp_path("roundtrip.jsonl");
    const std::string tp2 = temp_path("roundtrip2.jsonl");
    const std::string vp = temp_path("roundtrip_vocab.json");
    write_corpus(c, tp);
    write_corpus(c, tp2);
    write_vocabulary(c.vocabulary, vp);
    CHECK(read_file(tp) == read_file(tp2));
    Corpus back = load_corpus(tp, vp);
    CHECK(corpora_equal(c, back));
    CHECK(back.checkpoints == std::vector<std::string>{"pre", "post"});
}

TEST_CASE("round-trip preserves dists") {
    Corpus c = tiny_corpus();
    TruncatedDist s;
    s.ids = {1, 0};
    s.ps = {0.75, 0.25};
    TruncatedDist q;
    q.ids = {0, 1, 2};
    q.ps = {0.5, 0.3, 0.2};
    auto& t0 = c.trajectories[0];
    t0.dists["post"] = {{s, q}, {s, q}, {s, q}};
    const std::string tp = temp_path("dists.jsonl");
    const std::string vp = temp_path("dists_vocab.json");
    write_corpus(c, tp);
    write_vocabulary(c.vocabulary, vp);
    Corpus back = load_corpus(tp, vp);
    const auto& pairs = back.trajectories[0].dists.at("post");
    REQUIRE(pairs.size() == 3);
    CHECK(pairs[1].first.ids == std::vector<std::uint32_t>{1, 0});
    CHECK(pairs[1].second.ps[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("align_checkpoints pairs every position in order") {
    Corpus c = tiny_corpus();
    auto pairs = align_checkpoints(c, "pre", "post");
    REQUIRE(pairs.size() == 5);  // sum of trajectory lengths
    CHECK(pairs[0].trajectory_id == 0);
    CHECK(pairs[0].position == 0);
    CHECK(pairs[0].loss_pre == doctest::Approx(0.5));
    CHECK(pairs[0].loss_post == doctest::Approx(0.1));
    CHECK(pairs[4].trajectory_id == 1);
    CHECK(pairs[4].position == 1);

    SUBCASE("identical checkpoints give identical pairs") {
        auto same = align_checkpoints(c, "pre", "pre");
        for (const auto& p : same) CHECK(p.loss_pre == p.loss_post);
    }
    SUBCASE("missing checkpoint is an error") {
        CHECK_THROWS_AS(align_checkpoints(c, "pre", "nope"), Error);
    }
}

TEST_CASE("align_checkpoints matches a brute-force rescan on random corpora") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        Corpus c = random_corpus(seed, 20, 7);
        auto pairs = align_checkpoints(c, "pre", "post");
        std::size_t idx = 0;
        for (const auto& t : c.trajectories) {
            for (std::size_t j = 0; j < t.tokens.size(); ++j) {
                REQUIRE(idx < pairs.size());
                CHECK(pairs[idx].token_id == t.tokens[j]);
                CHECK(pairs[idx].loss_pre == t.losses.at("pre")[j]);
                CHECK(pairs[idx].loss_post == t.losses.at("post")[j]);
                ++idx;
            }
        }
        CHECK(idx == pairs.size());
    }
}

TEST_CASE("validation rejects corrupted corpora") {
    // property-style: corrupt random corpora in random ways, expect rejection
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Corpus c = random_corpus(200 + seed, 6, 5);
        SplitMix64 rng(seed);
        Corpus bad = c;
        const int mode = static_cast<int>(rng.next_below(4));
        if (bad.trajectories.empty()) continue;
        auto& t = bad.trajectories[rng.next_below(bad.trajectories.size())];
        switch (mode) {
            case 0:  // loss length mismatch
                t.losses["pre"].push_back(0.0);
                break;
            case 1:  // negative loss
                if (t.losses["post"].empty()) continue;
                t.losses["post"][0] = -1.0;
                break;
            case 2:  // token outside vocabulary
                t.tokens[0] = 999;
                break;
            case 3:  // missing checkpoint
                t.losses.erase("post");
                break;
        }
        CHECK_THROWS_AS(validate_corpus(bad), ValidationError);
    }
}

TEST_CASE("unwritable paths raise io errors") {
    Corpus c = tiny_corpus();
    CHECK_THROWS_AS(write_corpus(c, "/no/such/dir/trace.jsonl"), IoError);
    CHECK_THROWS_AS(write_vocabulary(c.vocabulary, "/no/such/dir/vocab.json"), IoError);
    CHECK_THROWS_AS(load_corpus("/no/such/trace.jsonl", "/no/such/vocab.json"), IoError);
}

TEST_CASE("truncated dist invariants are enforced") {
    Corpus c = tiny_corpus();
    TruncatedDist bad;
    bad.ids = {0, 1};
    bad.ps = {0.5, 0.2};  // sums to 0.7 with zero tail
    bad.tail_mass = 0.0;
    c.trajectories[0].dists["pre"] = {{bad, bad}, {bad, bad}, {bad, bad}};
    CHECK_THROWS_AS(validate_trajectory(c.trajectories[0]), ValidationError);

    SUBCASE("duplicate ids rejected") {
        TruncatedDist dup;
        dup.ids = {0, 0};
        dup.ps = {0.5, 0.5};
        c.trajectories[0].dists["pre"] = {{dup, dup}, {dup, dup}, {dup, dup}};
        CHECK_THROWS_AS(validate_trajectory(c.trajectories[0]), ValidationError);
    }
}
