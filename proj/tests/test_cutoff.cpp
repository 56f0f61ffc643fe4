#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <map>
#include <unordered_set>

#include "doctest.h"
#include "rockscope/cutoff.hpp"
#include "rockscope/error.hpp"
#include "rockscope/rng.hpp"
#include "rockscope/stats.hpp"

using namespace rockscope;

namespace {

std::vector<TokenAggregate> aggregates_with_scores(const std::vector<double>& scores) {
    std::vector<TokenAggregate> out;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        TokenAggregate a;
        a.token_id = static_cast<std::uint32_t>(i);
        a.freq = 1;
        a.mean_loss_post = scores[i];
        a.rock_score = scores[i];
        out.push_back(a);
    }
    return out;
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
        const std::size_t len = 2 + rng.next_below(10);
        for (std::size_t j = 0; j < len; ++j) {
            t.tokens.push_back(static_cast<std::uint32_t>(rng.next_below(vocab)));
            t.losses["pre"].push_back(rng.next_double());
            t.losses["post"].push_back(rng.next_double());
        }
        c.trajectories.push_back(std::move(t));
    }
    return c;
}

}  // namespace

TEST_CASE("coverage_curve direct ratios") {
    auto aggs = aggregates_with_scores({5, 3, 2});
    auto curve = coverage_curve(aggs, {0, 2, 3, 10});
    CHECK(curve[0] == doctest::Approx(0.0));
    CHECK(curve[1] == doctest::Approx(0.8));
    CHECK(curve[2] == doctest::Approx(1.0));
    CHECK(curve[3] == doctest::Approx(1.0));  // K beyond vocabulary covers everything
}

TEST_CASE("coverage_curve is monotone with terminal value 1") {
    SplitMix64 rng(8);
    std::vector<double> scores(40);
    for (auto& s : scores) s = rng.next_double() * 10.0;
    auto aggs = aggregates_with_scores(scores);
    std::vector<std::size_t> ks;
    for (std::size_t k = 0; k <= 40; ++k) ks.push_back(k);
    auto curve = coverage_curve(aggs, ks);
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] >= curve[i - 1] - 1e-15);
    CHECK(curve.back() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("coverage_curve rejects all-zero scores") {
    auto aggs = aggregates_with_scores({0, 0, 0});
    CHECK_THROWS_AS(coverage_curve(aggs, {1}), StatError);
}

TEST_CASE("top_k_by_rock_score breaks ties by token id") {
    auto aggs = aggregates_with_scores({1.0, 2.0, 2.0, 0.5});
    auto top = top_k_by_rock_score(aggs, 3);
    CHECK(top == std::vector<std::uint32_t>{1, 2, 0});
}

TEST_CASE("stability_sweep at full corpus size gives Jaccard 1 for every K") {
    Corpus c = random_corpus(13, 30, 12);
    DetectionConfig cfg;
    auto sweep = stability_sweep(c, cfg, {c.trajectories.size()}, {1, 3, 5, 12}, 3, 99);
    for (double v : sweep.jaccard_matrix[0]) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("a 10x dominant token is found at K=1 for every subsample size") {
    // synthetic corpus: token 0 carries overwhelming burden everywhere
    Corpus c;
    c.vocabulary.id_to_string = {"big", "a", "b", "c"};
    c.checkpoints = {"pre", "post"};
    SplitMix64 rng(4);
    for (std::size_t i = 0; i < 40; ++i) {
        TrajectoryTrace t;
        t.trajectory_id = i;
        for (std::size_t j = 0; j < 6; ++j) {
            const bool big = j == 0;
            t.tokens.push_back(big ? 0 : static_cast<std::uint32_t>(1 + rng.next_below(3)));
            t.losses["pre"].push_back(big ? 10.0 : rng.next_double() * 0.1);
            t.losses["post"].push_back(big ? 10.0 : rng.next_double() * 0.1);
        }
        c.trajectories.push_back(std::move(t));
    }
    DetectionConfig cfg;
    auto sweep = stability_sweep(c, cfg, {5, 10, 20, 40}, {1}, 6, 31);
    for (const auto& row : sweep.jaccard_matrix) CHECK(row[0] == doctest::Approx(1.0));
}

TEST_CASE("stability_sweep matrix equals an independent oracle recomputation") {
    Corpus c = random_corpus(17, 25, 9);
    DetectionConfig cfg;
    const std::vector<std::size_t> sizes{5, 10, 20};
    const std::vector<std::size_t> ks{2, 4, 6};
    const std::size_t repeats = 4;
    const std::uint64_t seed = 13;
    auto sweep = stability_sweep(c, cfg, sizes, ks, repeats, seed);

    // oracle: same substream schedule, brute-force tally ranking
    auto brute_topk = [&](const std::vector<std::size_t>& idx, std::size_t k) {
        std::map<std::uint32_t, double> burden;
        for (std::size_t i : idx)
            for (std::size_t j = 0; j < c.trajectories[i].tokens.size(); ++j)
                burden[c.trajectories[i].tokens[j]] += c.trajectories[i].losses.at("post")[j];
        std::vector<std::pair<std::uint32_t, double>> rows(burden.begin(), burden.end());
        std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        std::unordered_set<std::uint32_t> out;
        for (std::size_t i = 0; i < rows.size() && i < k; ++i) out.insert(rows[i].first);
        return out;
    };
    std::vector<std::size_t> all_idx(c.trajectories.size());
    for (std::size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;

    for (std::size_t si = 0; si < sizes.size(); ++si) {
        for (std::size_t ki = 0; ki < ks.size(); ++ki) {
            const auto full = brute_topk(all_idx, ks[ki]);
            double mean = 0.0;
            for (std::size_t r = 0; r < repeats; ++r) {
                SplitMix64 rng(SplitMix64::derive(seed, si * 1000003ULL + r));
                auto idx = sample_without_replacement(c.trajectories.size(), sizes[si], rng);
                mean += jaccard(brute_topk(idx, ks[ki]), full);
            }
            mean /= static_cast<double>(repeats);
            CHECK(sweep.jaccard_matrix[si][ki] == doctest::Approx(mean).epsilon(1e-12));
        }
    }
}

TEST_CASE("stability_sweep is deterministic per seed and validates sizes") {
    Corpus c = random_corpus(23, 15, 6);
    DetectionConfig cfg;
    auto a = stability_sweep(c, cfg, {5, 10}, {2, 4}, 3, 7);
    auto b = stability_sweep(c, cfg, {5, 10}, {2, 4}, 3, 7);
    CHECK(a.jaccard_matrix == b.jaccard_matrix);
    CHECK_THROWS_AS(stability_sweep(c, cfg, {999}, {2}, 3, 7), ConfigError);
    CHECK_THROWS_AS(stability_sweep(c, cfg, {5}, {}, 3, 7), ConfigError);
    CHECK_THROWS_AS(stability_sweep(c, cfg, {5}, {2}, 0, 7), ConfigError);
}

TEST_CASE("full-corpus top-K is invariant under trajectory permutation") {
    Corpus c = random_corpus(29, 20, 8);
    DetectionConfig cfg;
    auto base = top_k_by_rock_score(aggregate_scores(c, "pre", "post"), 5);
    SplitMix64 rng(3);
    for (std::size_t i = c.trajectories.size(); i > 1; --i)
        std::swap(c.trajectories[i - 1], c.trajectories[rng.next_below(i)]);
    auto shuffled = top_k_by_rock_score(aggregate_scores(c, "pre", "post"), 5);
    CHECK(base == shuffled);
}

TEST_CASE("choose_k picks the paper-shaped sweet spot") {
    // curves shaped like the reference sweep: J >= 0.70 up to K = 100,
    // decaying beyond; coverage 0.60 at K = 100.
    SweepResult sweep;
    sweep.sizes = {50, 100, 200, 400};
    sweep.ks = {25, 50, 100, 150, 200};
    const std::vector<double> mean_j{0.90, 0.81, 0.72, 0.62, 0.57};
    sweep.jaccard_matrix.assign(4, mean_j);
    sweep.coverage_curve = {0.30, 0.49, 0.60, 0.70, 0.80};
    auto chosen = choose_k(sweep, 0.70, 0.50);
    CHECK(chosen.k == 100);
    CHECK(!chosen.fallback);
    CHECK(chosen.coverage == doctest::Approx(0.60));
}

TEST_CASE("choose_k falls back to scalarization when infeasible") {
    SweepResult sweep;
    sweep.sizes = {10};
    sweep.ks = {10, 20, 30};
    sweep.jaccard_matrix = {{0.9, 0.5, 0.2}};   // feasible J only at K=10
    sweep.coverage_curve = {0.10, 0.30, 0.95};  // feasible coverage only at K=30
    auto chosen = choose_k(sweep, 0.8, 0.5);
    CHECK(chosen.fallback);
    CHECK((chosen.k == 10 || chosen.k == 30));

    SUBCASE("single feasible candidate returned unconditionally") {
        SweepResult s2;
        s2.sizes = {10};
        s2.ks = {7};
        s2.jaccard_matrix = {{0.95}};
        s2.coverage_curve = {0.8};
        auto c2 = choose_k(s2, 0.7, 0.5);
        CHECK(c2.k == 7);
        CHECK(!c2.fallback);
    }
    SUBCASE("empty cutoff list is a config error") {
        SweepResult s3;
        CHECK_THROWS_AS(choose_k(s3, 0.7, 0.5), ConfigError);
    }
}
