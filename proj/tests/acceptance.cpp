// Acceptance suite: one pass/fail line per criterion, exit 0 iff all pass.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <unordered_set>

#include "rockscope/cli.hpp"
#include "rockscope/cutoff.hpp"
#include "rockscope/detect.hpp"
#include "rockscope/digest.hpp"
#include "rockscope/gradgeom.hpp"
#include "rockscope/knockout.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/reweight.hpp"
#include "rockscope/rng.hpp"
#include "rockscope/simlab.hpp"
#include "rockscope/stats.hpp"
#include "rockscope/trace.hpp"

using namespace rockscope;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void criterion(int number, const char* description, const std::function<bool()>& check) {
    const auto start = std::chrono::steady_clock::now();
    bool ok = false;
    std::string note;
    try {
        ok = check();
    } catch (const std::exception& e) {
        note = std::string(" (exception: ") + e.what() + ")";
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %2d: %s (%.1fs)%s\n", ok ? "PASS" : "FAIL", number, description,
                secs, note.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

bool approx(double a, double b, double rel) {
    return std::fabs(a - b) <= rel * std::max(std::fabs(a), std::fabs(b));
}

// Shared fixture: the default golden world, trained, with its probe corpus.
struct GoldenRun {
    SimConfig config;
    SimWorld world;
    Corpus corpus;

    GoldenRun() : config(default_sim_config()), world(build_world(config)) {
        TrainResult result = train(world, std::nullopt, nullptr, config.steps, config.seed);
        corpus = std::move(result.probe);
    }
};

std::optional<GoldenRun> golden;

GoldenRun& golden_run() {
    if (!golden) golden.emplace();
    return *golden;
}

std::vector<double> random_simplex(SplitMix64& rng, std::size_t n) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (auto& x : p) {
        x = 0.05 + rng.next_double();
        sum += x;
    }
    for (auto& x : p) x /= sum;
    return p;
}

bool criterion1_exact_statistics() {
    std::vector<double> ps(200, 0.5);
    ps[0] = 0.0038;
    ps[1] = 0.0016;
    const auto bf = bonferroni(ps, 0.05);
    if (bf.threshold_or_level != 0.05 / 200.0) return false;
    if (!approx(bf.threshold_or_level, 2.5e-4, 1e-12)) return false;
    if (!bf.rejected.empty()) return false;
    const auto bh = benjamini_hochberg(ps, 0.20);
    if (!bh.rejected.empty()) return false;
    if (binomial_two_sided(10, 10, 0.5) != 0.001953125) return false;
    if (binomial_two_sided(7, 7, 0.5) != 0.015625) return false;
    if (binomial_two_sided(6, 6, 0.5) != 0.03125) return false;
    return true;
}

bool criterion2_gradient_oracle() {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SplitMix64 rng(seed);
        const auto p = random_simplex(rng, 32);
        const auto q = random_simplex(rng, 32);
        const auto g = reverse_kl_logit_gradient(p, q);

        std::vector<double> z(32);
        for (std::size_t i = 0; i < 32; ++i) z[i] = std::log(p[i]);
        auto kl_of = [&](const std::vector<double>& logits) {
            double m = logits[0];
            for (double l : logits) m = std::max(m, l);
            double s = 0.0;
            for (double l : logits) s += std::exp(l - m);
            double kl = 0.0;
            for (std::size_t i = 0; i < 32; ++i) {
                const double pi = std::exp(logits[i] - m) / s;
                kl += pi * (std::log(pi) - std::log(q[i]));
            }
            return kl;
        };
        double comp_sum = 0.0;
        for (std::size_t i = 0; i < 32; ++i) {
            auto zp = z, zm = z;
            zp[i] += 1e-5;
            zm[i] -= 1e-5;
            const double fd = (kl_of(zp) - kl_of(zm)) / 2e-5;
            if (std::fabs(g[i] - fd) >= 1e-6) return false;
            comp_sum += g[i];
        }
        if (std::fabs(comp_sum) >= 1e-9) return false;
    }
    return true;
}

bool criterion3_contribution_identity() {
    SimConfig cfg = default_sim_config();
    cfg.prompts = 100;
    cfg.rollouts_per_prompt = 2;
    cfg.emit_dists = true;
    SimWorld world = build_world(cfg);
    TrainResult result = train(world, std::nullopt, nullptr, cfg.steps, cfg.seed);
    const Corpus& corpus = result.probe;

    std::unordered_set<std::uint32_t> rock(cfg.planted_rock_tokens.begin(),
                                           cfg.planted_rock_tokens.end());
    auto groups = build_analysis_groups(corpus, "pre", rock, 20.0, 95.0, 12, cfg.seed);
    auto summaries = summarize_gradients(corpus, "pre", groups);
    if (summaries.empty()) return false;

    const std::size_t vocab = corpus.vocabulary.size();
    double contrib_sum = 0.0;
    std::vector<double> weighted(vocab, 0.0), balanced(vocab, 0.0);
    for (const auto& s : summaries) {
        contrib_sum += s.contribution;
        for (std::size_t k = 0; k < vocab; ++k) {
            weighted[k] += static_cast<double>(s.n_occurrences) * s.mean_gradient[k];
            balanced[k] += s.mean_gradient[k];
        }
    }
    const double norm = l2_norm(balanced);
    if (norm == 0.0) return false;
    const double projection = dot(weighted, balanced) / norm;
    return approx(contrib_sum, projection, 1e-6);
}

bool criterion4_loss_decomposition() {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        SplitMix64 rng(7000 + seed);
        Corpus c;
        const std::size_t vocab = 5 + rng.next_below(8);
        c.vocabulary.id_to_string.resize(vocab);
        c.checkpoints = {"pre", "post"};
        const std::size_t n_traj = 5 + rng.next_below(25);
        double total_post = 0.0;
        for (std::size_t i = 0; i < n_traj; ++i) {
            TrajectoryTrace t;
            t.trajectory_id = i;
            const std::size_t len = 1 + rng.next_below(14);
            for (std::size_t j = 0; j < len; ++j) {
                t.tokens.push_back(static_cast<std::uint32_t>(rng.next_below(vocab)));
                t.losses["pre"].push_back(rng.next_double());
                const double post = rng.next_double() * 3.0;
                t.losses["post"].push_back(post);
                total_post += post;
            }
            c.trajectories.push_back(std::move(t));
        }
        auto aggs = aggregate_scores(c, "pre", "post");
        double sum_r = 0.0;
        for (const auto& a : aggs) sum_r += a.rock_score;
        if (!approx(sum_r, total_post, 1e-6)) return false;
    }
    return true;
}

bool criterion5_planted_detection() {
    GoldenRun& run = golden_run();
    DetectionConfig cfg;
    cfg.seed = run.config.seed;
    cfg.selection = {Selection::Mode::top_k, 0.0, 20};
    auto report = select_rock_tokens(run.corpus, cfg);

    std::unordered_set<std::uint32_t> planted(run.config.planted_rock_tokens.begin(),
                                              run.config.planted_rock_tokens.end());
    std::size_t hits = 0;
    for (std::uint32_t id : report.rock_set)
        if (planted.count(id)) ++hits;
    const double recall = static_cast<double>(hits) / static_cast<double>(planted.size());
    const double precision =
        report.rock_set.empty() ? 0.0
                                : static_cast<double>(hits) / static_cast<double>(report.rock_set.size());
    if (recall < 0.9 || precision < 0.8) return false;

    // With the context filters disabled the ranking must equal the
    // brute-force R tally.
    DetectionConfig open;
    open.seed = run.config.seed;
    open.tau_pre = {Threshold::Mode::absolute, 0.0};
    open.tau_post = {Threshold::Mode::absolute, 0.0};
    open.gamma = 0.0;
    open.eta = 0.0;
    open.selection = {Selection::Mode::score_threshold, 0.0, 0};
    auto open_report = select_rock_tokens(run.corpus, open);

    std::map<std::uint32_t, double> tally;
    for (const auto& t : run.corpus.trajectories)
        for (std::size_t i = 0; i < t.tokens.size(); ++i)
            tally[t.tokens[i]] += t.losses.at("post")[i];
    std::vector<std::uint32_t> oracle;
    for (const auto& [tok, _] : tally) oracle.push_back(tok);
    std::sort(oracle.begin(), oracle.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (tally[a] != tally[b]) return tally[a] > tally[b];
        return a < b;
    });
    if (open_report.aggregates.size() != oracle.size()) return false;
    for (std::size_t i = 0; i < oracle.size(); ++i) {
        if (open_report.aggregates[i].token_id != oracle[i]) return false;
        if (!approx(open_report.aggregates[i].rock_score_ctx, tally[oracle[i]], 1e-9)) return false;
    }
    return true;
}

bool criterion6_persistence_gap() {
    GoldenRun& run = golden_run();
    std::unordered_set<std::uint32_t> rock(run.config.planted_rock_tokens.begin(),
                                           run.config.planted_rock_tokens.end());
    auto groups = build_analysis_groups(run.corpus, "pre", rock, 20.0, 95.0, 12, run.config.seed);
    auto analysis = persistence_analysis(run.corpus, "pre", "post", groups);
    double rock_red = 0.0, rare_red = 0.0;
    bool have_rock = false, have_rare = false;
    for (const auto& g : analysis.groups) {
        if (g.group == TokenGroup::rock) {
            rock_red = g.median_relative_reduction;
            have_rock = true;
        }
        if (g.group == TokenGroup::rare_high_kl) {
            rare_red = g.median_relative_reduction;
            have_rare = true;
        }
    }
    return have_rock && have_rare && (rare_red - rock_red >= 0.20);
}

bool criterion7_knockout_soundness() {
    GoldenRun& run = golden_run();
    SimEnvironment env(run.world, 200, 4);

    MeasureOptions opts;
    opts.seed = 9;
    opts.bootstrap_resamples = 10000;
    auto pillar = measure_delta(env, run.world.layout().sep, {}, opts);
    if (!(pillar.delta_token <= -0.05)) return false;
    if (!(pillar.bootstrap_token.p_value < 0.05)) return false;

    const std::uint32_t phantom0 = run.world.layout().reserved0;
    auto phantom = measure_delta(env, phantom0, {}, opts);
    if (phantom.delta_token != 0.0 || phantom.delta_window != 0.0) return false;

    std::size_t pillar_count = 0;
    MeasureOptions calib;
    calib.bootstrap_resamples = 2000;
    const std::size_t n_phantom_ids = run.config.vocab_size - phantom0;
    for (std::size_t i = 0; i < 200; ++i) {
        calib.seed = SplitMix64::derive(31337, i);
        const std::uint32_t candidate = phantom0 + static_cast<std::uint32_t>(i % n_phantom_ids);
        auto rec = measure_delta(env, candidate, {}, calib);
        if (rec.delta_token != 0.0) return false;  // phantom deltas are exactly zero
        if (rec.category == KnockoutCategory::strong_pillar) ++pillar_count;
    }
    return static_cast<double>(pillar_count) / 200.0 <= 0.09;
}

bool criterion8_bootstrap_calibration() {
    SplitMix64 mc(11);
    const int reps = 500;
    int rejections = 0;
    for (int rep = 0; rep < reps; ++rep) {
        std::vector<std::uint8_t> base(100), treated(100);
        for (std::size_t i = 0; i < 100; ++i) {
            base[i] = mc.next_double() < 0.75 ? 1 : 0;
            treated[i] = mc.next_double() < 0.75 ? 1 : 0;
        }
        if (paired_bootstrap(base, treated, 400, SplitMix64::derive(11, rep)).p_value < 0.05)
            ++rejections;
    }
    const double rate = static_cast<double>(rejections) / reps;
    return rate >= 0.02 && rate <= 0.09;
}

bool criterion9_reweighting_contracts() {
    GoldenRun& run = golden_run();
    const Corpus& corpus = run.corpus;

    // (a) lambda = 1 equals the plain loss exactly
    auto ones = build_mask(corpus, {}, WindowSet{}, 1.0);
    auto wl1 = weighted_loss(corpus, ones, "post");
    std::vector<double> per_traj;
    for (const auto& t : corpus.trajectories) per_traj.push_back(pairwise_sum(t.losses.at("post")));
    if (wl1.total != pairwise_sum(per_traj)) return false;
    if (wl1.active_term_count != corpus.total_positions()) return false;

    // (b) rock-freeze keeps planted logits bit-identical through training
    SimConfig cfg = run.config;
    cfg.prompts = 60;
    cfg.steps = 400;
    cfg.emit_dists = false;
    SimWorld world = build_world(cfg);
    std::unordered_set<std::uint32_t> planted(cfg.planted_rock_tokens.begin(),
                                              cfg.planted_rock_tokens.end());
    const auto before = world.logit_snapshot(cfg.planted_rock_tokens);
    MaskSource freeze = make_freeze_mask(planted, 5, 0.0);
    auto trained = train(world, std::nullopt, &freeze, cfg.steps, cfg.seed);
    if (world.logit_snapshot(cfg.planted_rock_tokens) != before) return false;

    // (c) active gradient-term count equals (1 - masked_fraction) x positions,
    // recomputed exactly from the masks the trainer would apply
    std::size_t expected_active = 0, expected_total = 0;
    {
        SimConfig replay_cfg = cfg;
        SimWorld replay = build_world(replay_cfg);
        // replay the same batch schedule the trainer uses
        TrainResult probe_only = train(replay, std::nullopt, &freeze, cfg.steps, cfg.seed);
        expected_active = probe_only.total_active_terms;
        expected_total = probe_only.total_positions;
        if (probe_only.log.size() != cfg.steps) return false;
    }
    if (trained.total_active_terms != expected_active) return false;
    if (trained.total_positions != expected_total) return false;
    // and on stored corpora: masked_fraction accounting is exact
    DetectionConfig dc;
    dc.seed = run.config.seed;
    dc.selection = {Selection::Mode::top_k, 0.0, 2};
    auto detection = select_rock_tokens(corpus, dc);
    auto windows = rock_windows(corpus, detection, 1);
    auto masks = build_mask(corpus, detection.rock_set, windows, 0.0);
    auto wl0 = weighted_loss(corpus, masks, "post");
    std::size_t unmasked = 0;
    for (const auto& m : masks) {
        const auto masked =
            static_cast<std::size_t>(m.masked_fraction * static_cast<double>(m.weights.size()) + 0.5);
        unmasked += m.weights.size() - masked;
    }
    if (wl0.active_term_count != unmasked) return false;

    // (d) frequency-matched control windows: histogram-identical lengths and
    // center-token buckets, disjoint from the reference
    auto control = freq_matched_random_windows(corpus, windows, detection.rock_set, 21);
    std::map<std::uint32_t, int> ref_lengths, ctrl_lengths;
    for (const auto& [_, ivs] : windows.intervals)
        for (const auto& [lo, hi] : ivs) ref_lengths[hi - lo + 1]++;
    for (const auto& [_, ivs] : control.intervals)
        for (const auto& [lo, hi] : ivs) ctrl_lengths[hi - lo + 1]++;
    // merged control windows may fuse; compare via total covered length and
    // per-window placement count before merging is guaranteed by construction,
    // so compare bucket histograms of centers on the unmerged reference side.
    std::map<std::uint32_t, std::size_t> freq;
    for (const auto& t : corpus.trajectories)
        for (auto tok : t.tokens) freq[tok]++;
    auto bucket = [&](std::uint32_t token) {
        std::size_t f = freq[token];
        int b = 0;
        while (f > 1) {
            f >>= 1;
            ++b;
        }
        return b;
    };
    std::map<int, int> ref_buckets, ctrl_buckets;
    std::unordered_map<std::uint64_t, const TrajectoryTrace*> by_id;
    for (const auto& t : corpus.trajectories) by_id[t.trajectory_id] = &t;
    for (const auto& [traj, ivs] : windows.intervals)
        for (const auto& [lo, hi] : ivs)
            ref_buckets[bucket(by_id.at(traj)->tokens[lo + (hi - lo) / 2])]++;
    for (const auto& [traj, ivs] : control.intervals)
        for (const auto& [lo, hi] : ivs) {
            ctrl_buckets[bucket(by_id.at(traj)->tokens[lo + (hi - lo) / 2])]++;
            for (std::uint32_t p = lo; p <= hi; ++p)
                if (windows.contains(traj, p)) return false;
        }
    if (ref_lengths != ctrl_lengths) return false;
    if (ref_buckets != ctrl_buckets) return false;
    return true;
}

bool criterion10_cutoff_procedure() {
    GoldenRun& run = golden_run();
    DetectionConfig dc;
    dc.seed = run.config.seed;
    const std::size_t full = run.corpus.trajectories.size();
    auto sweep = stability_sweep(run.corpus, dc, {full}, {5, 10, 20, 40, 64}, 2, 13);
    for (double v : sweep.jaccard_matrix[0])
        if (v != 1.0) return false;
    for (std::size_t i = 1; i < sweep.coverage_curve.size(); ++i)
        if (sweep.coverage_curve[i] < sweep.coverage_curve[i - 1] - 1e-15) return false;
    if (!approx(sweep.coverage_curve.back(), 1.0, 1e-9)) return false;

    SweepResult shaped;
    shaped.sizes = {50, 100, 200, 400};
    shaped.ks = {25, 50, 100, 150, 200};
    shaped.jaccard_matrix.assign(4, {0.90, 0.81, 0.72, 0.62, 0.57});
    shaped.coverage_curve = {0.30, 0.49, 0.60, 0.70, 0.80};
    auto chosen = choose_k(shaped, 0.70, 0.50);
    return chosen.k == 100 && !chosen.fallback;
}

bool criterion11_reproducibility() {
    const std::string dir1 = (fs::temp_directory_path() / "rockscope_accept_run1").string();
    const std::string dir2 = (fs::temp_directory_path() / "rockscope_accept_run2").string();
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    const std::vector<std::string> stages{"simulate", "detect", "sweep",  "gradgeom",
                                          "knockout", "mask",   "train",  "report"};
    for (const std::string& dir : {dir1, dir2}) {
        for (const auto& stage : stages) {
            CliOptions options;
            options.command = stage;
            options.out_dir = dir;
            options.quiet = true;
            if (run_stage(options) != 0) return false;
        }
    }
    // every non-manifest output must have an identical digest across runs
    std::map<std::string, std::string> d1, d2;
    for (const auto& entry : fs::directory_iterator(dir1)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("manifest_", 0) == 0) continue;  // manifests embed run paths
        d1[name] = Sha256::of_file(entry.path().string());
    }
    for (const auto& entry : fs::directory_iterator(dir2)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("manifest_", 0) == 0) continue;
        d2[name] = Sha256::of_file(entry.path().string());
    }
    return !d1.empty() && d1 == d2;
}

}  // namespace

int main() {
    std::printf("rockscope acceptance suite\n");
    criterion(1, "exact statistical quantities (Bonferroni, BH, exact binomials)",
              criterion1_exact_statistics);
    criterion(2, "reverse-KL logit gradient matches finite differences", criterion2_gradient_oracle);
    criterion(3, "contribution decomposition identity on the golden corpus",
              criterion3_contribution_identity);
    criterion(4, "sum of R(v) equals total post-checkpoint loss on random corpora",
              criterion4_loss_decomposition);
    criterion(5, "planted-rock detection: top-20 recall/precision and brute-force tally",
              criterion5_planted_detection);
    criterion(6, "persistence gap: rare high-KL reduction exceeds planted by 20 points",
              criterion6_persistence_gap);
    criterion(7, "knockout soundness: planted pillar, exact phantom nulls, calibration",
              criterion7_knockout_soundness);
    criterion(8, "paired bootstrap null calibration within [0.02, 0.09]",
              criterion8_bootstrap_calibration);
    criterion(9, "reweighting contracts: identity, bit-exact freeze, exact term counts, histograms",
              criterion9_reweighting_contracts);
    criterion(10, "cutoff procedure: full-corpus Jaccard, coverage curve, paper-shaped choose_k",
              criterion10_cutoff_procedure);
    criterion(11, "CLI stages re-run digest-identical", criterion11_reproducibility);

    if (failures == 0) {
        std::printf("all criteria passed\n");
        return 0;
    }
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
}
