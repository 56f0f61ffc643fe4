#include "rockscope/cutoff.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"
#include "rockscope/stats.hpp"

namespace rockscope {

std::vector<std::uint32_t> top_k_by_rock_score(const std::vector<TokenAggregate>& aggregates,
                                               std::size_t k) {
    std::vector<const TokenAggregate*> sorted;
    sorted.reserve(aggregates.size());
    for (const auto& a : aggregates) sorted.push_back(&a);
    std::sort(sorted.begin(), sorted.end(), [](const TokenAggregate* a, const TokenAggregate* b) {
        if (a->rock_score != b->rock_score) return a->rock_score > b->rock_score;
        return a->token_id < b->token_id;
    });
    std::vector<std::uint32_t> out;
    out.reserve(std::min(k, sorted.size()));
    for (std::size_t i = 0; i < sorted.size() && i < k; ++i) out.push_back(sorted[i]->token_id);
    return out;
}

std::vector<double> coverage_curve(const std::vector<TokenAggregate>& aggregates,
                                   const std::vector<std::size_t>& ks) {
    if (aggregates.empty()) throw StatError("coverage_curve: no aggregates");
    std::vector<double> scores;
    scores.reserve(aggregates.size());
    for (const auto& a : aggregates) scores.push_back(a.rock_score);
    std::sort(scores.begin(), scores.end(), std::greater<double>());
    const double total = pairwise_sum(scores);
    if (total <= 0.0) throw StatError("coverage_curve: all rock scores are zero");

    std::vector<double> prefix(scores.size() + 1, 0.0);
    for (std::size_t i = 0; i < scores.size(); ++i) prefix[i + 1] = prefix[i] + scores[i];

    std::vector<double> out;
    out.reserve(ks.size());
    for (std::size_t k : ks) {
        const std::size_t kk = std::min(k, scores.size());
        out.push_back(prefix[kk] / total);
    }
    return out;
}

SweepResult stability_sweep(const Corpus& corpus, const DetectionConfig& config,
                            const std::vector<std::size_t>& sizes, const std::vector<std::size_t>& ks,
                            std::size_t repeats, std::uint64_t seed) {
    if (ks.empty()) throw ConfigError("stability_sweep: no candidate cutoffs");
    if (repeats == 0) throw ConfigError("stability_sweep: repeats must be >= 1");
    for (std::size_t n : sizes)
        if (n > corpus.trajectories.size())
            throw ConfigError("stability_sweep: subsample size " + std::to_string(n) +
                              " exceeds corpus size " + std::to_string(corpus.trajectories.size()));

    const auto full = aggregate_scores(corpus, config.pre_checkpoint, config.post_checkpoint);
    std::vector<std::unordered_set<std::uint32_t>> full_topk;
    full_topk.reserve(ks.size());
    for (std::size_t k : ks) {
        const auto ids = top_k_by_rock_score(full, k);
        full_topk.emplace_back(ids.begin(), ids.end());
    }

    SweepResult sweep;
    sweep.sizes = sizes;
    sweep.ks = ks;
    sweep.repeats = repeats;
    sweep.seed = seed;
    sweep.coverage_curve = coverage_curve(full, ks);
    sweep.jaccard_matrix.assign(sizes.size(), std::vector<double>(ks.size(), 0.0));

    for (std::size_t si = 0; si < sizes.size(); ++si) {
        for (std::size_t r = 0; r < repeats; ++r) {
            // substream per (size index, repeat): cells are order-independent
            SplitMix64 rng(SplitMix64::derive(seed, si * 1000003ULL + r));
            const auto idx = sample_without_replacement(corpus.trajectories.size(), sizes[si], rng);
            Corpus sub;
            sub.vocabulary = corpus.vocabulary;
            sub.checkpoints = corpus.checkpoints;
            sub.trajectories.reserve(idx.size());
            for (std::size_t i : idx) sub.trajectories.push_back(corpus.trajectories[i]);
            const auto sub_agg = aggregate_scores(sub, config.pre_checkpoint, config.post_checkpoint);
            for (std::size_t ki = 0; ki < ks.size(); ++ki) {
                const auto ids = top_k_by_rock_score(sub_agg, ks[ki]);
                const std::unordered_set<std::uint32_t> sub_set(ids.begin(), ids.end());
                sweep.jaccard_matrix[si][ki] += jaccard(sub_set, full_topk[ki]);
            }
        }
        for (double& cell : sweep.jaccard_matrix[si]) cell /= static_cast<double>(repeats);
    }
    return sweep;
}

ChosenK choose_k(const SweepResult& sweep, double min_jaccard, double min_coverage) {
    if (sweep.ks.empty()) throw ConfigError("choose_k: empty cutoff list");
    const std::size_t nk = sweep.ks.size();
    std::vector<double> mean_j(nk, 0.0);
    for (std::size_t ki = 0; ki < nk; ++ki) {
        for (std::size_t si = 0; si < sweep.sizes.size(); ++si) mean_j[ki] += sweep.jaccard_matrix[si][ki];
        if (!sweep.sizes.empty()) mean_j[ki] /= static_cast<double>(sweep.sizes.size());
    }

    ChosenK result;
    bool found = false;
    for (std::size_t ki = 0; ki < nk; ++ki) {
        if (mean_j[ki] >= min_jaccard && sweep.coverage_curve[ki] >= min_coverage) {
            if (!found || sweep.ks[ki] > result.k) {
                result.k = sweep.ks[ki];
                result.mean_jaccard = mean_j[ki];
                result.coverage = sweep.coverage_curve[ki];
                found = true;
            }
        }
    }
    if (found) return result;

    // Infeasible: scalarize with min-max normalized criteria.
    auto normalize = [](const std::vector<double>& xs) {
        double lo = xs[0], hi = xs[0];
        for (double x : xs) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        std::vector<double> out(xs.size(), 1.0);
        if (hi > lo)
            for (std::size_t i = 0; i < xs.size(); ++i) out[i] = (xs[i] - lo) / (hi - lo);
        return out;
    };
    const auto nj = normalize(mean_j);
    const auto nc = normalize(sweep.coverage_curve);
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t ki = 0; ki < nk; ++ki) {
        const double score = 0.5 * (nj[ki] + nc[ki]);
        if (score > best_score + 1e-15) {
            best_score = score;
            best = ki;
        }
    }
    result.k = sweep.ks[best];
    result.fallback = true;
    result.mean_jaccard = mean_j[best];
    result.coverage = sweep.coverage_curve[best];
    return result;
}

void write_sweep_csv(const SweepResult& sweep, const std::string& jaccard_csv_path,
                     const std::string& coverage_csv_path) {
    std::ofstream jc(jaccard_csv_path, std::ios::binary);
    if (!jc) throw IoError("cannot write sweep csv: " + jaccard_csv_path);
    jc << "n";
    for (std::size_t k : sweep.ks) jc << ",K" << k;
    jc << '\n';
    for (std::size_t si = 0; si < sweep.sizes.size(); ++si) {
        jc << sweep.sizes[si];
        for (double v : sweep.jaccard_matrix[si]) jc << ',' << format_double(v);
        jc << '\n';
    }

    std::ofstream cc(coverage_csv_path, std::ios::binary);
    if (!cc) throw IoError("cannot write coverage csv: " + coverage_csv_path);
    cc << "K,coverage\n";
    for (std::size_t ki = 0; ki < sweep.ks.size(); ++ki)
        cc << sweep.ks[ki] << ',' << format_double(sweep.coverage_curve[ki]) << '\n';
}

}  // namespace rockscope
