#ifndef ROCKSCOPE_CUTOFF_HPP
#define ROCKSCOPE_CUTOFF_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "rockscope/detect.hpp"
#include "rockscope/trace.hpp"

namespace rockscope {

struct SweepResult {
    std::vector<std::size_t> sizes;  // subsample sizes n
    std::vector<std::size_t> ks;     // candidate cutoffs K
    // jaccard_matrix[i][j]: mean Jaccard of the top-ks[j] set computed on an
    // n=sizes[i] subsample against the full-corpus top-ks[j], over repeats.
    std::vector<std::vector<double>> jaccard_matrix;
    std::vector<double> coverage_curve;  // cumulative R-share at full corpus per K
    std::size_t chosen_k = 0;
    std::size_t repeats = 0;
    std::uint64_t seed = 0;
};

struct ChosenK {
    std::size_t k = 0;
    bool fallback = false;  // no K met both floors; scalarized pick
    double mean_jaccard = 0.0;
    double coverage = 0.0;
};

// (sum of top-K rock scores) / (sum of all rock scores) for each K; ties in
// the ranking break by token id ascending. Throws StatError when every score
// is zero.
std::vector<double> coverage_curve(const std::vector<TokenAggregate>& aggregates,
                                   const std::vector<std::size_t>& ks);

// For each (n, K, repeat): subsample n trajectories without replacement,
// recompute the stage-1 R(v) ranking on the sub-corpus and take the Jaccard
// of its top-K against the full-corpus top-K; the matrix holds means over
// repeats. Deterministic per seed.
SweepResult stability_sweep(const Corpus& corpus, const DetectionConfig& config,
                            const std::vector<std::size_t>& sizes, const std::vector<std::size_t>& ks,
                            std::size_t repeats, std::uint64_t seed);

// Largest K whose mean Jaccard (over sizes) and coverage both clear the
// floors; falls back to the best (normalized Jaccard + normalized coverage)/2
// with the fallback flag set when no K qualifies.
ChosenK choose_k(const SweepResult& sweep, double min_jaccard, double min_coverage);

// Top-K token ids by rock score (R), ties by id ascending.
std::vector<std::uint32_t> top_k_by_rock_score(const std::vector<TokenAggregate>& aggregates,
                                               std::size_t k);

void write_sweep_csv(const SweepResult& sweep, const std::string& jaccard_csv_path,
                     const std::string& coverage_csv_path);

}  // namespace rockscope

#endif
