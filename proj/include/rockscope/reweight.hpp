#ifndef ROCKSCOPE_REWEIGHT_HPP
#define ROCKSCOPE_REWEIGHT_HPP

#include <cstdint>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "rockscope/detect.hpp"
#include "rockscope/trace.hpp"

namespace rockscope {

enum class Regime { baseline, rock_freeze, freq_matched_random };

const char* to_string(Regime r);

struct WeightMask {
    std::uint64_t trajectory_id = 0;
    std::vector<double> weights;  // every entry is lambda or 1
    Regime regime = Regime::baseline;
    double lambda = 1.0;
    double masked_fraction = 0.0;  // fraction of positions carrying lambda
};

// Per-trajectory sorted, merged inclusive position intervals.
struct WindowSet {
    std::map<std::uint64_t, std::vector<std::pair<std::uint32_t, std::uint32_t>>> intervals;

    bool contains(std::uint64_t trajectory_id, std::uint32_t position) const;
    std::size_t total_covered() const;
};

// [t-radius, t+radius] around every retained rock occurrence, clipped to the
// trajectory bounds and merged per trajectory.
WindowSet rock_windows(const Corpus& corpus, const DetectionReport& detection, std::size_t radius);

// Weight lambda where the token is in rock_set or the position is inside
// windows; 1 elsewhere.
std::vector<WeightMask> build_mask(const Corpus& corpus, const std::unordered_set<std::uint32_t>& rock_set,
                                   const WindowSet& windows, double lambda);

// Control windows whose length histogram equals the reference's exactly and
// whose center-token log2-frequency histogram matches bucket for bucket;
// placed disjoint from the reference windows, centers outside rock_set.
WindowSet freq_matched_random_windows(const Corpus& corpus, const WindowSet& reference,
                                      const std::unordered_set<std::uint32_t>& rock_set,
                                      std::uint64_t seed);

struct WeightedLoss {
    double total = 0.0;
    std::vector<double> per_trajectory;
    std::size_t active_term_count = 0;  // zero-weight positions are skipped entirely
};

WeightedLoss weighted_loss(const Corpus& corpus, const std::vector<WeightMask>& masks,
                           const std::string& checkpoint);

// Mask export, one record per line: trajectory id, regime, lambda and a
// run-length-encoded weight vector.
void write_masks(const std::vector<WeightMask>& masks, const std::string& path);
std::vector<WeightMask> load_masks(const std::string& path);

}  // namespace rockscope

#endif
