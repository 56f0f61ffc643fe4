#include "rockscope/reweight.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"

namespace rockscope {

using nlohmann::json;

const char* to_string(Regime r) {
    switch (r) {
        case Regime::baseline: return "baseline";
        case Regime::rock_freeze: return "rock_freeze";
        case Regime::freq_matched_random: return "freq_matched_random";
    }
    return "baseline";
}

bool WindowSet::contains(std::uint64_t trajectory_id, std::uint32_t position) const {
    auto it = intervals.find(trajectory_id);
    if (it == intervals.end()) return false;
    // first interval with lo > position, then check its predecessor
    const auto& v = it->second;
    auto ub = std::upper_bound(v.begin(), v.end(), position,
                               [](std::uint32_t pos, const auto& iv) { return pos < iv.first; });
    if (ub == v.begin()) return false;
    --ub;
    return position >= ub->first && position <= ub->second;
}

std::size_t WindowSet::total_covered() const {
    std::size_t n = 0;
    for (const auto& [_, v] : intervals)
        for (const auto& [lo, hi] : v) n += hi - lo + 1;
    return n;
}

namespace {

std::vector<std::pair<std::uint32_t, std::uint32_t>> merge_intervals(
    std::vector<std::pair<std::uint32_t, std::uint32_t>> ivs) {
    std::sort(ivs.begin(), ivs.end());
    std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
    for (const auto& iv : ivs) {
        if (!out.empty() && iv.first <= out.back().second + 1 && iv.first >= out.back().first) {
            out.back().second = std::max(out.back().second, iv.second);
        } else {
            out.push_back(iv);
        }
    }
    return out;
}

}  // namespace

WindowSet rock_windows(const Corpus& corpus, const DetectionReport& detection, std::size_t radius) {
    std::unordered_map<std::uint64_t, std::size_t> length_by_id;
    for (const auto& t : corpus.trajectories) length_by_id[t.trajectory_id] = t.length();

    std::map<std::uint64_t, std::vector<std::pair<std::uint32_t, std::uint32_t>>> raw;
    for (const auto& ref : detection.rock_occurrence_refs) {
        auto it = length_by_id.find(ref.trajectory_id);
        if (it == length_by_id.end() || it->second == 0) continue;
        const std::uint32_t len = static_cast<std::uint32_t>(it->second);
        const std::uint32_t lo =
            ref.position >= radius ? ref.position - static_cast<std::uint32_t>(radius) : 0;
        const std::uint32_t hi =
            std::min<std::uint32_t>(len - 1, ref.position + static_cast<std::uint32_t>(radius));
        raw[ref.trajectory_id].emplace_back(lo, hi);
    }
    WindowSet ws;
    for (auto& [id, ivs] : raw) ws.intervals[id] = merge_intervals(std::move(ivs));
    return ws;
}

std::vector<WeightMask> build_mask(const Corpus& corpus, const std::unordered_set<std::uint32_t>& rock_set,
                                   const WindowSet& windows, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda outside [0,1]");
    std::vector<WeightMask> out;
    out.reserve(corpus.trajectories.size());
    for (const auto& t : corpus.trajectories) {
        WeightMask mask;
        mask.trajectory_id = t.trajectory_id;
        mask.lambda = lambda;
        mask.regime = lambda == 1.0 ? Regime::baseline : Regime::rock_freeze;
        mask.weights.resize(t.length(), 1.0);
        std::size_t masked = 0;
        for (std::size_t i = 0; i < t.length(); ++i) {
            const bool hit = rock_set.count(t.tokens[i]) ||
                             windows.contains(t.trajectory_id, static_cast<std::uint32_t>(i));
            if (hit) {
                mask.weights[i] = lambda;
                ++masked;
            }
        }
        mask.masked_fraction = t.length() == 0 ? 0.0 : static_cast<double>(masked) / static_cast<double>(t.length());
        out.push_back(std::move(mask));
    }
    return out;
}

WindowSet freq_matched_random_windows(const Corpus& corpus, const WindowSet& reference,
                                      const std::unordered_set<std::uint32_t>& rock_set,
                                      std::uint64_t seed) {
    WindowSet control;
    if (reference.intervals.empty()) return control;

    std::unordered_map<std::uint64_t, const TrajectoryTrace*> by_id;
    std::unordered_map<std::uint32_t, std::size_t> freq;
    for (const auto& t : corpus.trajectories) {
        by_id[t.trajectory_id] = &t;
        for (std::uint32_t tok : t.tokens) ++freq[tok];
    }
    auto bucket_of = [&](std::uint32_t token) {
        std::size_t f = freq.count(token) ? freq[token] : 0;
        int b = 0;
        while (f > 1) {
            f >>= 1;
            ++b;
        }
        return b;
    };

    // Reference windows as (length, center-token bucket), deterministic order.
    struct RefWindow {
        std::uint64_t trajectory_id;
        std::uint32_t lo, hi;
    };
    std::vector<RefWindow> refs;
    for (const auto& [id, ivs] : reference.intervals)
        for (const auto& [lo, hi] : ivs) refs.push_back({id, lo, hi});
    std::sort(refs.begin(), refs.end(), [](const RefWindow& a, const RefWindow& b) {
        if (a.trajectory_id != b.trajectory_id) return a.trajectory_id < b.trajectory_id;
        return a.lo < b.lo;
    });

    // Candidate centers per (length, bucket): positions where an equal-length
    // window fits unclipped, lands outside every reference window, and whose
    // center token is not a rock token.
    std::map<std::uint64_t, std::vector<std::pair<std::uint32_t, std::uint32_t>>> placed;
    SplitMix64 rng(SplitMix64::derive(seed, 0xF12EULL));

    std::map<std::pair<std::uint32_t, int>, std::vector<std::pair<std::uint64_t, std::uint32_t>>> pools;
    auto pool_for = [&](std::uint32_t length, int bucket)
        -> std::vector<std::pair<std::uint64_t, std::uint32_t>>& {
        const auto key = std::make_pair(length, bucket);
        auto it = pools.find(key);
        if (it != pools.end()) return it->second;
        std::vector<std::pair<std::uint64_t, std::uint32_t>> pool;
        const std::uint32_t left = (length - 1) / 2;
        const std::uint32_t right = length - 1 - left;
        for (const auto& t : corpus.trajectories) {
            if (t.length() < length) continue;
            for (std::uint32_t center = left; center + right < t.length(); ++center) {
                const std::uint32_t lo = center - left;
                const std::uint32_t hi = center + right;
                if (rock_set.count(t.tokens[center])) continue;
                if (bucket_of(t.tokens[center]) != bucket) continue;
                bool clash = false;
                for (std::uint32_t p = lo; p <= hi && !clash; ++p)
                    if (reference.contains(t.trajectory_id, p)) clash = true;
                if (!clash) pool.emplace_back(t.trajectory_id, center);
            }
        }
        return pools.emplace(key, std::move(pool)).first->second;
    };

    // Controls are placed mutually disjoint as well, so the emitted interval
    // set carries exactly the sampled length histogram.
    auto overlaps_placed = [&](std::uint64_t traj_id, std::uint32_t lo, std::uint32_t hi) {
        auto it = placed.find(traj_id);
        if (it == placed.end()) return false;
        for (const auto& [plo, phi] : it->second)
            if (lo <= phi && plo <= hi) return true;
        return false;
    };
    for (const auto& ref : refs) {
        const std::uint32_t length = ref.hi - ref.lo + 1;
        const std::uint32_t center_pos = ref.lo + (length - 1) / 2;
        const TrajectoryTrace* traj = by_id.at(ref.trajectory_id);
        const int bucket = bucket_of(traj->tokens[center_pos]);
        auto& pool = pool_for(length, bucket);
        const std::uint32_t left = (length - 1) / 2;
        bool done = false;
        while (!pool.empty()) {
            const std::size_t pick = static_cast<std::size_t>(rng.next_below(pool.size()));
            const auto [traj_id, center] = pool[pick];
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
            const std::uint32_t lo = center - left;
            const std::uint32_t hi = lo + length - 1;
            if (overlaps_placed(traj_id, lo, hi)) continue;
            placed[traj_id].emplace_back(lo, hi);
            done = true;
            break;
        }
        if (!done)
            throw SamplingError("no feasible control window for length " + std::to_string(length) +
                                ", log2 frequency bucket " + std::to_string(bucket));
    }
    for (auto& [id, ivs] : placed) {
        std::sort(ivs.begin(), ivs.end());
        control.intervals[id] = std::move(ivs);
    }
    return control;
}

WeightedLoss weighted_loss(const Corpus& corpus, const std::vector<WeightMask>& masks,
                           const std::string& checkpoint) {
    if (!corpus.has_checkpoint(checkpoint)) throw Error("missing checkpoint: " + checkpoint);
    std::unordered_map<std::uint64_t, const WeightMask*> mask_by_id;
    for (const auto& m : masks) mask_by_id[m.trajectory_id] = &m;

    WeightedLoss result;
    std::vector<double> totals;
    for (const auto& t : corpus.trajectories) {
        auto it = mask_by_id.find(t.trajectory_id);
        if (it == mask_by_id.end())
            throw ValidationError("weighted_loss: no mask for trajectory " +
                                  std::to_string(t.trajectory_id));
        const WeightMask& mask = *it->second;
        if (mask.weights.size() != t.length())
            throw ValidationError("weighted_loss: mask length mismatch for trajectory " +
                                  std::to_string(t.trajectory_id));
        const auto& losses = t.losses.at(checkpoint);
        std::vector<double> terms;
        terms.reserve(t.length());
        for (std::size_t i = 0; i < t.length(); ++i) {
            if (mask.weights[i] == 0.0) continue;  // skipped entirely
            terms.push_back(mask.weights[i] * losses[i]);
        }
        result.active_term_count += terms.size();
        const double traj_total = pairwise_sum(terms);
        result.per_trajectory.push_back(traj_total);
        totals.push_back(traj_total);
    }
    result.total = pairwise_sum(totals);
    return result;
}

void write_masks(const std::vector<WeightMask>& masks, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write masks: " + path);
    for (const auto& m : masks) {
        out << "{\"trajectory_id\":" << m.trajectory_id << ",\"regime\":\"" << to_string(m.regime)
            << "\",\"lambda\":" << format_double(m.lambda) << ",\"rle\":[";
        // run-length encoding of the weight vector
        bool first = true;
        std::size_t i = 0;
        while (i < m.weights.size()) {
            std::size_t j = i;
            while (j + 1 < m.weights.size() && m.weights[j + 1] == m.weights[i]) ++j;
            if (!first) out << ',';
            first = false;
            out << '[' << format_double(m.weights[i]) << ',' << (j - i + 1) << ']';
            i = j + 1;
        }
        out << "]}\n";
    }
}

std::vector<WeightMask> load_masks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open masks: " + path);
    std::vector<WeightMask> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
        WeightMask m;
        m.trajectory_id = j.at("trajectory_id").get<std::uint64_t>();
        const std::string regime = j.at("regime").get<std::string>();
        m.regime = regime == "rock_freeze"          ? Regime::rock_freeze
                   : regime == "freq_matched_random" ? Regime::freq_matched_random
                                                     : Regime::baseline;
        m.lambda = j.at("lambda").get<double>();
        std::size_t masked = 0;
        for (const auto& run : j.at("rle")) {
            const double w = run.at(0).get<double>();
            const std::size_t count = run.at(1).get<std::size_t>();
            for (std::size_t i = 0; i < count; ++i) m.weights.push_back(w);
            if (w == m.lambda && m.lambda != 1.0) masked += count;
        }
        m.masked_fraction =
            m.weights.empty() ? 0.0 : static_cast<double>(masked) / static_cast<double>(m.weights.size());
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace rockscope
