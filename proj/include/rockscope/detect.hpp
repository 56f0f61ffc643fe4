#ifndef ROCKSCOPE_DETECT_HPP
#define ROCKSCOPE_DETECT_HPP

#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rockscope/trace.hpp"

namespace rockscope {

enum class TokenCategory { math_delimiter, markdown_whitespace, discourse_marker, digit, other };

const char* to_string(TokenCategory c);

struct TokenAggregate {
    std::uint32_t token_id = 0;
    std::size_t freq = 0;
    double mean_loss_pre = 0.0;
    double mean_loss_post = 0.0;
    double rock_score = 0.0;       // mean_loss_post * freq
    std::size_t ph_count = 0;      // |O_PH(v)|
    std::size_t rock_occurrences = 0;  // |R(v)|
    double ccr = 0.0;              // rock_occurrences / freq
    double rock_score_ctx = 0.0;   // rock_score * ccr
    TokenCategory category = TokenCategory::other;
};

// A (trajectory, position) occurrence with its windowed-context fingerprint:
// a bag of token ids within the configured radius, center excluded.
struct OccurrenceRef {
    std::uint64_t trajectory_id = 0;
    std::uint32_t position = 0;
    std::uint32_t token_id = 0;
    double loss_pre = 0.0;
    double loss_post = 0.0;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> fingerprint;  // (id, count), id-sorted
};

struct Threshold {
    enum class Mode { absolute, percentile };
    Mode mode = Mode::percentile;
    double value = 80.0;
};

struct Selection {
    enum class Mode { score_threshold, top_k };
    Mode mode = Selection::Mode::top_k;
    double tau_r = 0.0;
    std::size_t k = 20;
};

struct DetectionConfig {
    Threshold tau_pre;
    Threshold tau_post;
    std::string pre_checkpoint = "pre";
    std::string post_checkpoint = "post";
    std::size_t window_radius = 5;  // w
    double gamma = 0.5;             // pairwise context-similarity threshold
    double eta = 0.3;               // consistency threshold on rho(o)
    Selection selection;
    std::size_t pairwise_cap = 2000;  // per-token subsample bound for the O(n^2) stage
    std::uint64_t seed = 0;
};

struct DetectionReport {
    DetectionConfig config;
    double resolved_tau_pre = 0.0;
    double resolved_tau_post = 0.0;
    std::vector<TokenAggregate> aggregates;  // sorted by rock_score_ctx desc, token id asc
    std::unordered_set<std::uint32_t> rock_set;
    // Retained context-consistent rock occurrences of rock-set tokens,
    // (trajectory, position)-sorted; the reweighting stage builds windows
    // from these.
    std::vector<OccurrenceRef> rock_occurrence_refs;
    std::vector<double> densities;  // per trajectory, in corpus order
    double median_density = 0.0;
    std::vector<std::uint32_t> capped_tokens;  // tokens whose PH set was subsampled
};

// Per-type frequency, mean losses and R(v); one entry per token type with at
// least one occurrence, token-id ascending. Accumulation sorts each token's
// losses before summing so results are independent of trajectory order.
std::vector<TokenAggregate> aggregate_scores(const Corpus& corpus, const std::string& pre,
                                             const std::string& post);

// Occurrences with loss_pre >= tau_pre and loss_post >= tau_post, in
// (trajectory, position) order. Percentile thresholds are resolved against
// the per-checkpoint global loss distribution first.
std::vector<OccurrenceRef> extract_ph_occurrences(const Corpus& corpus, const DetectionConfig& config,
                                                  double* resolved_pre = nullptr,
                                                  double* resolved_post = nullptr);

// Generalized Jaccard over fingerprint multisets: sum(min)/sum(max); 1 when
// both fingerprints are empty.
double context_similarity(const OccurrenceRef& a, const OccurrenceRef& b);

// rho(o) per occurrence: the fraction of the *other* occurrences whose
// similarity reaches gamma. A singleton set scores 0.
std::vector<double> consistency_scores(const std::vector<OccurrenceRef>& occs_of_v, double gamma);

DetectionReport select_rock_tokens(const Corpus& corpus, const DetectionConfig& config);

// One control token per rock token from the same floor(log2(freq)) bucket,
// excluding rock tokens, `excluded`, and already-drawn controls.
std::unordered_set<std::uint32_t> freq_matched_controls(const DetectionReport& report,
                                                        const std::unordered_set<std::uint32_t>& excluded,
                                                        std::uint64_t seed);

TokenCategory categorize_token(const std::string& surface);

void write_detection_report(const DetectionReport& report, const Vocabulary& vocab,
                            const std::string& json_path, const std::string& csv_path);
DetectionReport load_detection_report(const std::string& json_path);

}  // namespace rockscope

#endif
