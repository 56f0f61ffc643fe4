#ifndef ROCKSCOPE_GRADGEOM_HPP
#define ROCKSCOPE_GRADGEOM_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rockscope/stats.hpp"
#include "rockscope/trace.hpp"

namespace rockscope {

enum class TokenGroup { rock, rare_high_kl, random_control };

const char* to_string(TokenGroup g);

struct TokenGradientSummary {
    std::uint32_t token_id = 0;
    std::size_t n_occurrences = 0;
    std::vector<double> mean_gradient;  // vocabulary length
    double norm = 0.0;
    // Empty when the balanced direction or the mean gradient is zero; never a
    // propagated NaN.
    std::optional<double> cos_balanced;
    double contribution = 0.0;  // n * norm * cos (0 when cos is undefined)
    TokenGroup group = TokenGroup::random_control;
};

struct PersistenceRecord {
    std::uint32_t token_id = 0;
    TokenGroup group = TokenGroup::random_control;
    double kl_early = 0.0;
    double kl_late = 0.0;
    double delta_kl = 0.0;  // kl_late - kl_early
};

struct GroupPersistence {
    TokenGroup group = TokenGroup::rock;
    std::size_t n_tokens = 0;
    std::optional<TestResult> wilcoxon;  // empty when skipped or degenerate
    std::string status;                  // "ok", "no change", "skipped: fewer than 3 tokens"
    double median_delta = 0.0;
    double median_relative_reduction = 0.0;  // median of (early-late)/early over tokens with early>0
};

struct PersistenceAnalysis {
    std::vector<PersistenceRecord> records;
    std::vector<GroupPersistence> groups;
};

struct GroupComparison {
    double median_norm_a = 0.0;
    double median_norm_b = 0.0;
    TestResult mann_whitney_norms;
    std::optional<double> median_cos_a;
    std::optional<double> median_cos_b;
};

struct TokenEntropies {
    double teacher_entropy = 0.0;
    double student_entropy_pre = 0.0;
    double student_entropy_post = 0.0;
};

// Exact gradient of the reverse KL D(p||q) with respect to the student
// logits: g_k = p_k * ((ln p_k - ln q_k) - D). Inputs are floored at 1e-12
// and renormalized; components sum to zero by construction.
std::vector<double> reverse_kl_logit_gradient(std::span<const double> p, std::span<const double> q);

// Dense expansion of a truncated dist: tail mass spread uniformly over the
// omitted ids.
std::vector<double> expand_dist(const TruncatedDist& d, std::size_t vocab_size);

// Per-token mean logit-space gradients at `checkpoint` for the grouped
// tokens, plus cosine/contribution against G_balanced = sum of the mean
// gradients (each token type weighted equally). Grouped tokens with no
// dist-carrying occurrence are skipped and reported in `warnings`.
// By default the balanced direction sums over exactly the grouped types;
// `balance_over_all_types` widens it to every token type carrying dists.
std::vector<TokenGradientSummary> summarize_gradients(
    const Corpus& corpus, const std::string& checkpoint,
    const std::unordered_map<std::uint32_t, TokenGroup>& groups,
    std::vector<std::uint32_t>* warnings = nullptr, bool balance_over_all_types = false);

GroupComparison compare_groups(const std::vector<TokenGradientSummary>& summaries, TokenGroup group_a,
                               TokenGroup group_b);

// Per-token mean stored loss at the two checkpoints plus a per-group Wilcoxon
// signed-rank on the (early, late) pairs. Groups with fewer than 3 tokens are
// skipped; an all-zero-difference group is reported as "no change".
PersistenceAnalysis persistence_analysis(const Corpus& corpus, const std::string& early,
                                         const std::string& late,
                                         const std::unordered_map<std::uint32_t, TokenGroup>& groups);

// Default operationalization of the analysis groups: rocks from the
// detection stage; rare-high-KL = frequency below freq_percentile and
// mean KL at `kl_checkpoint` above kl_percentile; plus a seeded random
// control sample of the remaining tokens.
std::unordered_map<std::uint32_t, TokenGroup> build_analysis_groups(
    const Corpus& corpus, const std::string& kl_checkpoint,
    const std::unordered_set<std::uint32_t>& rock_set, double freq_percentile, double kl_percentile,
    std::size_t random_controls, std::uint64_t seed);

// Mean teacher/student distribution entropies per token type, averaged over
// occurrences that carry dists.
std::unordered_map<std::uint32_t, TokenEntropies> entropy_table(const Corpus& corpus,
                                                                const std::string& pre,
                                                                const std::string& post);

void write_gradient_csv(const std::vector<TokenGradientSummary>& summaries, const std::string& path);
void write_persistence_csv(const PersistenceAnalysis& analysis, const std::string& path);

}  // namespace rockscope

#endif
