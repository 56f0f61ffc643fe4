#ifndef ROCKSCOPE_KNOCKOUT_HPP
#define ROCKSCOPE_KNOCKOUT_HPP

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rockscope/detect.hpp"
#include "rockscope/gradgeom.hpp"
#include "rockscope/stats.hpp"

namespace rockscope {

// A decoding policy is a conditional distribution over the full vocabulary
// given the token history (prompt included).
class DecodingPolicy {
  public:
    virtual ~DecodingPolicy() = default;
    virtual std::size_t vocab_size() const = 0;
    virtual void distribution(std::span<const std::uint32_t> context, std::vector<double>& out) const = 0;
};

// Masks the banned ids and renormalizes; bans of zero-probability tokens
// leave the distribution bitwise unchanged so paired evaluations of phantom
// candidates stay exactly identical. When masking removes essentially all
// mass the policy emits the fallback token and counts a starvation event.
class MaskedPolicy : public DecodingPolicy {
  public:
    MaskedPolicy(const DecodingPolicy& base, std::unordered_set<std::uint32_t> banned,
                 std::uint32_t fallback_token);

    std::size_t vocab_size() const override { return base_.vocab_size(); }
    void distribution(std::span<const std::uint32_t> context, std::vector<double>& out) const override;
    std::size_t starvation_events() const { return starvation_events_; }

  private:
    const DecodingPolicy& base_;
    std::vector<bool> banned_;
    bool any_banned_ = false;
    std::uint32_t fallback_;
    mutable std::size_t starvation_events_ = 0;
};

// Supplies paired per-prompt binary correctness indicators for a policy.
// Identical seeds must yield identical per-prompt random substreams so that
// arms sharing a seed are exactly paired.
class EvalEnvironment {
  public:
    virtual ~EvalEnvironment() = default;
    virtual std::size_t prompt_count() const = 0;
    virtual const DecodingPolicy& base_policy() const = 0;
    virtual std::uint32_t fallback_token() const = 0;
    virtual std::vector<std::uint8_t> evaluate(const DecodingPolicy& policy, std::uint64_t seed) const = 0;
};

enum class KnockoutCategory { strong_pillar, neutral, strong_stumbling };

const char* to_string(KnockoutCategory c);

struct KnockoutRecord {
    std::uint32_t token_id = 0;
    double delta_token = 0.0;
    double delta_window = 0.0;
    BootstrapResult bootstrap_token;
    BootstrapResult bootstrap_window;
    KnockoutCategory category = KnockoutCategory::neutral;
    double epsilon = 0.01;
    std::vector<std::uint8_t> indicators_baseline;  // retained for audit
    std::vector<std::uint8_t> indicators_token;
    std::vector<std::uint8_t> indicators_window;
    std::vector<std::uint32_t> window_tokens;  // the companion set that was banned
};

struct PredictorCorrelation {
    std::string predictor;
    std::optional<TestResult> correlation;  // empty on degenerate variance
    std::string note;
};

struct CensusReport {
    std::size_t n_candidates = 0;
    std::size_t strong_pillars = 0;
    std::size_t neutral = 0;
    std::size_t strong_stumbling = 0;
    double fraction_pillars = 0.0;
    double fraction_neutral = 0.0;
    double fraction_stumbling = 0.0;
    double baseline_accuracy = 0.0;
    std::size_t rejecting_negative = 0;  // bootstrap-rejecting candidates by delta sign
    std::size_t rejecting_positive = 0;
    double sign_test_p = 1.0;
    CorrectionReport bonferroni_report;
    CorrectionReport bh_report;
    std::vector<PredictorCorrelation> correlations;
    std::size_t core_rejecting_negative = 0;
    std::size_t core_rejecting_positive = 0;
    double core_sign_test_p = 1.0;
};

// Knockout policy: ban the given ids on top of the base policy.
std::unique_ptr<MaskedPolicy> knockout_policy(const DecodingPolicy& base,
                                              const std::unordered_set<std::uint32_t>& banned,
                                              std::uint32_t fallback_token);

// Companion set for the window-level knockout: every rock candidate whose
// retained rock occurrences' fingerprints reach similarity gamma against the
// candidate's own; always contains the candidate.
std::unordered_set<std::uint32_t> window_companion_set(const DetectionReport& report,
                                                       std::uint32_t candidate, double gamma);

struct MeasureOptions {
    std::size_t bootstrap_resamples = 10000;
    double alpha = 0.05;
    double epsilon = 0.01;
    std::uint64_t seed = 0;
};

// Evaluates the three paired arms (baseline, token knockout, window knockout)
// on the environment's prompt set and fills deltas plus bootstraps; the
// category is left to `categorize`.
KnockoutRecord measure_delta(const EvalEnvironment& env, std::uint32_t candidate,
                             const std::unordered_set<std::uint32_t>& window_tokens,
                             const MeasureOptions& options);

// Strong pillar iff min(delta_token, delta_window) <= -epsilon and the arm
// attaining the min rejects (doubled-tail p < alpha); symmetric at +epsilon
// for strong stumbling blocks.
KnockoutCategory categorize(const KnockoutRecord& record, double epsilon, double alpha = 0.05);

CensusReport census(const std::vector<KnockoutRecord>& records,
                    const std::unordered_set<std::uint32_t>& core_set, double alpha = 0.05,
                    double bh_q = 0.20);

// Pearson (r, p) of delta_token against the nine standard predictors.
// Throws Error when a candidate has no aggregate/entropy row; degenerate
// variance is reported per predictor instead of thrown.
std::vector<PredictorCorrelation> predictor_table(
    const std::vector<KnockoutRecord>& records, const std::vector<TokenAggregate>& aggregates,
    const std::unordered_map<std::uint32_t, TokenEntropies>& entropies);

void write_census_json(const CensusReport& report, const std::vector<KnockoutRecord>& records,
                       const std::string& path);
void write_knockout_csv(const std::vector<KnockoutRecord>& records, const std::string& path);

}  // namespace rockscope

#endif
