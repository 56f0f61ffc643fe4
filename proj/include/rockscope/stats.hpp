#ifndef ROCKSCOPE_STATS_HPP
#define ROCKSCOPE_STATS_HPP

#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

namespace rockscope {

struct BootstrapResult {
    double point_estimate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double p_value = 1.0;
    std::size_t resamples = 0;
    std::uint64_t seed = 0;
};

enum class CorrectionMethod { bonferroni, benjamini_hochberg };

struct CorrectionReport {
    CorrectionMethod method = CorrectionMethod::bonferroni;
    double threshold_or_level = 0.0;  // per-test threshold for Bonferroni, q for BH
    std::vector<std::size_t> rejected;  // sorted hypothesis indices
};

struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;  // two-sided
};

// |a intersect b| / |a union b|; 1 when both sets are empty.
double jaccard(const std::unordered_set<std::uint32_t>& a, const std::unordered_set<std::uint32_t>& b);

// Sample Pearson correlation with two-sided p via the t-transform on n-2
// degrees of freedom. Throws StatError on n < 3 or zero variance.
TestResult pearson(std::span<const double> x, std::span<const double> y);

// Mann-Whitney U (first sample) with midrank ties. Exact enumeration over
// all label assignments when n1+n2 <= 10, otherwise normal approximation
// with tie correction and continuity correction.
TestResult mann_whitney(std::span<const double> a, std::span<const double> b);

// Wilcoxon signed-rank W+ on pre-post differences (zero differences dropped).
// Exact enumeration of sign patterns when the effective n <= 12, otherwise
// normal approximation with continuity correction. Throws StatError when all
// differences are zero.
TestResult wilcoxon_signed_rank(std::span<const double> pre, std::span<const double> post);

// Two-sided exact binomial p by equal-tail doubling:
// min(1, 2*min(P[X<=k], P[X>=k])) under Binomial(n, p0).
double binomial_two_sided(std::size_t k, std::size_t n, double p0);

// Percentile bootstrap on paired binary indicators. Point estimate is
// mean(treated) - mean(baseline); problem indices are resampled with
// replacement; p is the doubled tail fraction clamped to [2/resamples, 1].
// Deterministic per (inputs, seed, resamples).
BootstrapResult paired_bootstrap(std::span<const std::uint8_t> baseline,
                                 std::span<const std::uint8_t> treated, std::size_t resamples,
                                 std::uint64_t seed);

CorrectionReport bonferroni(std::span<const double> p_values, double alpha);

// Standard step-up rule p_(k) <= (k/m) q; rejects everything at or below the
// largest passing rank.
CorrectionReport benjamini_hochberg(std::span<const double> p_values, double q);

// Regularized incomplete beta I_x(a, b); exposed for the t-distribution tail
// and for cross-checks in tests.
double incomplete_beta(double a, double b, double x);

// Two-sided p for a t statistic with nu degrees of freedom.
double student_t_two_sided(double t, double nu);

// Standard normal CDF.
double normal_cdf(double z);

}  // namespace rockscope

#endif
