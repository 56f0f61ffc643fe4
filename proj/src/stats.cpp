#include "rockscope/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"

namespace rockscope {

double jaccard(const std::unordered_set<std::uint32_t>& a, const std::unordered_set<std::uint32_t>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (std::uint32_t v : a)
        if (b.count(v)) ++inter;
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

namespace {

double log_gamma(double x) { return std::lgamma(x); }

// Continued fraction for the regularized incomplete beta (Lentz's method).
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front =
        log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double nu) {
    if (!std::isfinite(t)) return 0.0;
    const double x = nu / (nu + t * t);
    return incomplete_beta(nu / 2.0, 0.5, x);
}

TestResult pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw StatError("pearson: length mismatch");
    const std::size_t n = x.size();
    if (n < 3) throw StatError("pearson: need at least 3 observations");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) throw StatError("pearson: undefined correlation (degenerate variance)");
    double r = sxy / std::sqrt(sxx * syy);
    if (r > 1.0) r = 1.0;
    if (r < -1.0) r = -1.0;
    const double nu = static_cast<double>(n - 2);
    double p;
    if (1.0 - r * r <= 0.0) {
        p = 0.0;
    } else {
        const double t = r * std::sqrt(nu / (1.0 - r * r));
        p = student_t_two_sided(t, nu);
    }
    return {r, p};
}

namespace {

// Midranks of the pooled sample; also returns the tie-group sizes.
std::vector<double> midranks(const std::vector<double>& pooled_sorted, std::vector<std::size_t>* ties) {
    const std::size_t n = pooled_sorted.size();
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && pooled_sorted[j + 1] == pooled_sorted[i]) ++j;
        const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) rank[k] = mid;
        if (ties && j > i) ties->push_back(j - i + 1);
        i = j + 1;
    }
    return rank;
}

double mann_whitney_u(std::span<const double> a, std::span<const double> b) {
    // Pair counting with half credit for ties; exact for small inputs and the
    // same quantity the rank formulation yields.
    double u = 0.0;
    for (double x : a)
        for (double y : b) {
            if (x > y)
                u += 1.0;
            else if (x == y)
                u += 0.5;
        }
    return u;
}

TestResult mann_whitney_exact(std::span<const double> a, std::span<const double> b, double u_obs) {
    std::vector<double> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const std::size_t n = pooled.size();
    const std::size_t n1 = a.size();
    // Enumerate all C(n, n1) assignments of pooled values to the first group.
    std::vector<std::size_t> comb(n1);
    for (std::size_t i = 0; i < n1; ++i) comb[i] = i;
    std::size_t total = 0, count_le = 0, count_ge = 0;
    std::vector<double> ga(n1), gb(n - n1);
    for (;;) {
        std::vector<bool> in_a(n, false);
        for (std::size_t i : comb) in_a[i] = true;
        std::size_t ia = 0, ib = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (in_a[i])
                ga[ia++] = pooled[i];
            else
                gb[ib++] = pooled[i];
        }
        const double u = mann_whitney_u(ga, gb);
        ++total;
        if (u <= u_obs + 1e-12) ++count_le;
        if (u >= u_obs - 1e-12) ++count_ge;
        // next combination
        std::size_t k = n1;
        while (k > 0) {
            --k;
            if (comb[k] != k + n - n1) {
                ++comb[k];
                for (std::size_t j = k + 1; j < n1; ++j) comb[j] = comb[j - 1] + 1;
                break;
            }
            if (k == 0) {
                const double p_le = static_cast<double>(count_le) / static_cast<double>(total);
                const double p_ge = static_cast<double>(count_ge) / static_cast<double>(total);
                return {u_obs, std::min(1.0, 2.0 * std::min(p_le, p_ge))};
            }
        }
    }
}

}  // namespace

TestResult mann_whitney(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw StatError("mann_whitney: empty sample");
    const double u = mann_whitney_u(a, b);
    const std::size_t n1 = a.size(), n2 = b.size();
    if (n1 + n2 <= 10) return mann_whitney_exact(a, b, u);

    std::vector<double> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    std::sort(pooled.begin(), pooled.end());
    std::vector<std::size_t> ties;
    midranks(pooled, &ties);
    const double n = static_cast<double>(n1 + n2);
    double tie_term = 0.0;
    for (std::size_t t : ties) {
        const double td = static_cast<double>(t);
        tie_term += td * td * td - td;
    }
    const double mu = static_cast<double>(n1) * static_cast<double>(n2) / 2.0;
    const double var = static_cast<double>(n1) * static_cast<double>(n2) / 12.0 *
                       ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if (var <= 0.0) return {u, 1.0};  // all values identical
    const double sd = std::sqrt(var);
    const double diff = std::fabs(u - mu);
    const double z = std::max(0.0, diff - 0.5) / sd;  // continuity correction
    const double p = std::min(1.0, 2.0 * (1.0 - normal_cdf(z)));
    return {u, p};
}

TestResult wilcoxon_signed_rank(std::span<const double> pre, std::span<const double> post) {
    if (pre.size() != post.size()) throw StatError("wilcoxon: length mismatch");
    std::vector<double> diffs;
    diffs.reserve(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) {
        const double d = pre[i] - post[i];
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.empty()) throw StatError("wilcoxon: all differences zero (degenerate sample)");
    const std::size_t n = diffs.size();

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return std::fabs(diffs[i]) < std::fabs(diffs[j]); });
    std::vector<double> abs_sorted(n);
    for (std::size_t i = 0; i < n; ++i) abs_sorted[i] = std::fabs(diffs[order[i]]);
    std::vector<std::size_t> ties;
    const std::vector<double> ranks_sorted = midranks(abs_sorted, &ties);
    std::vector<double> rank_of(n);
    for (std::size_t i = 0; i < n; ++i) rank_of[order[i]] = ranks_sorted[i];

    double w_plus = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (diffs[i] > 0.0) w_plus += rank_of[i];

    if (n <= 12) {
        // Exact null distribution over all 2^n sign patterns with these ranks.
        const std::size_t patterns = std::size_t{1} << n;
        std::size_t count_le = 0, count_ge = 0;
        for (std::size_t mask = 0; mask < patterns; ++mask) {
            double w = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                if (mask & (std::size_t{1} << i)) w += rank_of[i];
            if (w <= w_plus + 1e-12) ++count_le;
            if (w >= w_plus - 1e-12) ++count_ge;
        }
        const double p_le = static_cast<double>(count_le) / static_cast<double>(patterns);
        const double p_ge = static_cast<double>(count_ge) / static_cast<double>(patterns);
        return {w_plus, std::min(1.0, 2.0 * std::min(p_le, p_ge))};
    }

    const double nd = static_cast<double>(n);
    const double mu = nd * (nd + 1.0) / 4.0;
    double tie_term = 0.0;
    for (std::size_t t : ties) {
        const double td = static_cast<double>(t);
        tie_term += td * td * td - td;
    }
    const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
    const double sd = std::sqrt(var);
    const double diff = std::fabs(w_plus - mu);
    const double z = std::max(0.0, diff - 0.5) / sd;
    const double p = std::min(1.0, 2.0 * (1.0 - normal_cdf(z)));
    return {w_plus, p};
}

namespace {

// P[X = i] terms under Binomial(n, p0), evaluated in log space for stability
// except for p0 = 0.5 where powers of two stay exact in doubles.
double binomial_pmf(std::size_t i, std::size_t n, double p0) {
    if (p0 == 0.5) {
        double c = 1.0;
        for (std::size_t j = 0; j < i; ++j)
            c = c * static_cast<double>(n - j) / static_cast<double>(j + 1);
        return c * std::pow(0.5, static_cast<double>(n));
    }
    const double ln = log_gamma(static_cast<double>(n + 1)) - log_gamma(static_cast<double>(i + 1)) -
                      log_gamma(static_cast<double>(n - i + 1)) +
                      static_cast<double>(i) * std::log(p0) +
                      static_cast<double>(n - i) * std::log1p(-p0);
    return std::exp(ln);
}

}  // namespace

double binomial_two_sided(std::size_t k, std::size_t n, double p0) {
    if (k > n) throw StatError("binomial_two_sided: k > n");
    if (!(p0 > 0.0 && p0 < 1.0)) throw StatError("binomial_two_sided: p0 outside (0,1)");
    double lower = 0.0, upper = 0.0;
    for (std::size_t i = 0; i <= k; ++i) lower += binomial_pmf(i, n, p0);
    for (std::size_t i = k; i <= n; ++i) upper += binomial_pmf(i, n, p0);
    return std::min(1.0, 2.0 * std::min(lower, upper));
}

BootstrapResult paired_bootstrap(std::span<const std::uint8_t> baseline,
                                 std::span<const std::uint8_t> treated, std::size_t resamples,
                                 std::uint64_t seed) {
    if (baseline.size() != treated.size()) throw StatError("paired_bootstrap: length mismatch");
    if (baseline.empty()) throw StatError("paired_bootstrap: empty input");
    if (resamples == 0) throw StatError("paired_bootstrap: zero resamples");
    const std::size_t n = baseline.size();

    // Precompute per-problem deltas; resampled means only need these.
    std::vector<double> delta(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        delta[i] = static_cast<double>(treated[i]) - static_cast<double>(baseline[i]);
        sum += delta[i];
    }
    const double point = sum / static_cast<double>(n);

    std::vector<double> boot(resamples);
    std::size_t count_le = 0, count_ge = 0;
    for (std::size_t r = 0; r < resamples; ++r) {
        // Per-resample substream keyed by (seed, r): order-independent.
        SplitMix64 rng(SplitMix64::derive(seed, r));
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += delta[rng.next_below(n)];
        boot[r] = s / static_cast<double>(n);
        if (boot[r] <= 0.0) ++count_le;
        if (boot[r] >= 0.0) ++count_ge;
    }
    std::sort(boot.begin(), boot.end());

    BootstrapResult res;
    res.point_estimate = point;
    res.ci_low = quantile_interpolated(boot, 0.025);
    res.ci_high = quantile_interpolated(boot, 0.975);
    // Percentile intervals are quantiles of the resampled deltas; clamp so the
    // documented invariant ci_low <= point <= ci_high holds even at the edges
    // of tiny discrete samples.
    res.ci_low = std::min(res.ci_low, point);
    res.ci_high = std::max(res.ci_high, point);
    const double b = static_cast<double>(resamples);
    double p = 2.0 * std::min(static_cast<double>(count_le) / b, static_cast<double>(count_ge) / b);
    p = std::min(1.0, std::max(p, 2.0 / b));
    res.p_value = p;
    res.resamples = resamples;
    res.seed = seed;
    return res;
}

CorrectionReport bonferroni(std::span<const double> p_values, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw StatError("bonferroni: alpha outside (0,1)");
    CorrectionReport rep;
    rep.method = CorrectionMethod::bonferroni;
    const double m = static_cast<double>(p_values.size());
    rep.threshold_or_level = p_values.empty() ? alpha : alpha / m;
    for (std::size_t i = 0; i < p_values.size(); ++i)
        if (p_values[i] < rep.threshold_or_level) rep.rejected.push_back(i);
    return rep;
}

CorrectionReport benjamini_hochberg(std::span<const double> p_values, double q) {
    if (!(q > 0.0 && q < 1.0)) throw StatError("benjamini_hochberg: q outside (0,1)");
    CorrectionReport rep;
    rep.method = CorrectionMethod::benjamini_hochberg;
    rep.threshold_or_level = q;
    const std::size_t m = p_values.size();
    if (m == 0) return rep;
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });
    std::size_t cut = 0;  // number of rejected ranks
    for (std::size_t k = m; k >= 1; --k) {
        if (p_values[order[k - 1]] <= static_cast<double>(k) / static_cast<double>(m) * q) {
            cut = k;
            break;
        }
    }
    for (std::size_t i = 0; i < cut; ++i) rep.rejected.push_back(order[i]);
    std::sort(rep.rejected.begin(), rep.rejected.end());
    return rep;
}

}  // namespace rockscope
