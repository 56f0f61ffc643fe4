#ifndef ROCKSCOPE_NUMERIC_HPP
#define ROCKSCOPE_NUMERIC_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <span>
#include <string>
#include <vector>

#include "rockscope/error.hpp"

namespace rockscope {

// Pairwise (cascade) summation. Deterministic for a fixed element order and
// used for every reduction whose result feeds a tolerance check.
inline double pairwise_sum(std::span<const double> xs) {
    const std::size_t n = xs.size();
    if (n == 0) return 0.0;
    if (n <= 8) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(xs.subspan(0, half)) + pairwise_sum(xs.subspan(half));
}

inline double median_of_sorted(std::span<const double> xs) {
    const std::size_t n = xs.size();
    if (n == 0) throw StatError("median of empty sequence");
    if (n % 2 == 1) return xs[n / 2];
    return 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return median_of_sorted(xs);
}

// Nearest-rank empirical quantile: the smallest element x such that at least
// p percent of the sample is <= x.
inline double percentile_nearest_rank(std::vector<double> xs, double p) {
    if (xs.empty()) throw StatError("percentile of empty sequence");
    if (!(p > 0.0 && p < 100.0)) throw ConfigError("percentile must lie in (0,100)");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    std::size_t rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    if (rank == 0) rank = 1;
    if (rank > n) rank = n;
    return xs[rank - 1];
}

// Linear-interpolation quantile over a sorted sample (numpy's default
// convention); used by the bootstrap percentile interval.
inline double quantile_interpolated(std::span<const double> sorted, double q) {
    const std::size_t n = sorted.size();
    if (n == 0) throw StatError("quantile of empty sequence");
    if (q <= 0.0) return sorted.front();
    if (q >= 1.0) return sorted.back();
    const double pos = q * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= n) return sorted[n - 1];
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

// Shortest decimal string that parses back to the same double, capped at 9
// significant digits. All float output in the canonical file formats goes
// through here so identical data serializes byte-identically.
inline std::string format_double(double v) {
    if (v == 0.0) return "0";  // normalizes -0
    char buf[64];
    for (int prec = 1; prec <= 9; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return std::string(buf);
    }
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

inline double l2_norm(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x * x;
    return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace rockscope

#endif
