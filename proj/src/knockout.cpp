#include "rockscope/knockout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"

namespace rockscope {

using nlohmann::json;

const char* to_string(KnockoutCategory c) {
    switch (c) {
        case KnockoutCategory::strong_pillar: return "strong_pillar";
        case KnockoutCategory::neutral: return "neutral";
        case KnockoutCategory::strong_stumbling: return "strong_stumbling";
    }
    return "neutral";
}

MaskedPolicy::MaskedPolicy(const DecodingPolicy& base, std::unordered_set<std::uint32_t> banned,
                           std::uint32_t fallback_token)
    : base_(base), banned_(base.vocab_size(), false), fallback_(fallback_token) {
    for (std::uint32_t id : banned) {
        if (id < banned_.size()) {
            banned_[id] = true;
            any_banned_ = true;
        }
    }
}

void MaskedPolicy::distribution(std::span<const std::uint32_t> context, std::vector<double>& out) const {
    base_.distribution(context, out);
    if (!any_banned_) return;
    double banned_mass = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (banned_[i]) banned_mass += out[i];
    if (banned_mass == 0.0) return;  // null mask: bitwise identical stream
    const double remaining = 1.0 - banned_mass;
    if (remaining <= 1e-9) {
        ++starvation_events_;
        std::fill(out.begin(), out.end(), 0.0);
        out[fallback_] = 1.0;
        return;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (banned_[i])
            out[i] = 0.0;
        else
            out[i] /= remaining;
    }
}

std::unique_ptr<MaskedPolicy> knockout_policy(const DecodingPolicy& base,
                                              const std::unordered_set<std::uint32_t>& banned,
                                              std::uint32_t fallback_token) {
    return std::make_unique<MaskedPolicy>(base, banned, fallback_token);
}

std::unordered_set<std::uint32_t> window_companion_set(const DetectionReport& report,
                                                       std::uint32_t candidate, double gamma) {
    std::unordered_set<std::uint32_t> companions{candidate};
    std::vector<const OccurrenceRef*> own;
    for (const auto& ref : report.rock_occurrence_refs)
        if (ref.token_id == candidate) own.push_back(&ref);
    if (own.empty()) return companions;
    for (const auto& ref : report.rock_occurrence_refs) {
        if (ref.token_id == candidate || companions.count(ref.token_id)) continue;
        for (const auto* mine : own) {
            if (context_similarity(*mine, ref) >= gamma) {
                companions.insert(ref.token_id);
                break;
            }
        }
    }
    return companions;
}

namespace {

double mean_indicator(std::span<const std::uint8_t> xs) {
    if (xs.empty()) return 0.0;
    std::size_t s = 0;
    for (std::uint8_t x : xs) s += x;
    return static_cast<double>(s) / static_cast<double>(xs.size());
}

}  // namespace

KnockoutRecord measure_delta(const EvalEnvironment& env, std::uint32_t candidate,
                             const std::unordered_set<std::uint32_t>& window_tokens,
                             const MeasureOptions& options) {
    if (env.prompt_count() == 0) throw ConfigError("measure_delta: zero prompts");

    KnockoutRecord rec;
    rec.token_id = candidate;
    rec.epsilon = options.epsilon;
    rec.window_tokens.assign(window_tokens.begin(), window_tokens.end());
    std::sort(rec.window_tokens.begin(), rec.window_tokens.end());

    // All three arms share the evaluation seed, so per-prompt substreams pair.
    const std::uint64_t eval_seed = SplitMix64::derive(options.seed, 0xE7A1ULL);
    rec.indicators_baseline = env.evaluate(env.base_policy(), eval_seed);

    auto token_arm = knockout_policy(env.base_policy(), {candidate}, env.fallback_token());
    rec.indicators_token = env.evaluate(*token_arm, eval_seed);

    std::unordered_set<std::uint32_t> window_all(window_tokens.begin(), window_tokens.end());
    window_all.insert(candidate);
    auto window_arm = knockout_policy(env.base_policy(), window_all, env.fallback_token());
    rec.indicators_window = env.evaluate(*window_arm, eval_seed);

    rec.delta_token = mean_indicator(rec.indicators_token) - mean_indicator(rec.indicators_baseline);
    rec.delta_window = mean_indicator(rec.indicators_window) - mean_indicator(rec.indicators_baseline);
    rec.bootstrap_token = paired_bootstrap(rec.indicators_baseline, rec.indicators_token,
                                           options.bootstrap_resamples,
                                           SplitMix64::derive(options.seed, 0xB001ULL));
    rec.bootstrap_window = paired_bootstrap(rec.indicators_baseline, rec.indicators_window,
                                            options.bootstrap_resamples,
                                            SplitMix64::derive(options.seed, 0xB002ULL));
    rec.category = categorize(rec, options.epsilon, options.alpha);
    return rec;
}

KnockoutCategory categorize(const KnockoutRecord& record, double epsilon, double alpha) {
    // The arm attaining the extreme carries the test; ties prefer the token arm.
    const bool token_min = record.delta_token <= record.delta_window;
    const double min_delta = token_min ? record.delta_token : record.delta_window;
    const BootstrapResult& min_boot = token_min ? record.bootstrap_token : record.bootstrap_window;
    if (min_delta <= -epsilon && min_boot.p_value < alpha) return KnockoutCategory::strong_pillar;

    const bool token_max = record.delta_token >= record.delta_window;
    const double max_delta = token_max ? record.delta_token : record.delta_window;
    const BootstrapResult& max_boot = token_max ? record.bootstrap_token : record.bootstrap_window;
    if (max_delta >= epsilon && max_boot.p_value < alpha) return KnockoutCategory::strong_stumbling;
    return KnockoutCategory::neutral;
}

CensusReport census(const std::vector<KnockoutRecord>& records,
                    const std::unordered_set<std::uint32_t>& core_set, double alpha, double bh_q) {
    if (records.empty()) throw StatError("census: no records");
    CensusReport rep;
    rep.n_candidates = records.size();

    std::vector<double> p_values;
    p_values.reserve(records.size());
    for (const auto& rec : records) {
        switch (rec.category) {
            case KnockoutCategory::strong_pillar: ++rep.strong_pillars; break;
            case KnockoutCategory::neutral: ++rep.neutral; break;
            case KnockoutCategory::strong_stumbling: ++rep.strong_stumbling; break;
        }
        // per-candidate p for the multiplicity corrections: most sensitive arm
        p_values.push_back(std::min(rec.bootstrap_token.p_value, rec.bootstrap_window.p_value));

        const bool token_extreme = std::fabs(rec.delta_token) >= std::fabs(rec.delta_window);
        const double extreme = token_extreme ? rec.delta_token : rec.delta_window;
        const BootstrapResult& boot = token_extreme ? rec.bootstrap_token : rec.bootstrap_window;
        if (boot.p_value < alpha && std::fabs(extreme) >= rec.epsilon) {
            if (extreme < 0.0) {
                ++rep.rejecting_negative;
                if (core_set.count(rec.token_id)) ++rep.core_rejecting_negative;
            } else if (extreme > 0.0) {
                ++rep.rejecting_positive;
                if (core_set.count(rec.token_id)) ++rep.core_rejecting_positive;
            }
        }
        rep.baseline_accuracy += mean_indicator(rec.indicators_baseline);
    }
    rep.baseline_accuracy /= static_cast<double>(records.size());
    const double n = static_cast<double>(records.size());
    rep.fraction_pillars = static_cast<double>(rep.strong_pillars) / n;
    rep.fraction_neutral = static_cast<double>(rep.neutral) / n;
    rep.fraction_stumbling = static_cast<double>(rep.strong_stumbling) / n;

    const std::size_t rejecting = rep.rejecting_negative + rep.rejecting_positive;
    rep.sign_test_p = rejecting == 0 ? 1.0 : binomial_two_sided(rep.rejecting_negative, rejecting, 0.5);
    const std::size_t core_rejecting = rep.core_rejecting_negative + rep.core_rejecting_positive;
    rep.core_sign_test_p =
        core_rejecting == 0 ? 1.0 : binomial_two_sided(rep.core_rejecting_negative, core_rejecting, 0.5);

    rep.bonferroni_report = bonferroni(p_values, alpha);
    rep.bh_report = benjamini_hochberg(p_values, bh_q);
    return rep;
}

std::vector<PredictorCorrelation> predictor_table(
    const std::vector<KnockoutRecord>& records, const std::vector<TokenAggregate>& aggregates,
    const std::unordered_map<std::uint32_t, TokenEntropies>& entropies) {
    std::unordered_map<std::uint32_t, const TokenAggregate*> agg_by_id;
    for (const auto& a : aggregates) agg_by_id[a.token_id] = &a;

    std::vector<double> deltas;
    std::vector<std::vector<double>> columns(9);
    static const char* kNames[9] = {"frequency",     "rock_count",        "rock_rate",
                                    "pre_kl",        "post_kl",           "kl_improvement",
                                    "teacher_entropy", "student_entropy_pre", "student_entropy_post"};
    for (const auto& rec : records) {
        auto it = agg_by_id.find(rec.token_id);
        if (it == agg_by_id.end())
            throw Error("predictor_table: no aggregate row for token " + std::to_string(rec.token_id));
        auto et = entropies.find(rec.token_id);
        if (et == entropies.end())
            throw Error("predictor_table: no entropy row for token " + std::to_string(rec.token_id));
        const TokenAggregate& a = *it->second;
        deltas.push_back(rec.delta_token);
        columns[0].push_back(static_cast<double>(a.freq));
        columns[1].push_back(static_cast<double>(a.rock_occurrences));
        columns[2].push_back(a.ccr);
        columns[3].push_back(a.mean_loss_pre);
        columns[4].push_back(a.mean_loss_post);
        columns[5].push_back(a.mean_loss_pre - a.mean_loss_post);
        columns[6].push_back(et->second.teacher_entropy);
        columns[7].push_back(et->second.student_entropy_pre);
        columns[8].push_back(et->second.student_entropy_post);
    }

    std::vector<PredictorCorrelation> out;
    for (std::size_t i = 0; i < 9; ++i) {
        PredictorCorrelation pc;
        pc.predictor = kNames[i];
        try {
            pc.correlation = pearson(deltas, columns[i]);
        } catch (const StatError& e) {
            pc.note = e.what();
        }
        out.push_back(std::move(pc));
    }
    return out;
}

void write_census_json(const CensusReport& report, const std::vector<KnockoutRecord>& records,
                       const std::string& path) {
    json correlations = json::array();
    for (const auto& pc : report.correlations) {
        json row{{"predictor", pc.predictor}};
        if (pc.correlation) {
            row["r"] = pc.correlation->statistic;
            row["p"] = pc.correlation->p_value;
        } else {
            row["note"] = pc.note;
        }
        correlations.push_back(row);
    }
    json recs = json::array();
    for (const auto& r : records) {
        recs.push_back({{"token_id", r.token_id},
                        {"delta_token", r.delta_token},
                        {"delta_window", r.delta_window},
                        {"p_token", r.bootstrap_token.p_value},
                        {"p_window", r.bootstrap_window.p_value},
                        {"category", to_string(r.category)}});
    }
    json doc{{"schema", 1},
             {"n_candidates", report.n_candidates},
             {"strong_pillars", report.strong_pillars},
             {"neutral", report.neutral},
             {"strong_stumbling", report.strong_stumbling},
             {"fraction_pillars", report.fraction_pillars},
             {"fraction_neutral", report.fraction_neutral},
             {"fraction_stumbling", report.fraction_stumbling},
             {"baseline_accuracy", report.baseline_accuracy},
             {"rejecting_negative", report.rejecting_negative},
             {"rejecting_positive", report.rejecting_positive},
             {"sign_test_p", report.sign_test_p},
             {"core_rejecting_negative", report.core_rejecting_negative},
             {"core_rejecting_positive", report.core_rejecting_positive},
             {"core_sign_test_p", report.core_sign_test_p},
             {"bonferroni_threshold", report.bonferroni_report.threshold_or_level},
             {"bonferroni_rejections", report.bonferroni_report.rejected.size()},
             {"bh_q", report.bh_report.threshold_or_level},
             {"bh_rejections", report.bh_report.rejected.size()},
             {"correlations", correlations},
             {"records", recs}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write census: " + path);
    out << doc.dump(2) << '\n';
}

void write_knockout_csv(const std::vector<KnockoutRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write knockout csv: " + path);
    out << "token_id,delta_token,delta_window,p_token,p_window,ci_token_low,ci_token_high,category\n";
    for (const auto& r : records) {
        out << r.token_id << ',' << format_double(r.delta_token) << ',' << format_double(r.delta_window)
            << ',' << format_double(r.bootstrap_token.p_value) << ','
            << format_double(r.bootstrap_window.p_value) << ',' << format_double(r.bootstrap_token.ci_low)
            << ',' << format_double(r.bootstrap_token.ci_high) << ',' << to_string(r.category) << '\n';
    }
}

}  // namespace rockscope
