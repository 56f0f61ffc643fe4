#include "rockscope/detect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"
#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"

namespace rockscope {

using nlohmann::json;

const char* to_string(TokenCategory c) {
    switch (c) {
        case TokenCategory::math_delimiter: return "math_delimiter";
        case TokenCategory::markdown_whitespace: return "markdown_whitespace";
        case TokenCategory::discourse_marker: return "discourse_marker";
        case TokenCategory::digit: return "digit";
        case TokenCategory::other: return "other";
    }
    return "other";
}

namespace {

TokenCategory category_from_string(const std::string& s) {
    if (s == "math_delimiter") return TokenCategory::math_delimiter;
    if (s == "markdown_whitespace") return TokenCategory::markdown_whitespace;
    if (s == "discourse_marker") return TokenCategory::discourse_marker;
    if (s == "digit") return TokenCategory::digit;
    return TokenCategory::other;
}

}  // namespace

TokenCategory categorize_token(const std::string& surface) {
    static const std::unordered_set<std::string> kMath = {"$",    "$$", "\\", "=", "^",
                                                          "{",    "}",  "(",  ")", "frac",
                                                          "sqrt", "\\frac", "\\sqrt"};
    static const std::unordered_set<std::string> kDiscourse = {"So",  "Let",  "We",    "But", "Now",
                                                               "Wait", "Then", "Since", "This"};
    if (kMath.count(surface)) return TokenCategory::math_delimiter;

    // Whitespace-only strings and common markdown structure tokens.
    bool all_ws = !surface.empty();
    for (char ch : surface)
        if (ch != ' ' && ch != '\n' && ch != '\t' && ch != '\r') all_ws = false;
    if (all_ws || surface.find('\n') != std::string::npos) return TokenCategory::markdown_whitespace;
    if (surface == "**" || surface == "###" || surface == "---" || surface == "*" || surface == "##")
        return TokenCategory::markdown_whitespace;

    // Tokenizers often carry a leading space on word pieces.
    std::string stripped = surface;
    while (!stripped.empty() && (stripped.front() == ' ' || stripped.front() == '\t'))
        stripped.erase(stripped.begin());
    if (kDiscourse.count(stripped)) return TokenCategory::discourse_marker;
    if (stripped.size() == 1 && stripped[0] >= '0' && stripped[0] <= '9') return TokenCategory::digit;
    return TokenCategory::other;
}

std::vector<TokenAggregate> aggregate_scores(const Corpus& corpus, const std::string& pre,
                                             const std::string& post) {
    if (!corpus.has_checkpoint(pre)) throw Error("missing checkpoint: " + pre);
    if (!corpus.has_checkpoint(post)) throw Error("missing checkpoint: " + post);

    std::unordered_map<std::uint32_t, std::vector<double>> pre_losses, post_losses;
    for (const auto& t : corpus.trajectories) {
        const auto& lp = t.losses.at(pre);
        const auto& lq = t.losses.at(post);
        for (std::size_t i = 0; i < t.tokens.size(); ++i) {
            pre_losses[t.tokens[i]].push_back(lp[i]);
            post_losses[t.tokens[i]].push_back(lq[i]);
        }
    }

    std::vector<std::uint32_t> ids;
    ids.reserve(pre_losses.size());
    for (const auto& [id, _] : pre_losses) ids.push_back(id);
    std::sort(ids.begin(), ids.end());

    std::vector<TokenAggregate> out;
    out.reserve(ids.size());
    for (std::uint32_t id : ids) {
        auto& lp = pre_losses[id];
        auto& lq = post_losses[id];
        // canonical (sorted) accumulation: permutation-invariant sums
        std::sort(lp.begin(), lp.end());
        std::sort(lq.begin(), lq.end());
        TokenAggregate agg;
        agg.token_id = id;
        agg.freq = lq.size();
        const double f = static_cast<double>(agg.freq);
        agg.mean_loss_pre = pairwise_sum(lp) / f;
        agg.mean_loss_post = pairwise_sum(lq) / f;
        agg.rock_score = agg.mean_loss_post * f;
        if (id < corpus.vocabulary.size()) agg.category = categorize_token(corpus.vocabulary.id_to_string[id]);
        out.push_back(agg);
    }
    return out;
}

namespace {

std::vector<std::pair<std::uint32_t, std::uint32_t>> window_fingerprint(
    const std::vector<std::uint32_t>& tokens, std::size_t pos, std::size_t radius) {
    std::map<std::uint32_t, std::uint32_t> bag;
    const std::size_t lo = pos >= radius ? pos - radius : 0;
    const std::size_t hi = std::min(tokens.size() - 1, pos + radius);
    for (std::size_t i = lo; i <= hi; ++i) {
        if (i == pos) continue;
        ++bag[tokens[i]];
    }
    return {bag.begin(), bag.end()};
}

double resolve_threshold(const Threshold& th, const std::vector<double>& losses) {
    if (th.mode == Threshold::Mode::absolute) return th.value;
    if (!(th.value > 0.0 && th.value < 100.0))
        throw ConfigError("percentile threshold outside (0,100): " + std::to_string(th.value));
    return percentile_nearest_rank(losses, th.value);
}

}  // namespace

std::vector<OccurrenceRef> extract_ph_occurrences(const Corpus& corpus, const DetectionConfig& config,
                                                  double* resolved_pre, double* resolved_post) {
    const std::string& pre = config.pre_checkpoint;
    const std::string& post = config.post_checkpoint;
    if (!corpus.has_checkpoint(pre)) throw Error("missing checkpoint: " + pre);
    if (!corpus.has_checkpoint(post)) throw Error("missing checkpoint: " + post);

    double tau_pre = config.tau_pre.value;
    double tau_post = config.tau_post.value;
    if (config.tau_pre.mode == Threshold::Mode::percentile ||
        config.tau_post.mode == Threshold::Mode::percentile) {
        std::vector<double> all_pre, all_post;
        all_pre.reserve(corpus.total_positions());
        all_post.reserve(corpus.total_positions());
        for (const auto& t : corpus.trajectories) {
            const auto& lp = t.losses.at(pre);
            const auto& lq = t.losses.at(post);
            all_pre.insert(all_pre.end(), lp.begin(), lp.end());
            all_post.insert(all_post.end(), lq.begin(), lq.end());
        }
        if (config.tau_pre.mode == Threshold::Mode::percentile)
            tau_pre = resolve_threshold(config.tau_pre, all_pre);
        if (config.tau_post.mode == Threshold::Mode::percentile)
            tau_post = resolve_threshold(config.tau_post, all_post);
    }
    if (resolved_pre) *resolved_pre = tau_pre;
    if (resolved_post) *resolved_post = tau_post;

    std::vector<OccurrenceRef> out;
    for (const auto& t : corpus.trajectories) {
        const auto& lp = t.losses.at(pre);
        const auto& lq = t.losses.at(post);
        for (std::size_t i = 0; i < t.tokens.size(); ++i) {
            if (lp[i] >= tau_pre && lq[i] >= tau_post) {
                OccurrenceRef ref;
                ref.trajectory_id = t.trajectory_id;
                ref.position = static_cast<std::uint32_t>(i);
                ref.token_id = t.tokens[i];
                ref.loss_pre = lp[i];
                ref.loss_post = lq[i];
                ref.fingerprint = window_fingerprint(t.tokens, i, config.window_radius);
                out.push_back(std::move(ref));
            }
        }
    }
    return out;
}

double context_similarity(const OccurrenceRef& a, const OccurrenceRef& b) {
    if (a.fingerprint.empty() && b.fingerprint.empty()) return 1.0;
    double min_sum = 0.0, max_sum = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.fingerprint.size() || j < b.fingerprint.size()) {
        if (j >= b.fingerprint.size() ||
            (i < a.fingerprint.size() && a.fingerprint[i].first < b.fingerprint[j].first)) {
            max_sum += a.fingerprint[i].second;
            ++i;
        } else if (i >= a.fingerprint.size() || b.fingerprint[j].first < a.fingerprint[i].first) {
            max_sum += b.fingerprint[j].second;
            ++j;
        } else {
            min_sum += std::min(a.fingerprint[i].second, b.fingerprint[j].second);
            max_sum += std::max(a.fingerprint[i].second, b.fingerprint[j].second);
            ++i;
            ++j;
        }
    }
    if (max_sum == 0.0) return 1.0;
    return min_sum / max_sum;
}

std::vector<double> consistency_scores(const std::vector<OccurrenceRef>& occs_of_v, double gamma) {
    const std::size_t n = occs_of_v.size();
    std::vector<double> rho(n, 0.0);
    if (n < 2) return rho;  // singleton: no recurring pattern to witness
    std::vector<std::size_t> matches(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (context_similarity(occs_of_v[i], occs_of_v[j]) >= gamma) {
                ++matches[i];
                ++matches[j];
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        rho[i] = static_cast<double>(matches[i]) / static_cast<double>(n - 1);
    return rho;
}

DetectionReport select_rock_tokens(const Corpus& corpus, const DetectionConfig& config) {
    DetectionReport report;
    report.config = config;
    report.aggregates = aggregate_scores(corpus, config.pre_checkpoint, config.post_checkpoint);

    std::vector<OccurrenceRef> phs =
        extract_ph_occurrences(corpus, config, &report.resolved_tau_pre, &report.resolved_tau_post);

    std::unordered_map<std::uint32_t, std::vector<OccurrenceRef>> by_token;
    for (auto& ref : phs) by_token[ref.token_id].push_back(std::move(ref));

    std::unordered_map<std::uint32_t, std::size_t> ph_counts, rock_counts;
    std::unordered_map<std::uint32_t, std::vector<OccurrenceRef>> retained_by_token;
    for (auto& [token, occs] : by_token) {
        ph_counts[token] = occs.size();
        std::vector<OccurrenceRef>* work = &occs;
        std::vector<OccurrenceRef> sample;
        const bool capped = config.pairwise_cap > 0 && occs.size() > config.pairwise_cap;
        if (capped) {
            SplitMix64 rng(SplitMix64::derive(config.seed, 0x9000ULL + token));
            auto idx = sample_without_replacement(occs.size(), config.pairwise_cap, rng);
            std::sort(idx.begin(), idx.end());
            sample.reserve(idx.size());
            for (std::size_t i : idx) sample.push_back(occs[i]);
            work = &sample;
            report.capped_tokens.push_back(token);
        }
        const std::vector<double> rho = consistency_scores(*work, config.gamma);
        std::vector<OccurrenceRef> retained;
        for (std::size_t i = 0; i < work->size(); ++i)
            if (rho[i] >= config.eta) retained.push_back((*work)[i]);
        std::size_t rock_count = retained.size();
        if (capped) {
            // Extrapolate the retained fraction from the subsample back to the
            // full PH set; the retained refs themselves stay subsampled.
            const double ratio = static_cast<double>(retained.size()) / static_cast<double>(work->size());
            rock_count = std::min(occs.size(),
                                  static_cast<std::size_t>(std::llround(ratio * static_cast<double>(occs.size()))));
        }
        rock_counts[token] = rock_count;
        retained_by_token[token] = std::move(retained);
    }
    std::sort(report.capped_tokens.begin(), report.capped_tokens.end());

    for (auto& agg : report.aggregates) {
        auto it = ph_counts.find(agg.token_id);
        agg.ph_count = it == ph_counts.end() ? 0 : it->second;
        auto rit = rock_counts.find(agg.token_id);
        agg.rock_occurrences = rit == rock_counts.end() ? 0 : rit->second;
        agg.ccr = agg.freq == 0 ? 0.0
                                : static_cast<double>(agg.rock_occurrences) / static_cast<double>(agg.freq);
        agg.rock_score_ctx = agg.rock_score * agg.ccr;
    }

    std::sort(report.aggregates.begin(), report.aggregates.end(),
              [](const TokenAggregate& a, const TokenAggregate& b) {
                  if (a.rock_score_ctx != b.rock_score_ctx) return a.rock_score_ctx > b.rock_score_ctx;
                  return a.token_id < b.token_id;
              });

    if (config.selection.mode == Selection::Mode::score_threshold) {
        for (const auto& agg : report.aggregates)
            if (agg.rock_score_ctx >= config.selection.tau_r && agg.rock_score_ctx > 0.0)
                report.rock_set.insert(agg.token_id);
    } else {
        // Top-K over tokens with a positive context-aware score: a token with
        // no retained rock occurrence is not a rock token no matter its rank.
        std::size_t taken = 0;
        for (const auto& agg : report.aggregates) {
            if (taken >= config.selection.k) break;
            if (agg.rock_score_ctx <= 0.0) break;
            report.rock_set.insert(agg.token_id);
            ++taken;
        }
    }

    for (const auto& [token, refs] : retained_by_token) {
        if (!report.rock_set.count(token)) continue;
        report.rock_occurrence_refs.insert(report.rock_occurrence_refs.end(), refs.begin(), refs.end());
    }
    std::sort(report.rock_occurrence_refs.begin(), report.rock_occurrence_refs.end(),
              [](const OccurrenceRef& a, const OccurrenceRef& b) {
                  if (a.trajectory_id != b.trajectory_id) return a.trajectory_id < b.trajectory_id;
                  return a.position < b.position;
              });

    report.densities.reserve(corpus.trajectories.size());
    std::vector<double> density_copy;
    for (const auto& t : corpus.trajectories) {
        if (t.tokens.empty()) {
            report.densities.push_back(0.0);
            continue;
        }
        std::size_t hits = 0;
        for (std::uint32_t tok : t.tokens)
            if (report.rock_set.count(tok)) ++hits;
        report.densities.push_back(static_cast<double>(hits) / static_cast<double>(t.tokens.size()));
    }
    report.median_density = report.densities.empty() ? 0.0 : median(report.densities);
    return report;
}

std::unordered_set<std::uint32_t> freq_matched_controls(const DetectionReport& report,
                                                        const std::unordered_set<std::uint32_t>& excluded,
                                                        std::uint64_t seed) {
    std::unordered_set<std::uint32_t> controls;
    if (report.rock_set.empty()) return controls;

    auto bucket_of = [](std::size_t freq) {
        int b = 0;
        while (freq > 1) {
            freq >>= 1;
            ++b;
        }
        return b;
    };

    std::unordered_map<int, std::vector<std::uint32_t>> candidates_by_bucket;
    for (const auto& agg : report.aggregates) {
        if (report.rock_set.count(agg.token_id) || excluded.count(agg.token_id)) continue;
        candidates_by_bucket[bucket_of(agg.freq)].push_back(agg.token_id);
    }
    for (auto& [_, v] : candidates_by_bucket) std::sort(v.begin(), v.end());

    std::vector<std::pair<std::uint32_t, int>> rocks;  // (token, bucket), id-sorted
    for (const auto& agg : report.aggregates)
        if (report.rock_set.count(agg.token_id)) rocks.emplace_back(agg.token_id, bucket_of(agg.freq));
    std::sort(rocks.begin(), rocks.end());

    SplitMix64 rng(SplitMix64::derive(seed, 0xC011ULL));
    for (const auto& [rock_id, bucket] : rocks) {
        auto& pool = candidates_by_bucket[bucket];
        if (pool.empty())
            throw SamplingError("frequency stratum exhausted for log2 bucket " + std::to_string(bucket) +
                                " (rock token " + std::to_string(rock_id) + ")");
        const std::size_t pick = static_cast<std::size_t>(rng.next_below(pool.size()));
        controls.insert(pool[pick]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    return controls;
}

namespace {

json occurrence_to_json(const OccurrenceRef& ref) {
    json fp = json::array();
    for (const auto& [id, count] : ref.fingerprint) fp.push_back({id, count});
    return json{{"trajectory_id", ref.trajectory_id},
                {"position", ref.position},
                {"token_id", ref.token_id},
                {"loss_pre", ref.loss_pre},
                {"loss_post", ref.loss_post},
                {"fingerprint", fp}};
}

OccurrenceRef occurrence_from_json(const json& j) {
    OccurrenceRef ref;
    ref.trajectory_id = j.at("trajectory_id").get<std::uint64_t>();
    ref.position = j.at("position").get<std::uint32_t>();
    ref.token_id = j.at("token_id").get<std::uint32_t>();
    ref.loss_pre = j.at("loss_pre").get<double>();
    ref.loss_post = j.at("loss_post").get<double>();
    for (const auto& e : j.at("fingerprint"))
        ref.fingerprint.emplace_back(e.at(0).get<std::uint32_t>(), e.at(1).get<std::uint32_t>());
    return ref;
}

json threshold_to_json(const Threshold& t) {
    return json{{"mode", t.mode == Threshold::Mode::absolute ? "absolute" : "percentile"},
                {"value", t.value}};
}

Threshold threshold_from_json(const json& j) {
    Threshold t;
    t.mode = j.at("mode").get<std::string>() == "absolute" ? Threshold::Mode::absolute
                                                           : Threshold::Mode::percentile;
    t.value = j.at("value").get<double>();
    return t;
}

}  // namespace

void write_detection_report(const DetectionReport& report, const Vocabulary& vocab,
                            const std::string& json_path, const std::string& csv_path) {
    json agg_rows = json::array();
    for (const auto& a : report.aggregates) {
        agg_rows.push_back({{"token_id", a.token_id},
                            {"freq", a.freq},
                            {"mean_loss_pre", a.mean_loss_pre},
                            {"mean_loss_post", a.mean_loss_post},
                            {"rock_score", a.rock_score},
                            {"ph_count", a.ph_count},
                            {"rock_occurrences", a.rock_occurrences},
                            {"ccr", a.ccr},
                            {"rock_score_ctx", a.rock_score_ctx},
                            {"category", to_string(a.category)}});
    }
    std::vector<std::uint32_t> rock_sorted(report.rock_set.begin(), report.rock_set.end());
    std::sort(rock_sorted.begin(), rock_sorted.end());
    json occ_rows = json::array();
    for (const auto& ref : report.rock_occurrence_refs) occ_rows.push_back(occurrence_to_json(ref));

    json doc{{"schema", 1},
             {"config",
              {{"tau_pre", threshold_to_json(report.config.tau_pre)},
               {"tau_post", threshold_to_json(report.config.tau_post)},
               {"pre_checkpoint", report.config.pre_checkpoint},
               {"post_checkpoint", report.config.post_checkpoint},
               {"window_radius", report.config.window_radius},
               {"gamma", report.config.gamma},
               {"eta", report.config.eta},
               {"selection_mode",
                report.config.selection.mode == Selection::Mode::top_k ? "top_k" : "score_threshold"},
               {"selection_k", report.config.selection.k},
               {"selection_tau_r", report.config.selection.tau_r},
               {"pairwise_cap", report.config.pairwise_cap},
               {"seed", report.config.seed}}},
             {"resolved_tau_pre", report.resolved_tau_pre},
             {"resolved_tau_post", report.resolved_tau_post},
             {"aggregates", agg_rows},
             {"rock_set", rock_sorted},
             {"rock_occurrences", occ_rows},
             {"densities", report.densities},
             {"median_density", report.median_density},
             {"capped_tokens", report.capped_tokens}};

    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw IoError("cannot write detection report: " + json_path);
    out << doc.dump(2) << '\n';

    if (!csv_path.empty()) {
        std::ofstream csv(csv_path, std::ios::binary);
        if (!csv) throw IoError("cannot write detection csv: " + csv_path);
        csv << "token_id,surface,freq,mean_loss_pre,mean_loss_post,rock_score,ph_count,"
               "rock_occurrences,ccr,rock_score_ctx,category,in_rock_set\n";
        for (const auto& a : report.aggregates) {
            std::string surface = a.token_id < vocab.size() ? vocab.id_to_string[a.token_id] : "";
            csv << a.token_id << ',' << json(surface).dump() << ',' << a.freq << ','
                << format_double(a.mean_loss_pre) << ',' << format_double(a.mean_loss_post) << ','
                << format_double(a.rock_score) << ',' << a.ph_count << ',' << a.rock_occurrences << ','
                << format_double(a.ccr) << ',' << format_double(a.rock_score_ctx) << ','
                << to_string(a.category) << ',' << (report.rock_set.count(a.token_id) ? 1 : 0) << '\n';
        }
    }
}

DetectionReport load_detection_report(const std::string& json_path) {
    std::ifstream in(json_path);
    if (!in) throw IoError("cannot open detection report: " + json_path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(e.what(), 1);
    }
    DetectionReport report;
    const auto& cfg = doc.at("config");
    report.config.tau_pre = threshold_from_json(cfg.at("tau_pre"));
    report.config.tau_post = threshold_from_json(cfg.at("tau_post"));
    report.config.pre_checkpoint = cfg.at("pre_checkpoint").get<std::string>();
    report.config.post_checkpoint = cfg.at("post_checkpoint").get<std::string>();
    report.config.window_radius = cfg.at("window_radius").get<std::size_t>();
    report.config.gamma = cfg.at("gamma").get<double>();
    report.config.eta = cfg.at("eta").get<double>();
    report.config.selection.mode = cfg.at("selection_mode").get<std::string>() == "top_k"
                                       ? Selection::Mode::top_k
                                       : Selection::Mode::score_threshold;
    report.config.selection.k = cfg.at("selection_k").get<std::size_t>();
    report.config.selection.tau_r = cfg.at("selection_tau_r").get<double>();
    report.config.pairwise_cap = cfg.at("pairwise_cap").get<std::size_t>();
    report.config.seed = cfg.at("seed").get<std::uint64_t>();
    report.resolved_tau_pre = doc.at("resolved_tau_pre").get<double>();
    report.resolved_tau_post = doc.at("resolved_tau_post").get<double>();
    for (const auto& row : doc.at("aggregates")) {
        TokenAggregate a;
        a.token_id = row.at("token_id").get<std::uint32_t>();
        a.freq = row.at("freq").get<std::size_t>();
        a.mean_loss_pre = row.at("mean_loss_pre").get<double>();
        a.mean_loss_post = row.at("mean_loss_post").get<double>();
        a.rock_score = row.at("rock_score").get<double>();
        a.ph_count = row.at("ph_count").get<std::size_t>();
        a.rock_occurrences = row.at("rock_occurrences").get<std::size_t>();
        a.ccr = row.at("ccr").get<double>();
        a.rock_score_ctx = row.at("rock_score_ctx").get<double>();
        a.category = category_from_string(row.at("category").get<std::string>());
        report.aggregates.push_back(a);
    }
    for (const auto& v : doc.at("rock_set")) report.rock_set.insert(v.get<std::uint32_t>());
    for (const auto& row : doc.at("rock_occurrences"))
        report.rock_occurrence_refs.push_back(occurrence_from_json(row));
    for (const auto& v : doc.at("densities")) report.densities.push_back(v.get<double>());
    report.median_density = doc.at("median_density").get<double>();
    for (const auto& v : doc.at("capped_tokens")) report.capped_tokens.push_back(v.get<std::uint32_t>());
    return report;
}

}  // namespace rockscope
