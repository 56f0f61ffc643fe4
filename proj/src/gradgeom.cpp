#include "rockscope/gradgeom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"

namespace rockscope {

const char* to_string(TokenGroup g) {
    switch (g) {
        case TokenGroup::rock: return "rock";
        case TokenGroup::rare_high_kl: return "rare_high_kl";
        case TokenGroup::random_control: return "random_control";
    }
    return "random_control";
}

namespace {

void floor_and_normalize(std::vector<double>& p) {
    double sum = 0.0;
    for (double& x : p) {
        if (x < 1e-12) x = 1e-12;
        sum += x;
    }
    for (double& x : p) x /= sum;
}

}  // namespace

std::vector<double> reverse_kl_logit_gradient(std::span<const double> p_in, std::span<const double> q_in) {
    if (p_in.size() != q_in.size()) throw Error("reverse_kl_logit_gradient: dimension mismatch");
    std::vector<double> p(p_in.begin(), p_in.end());
    std::vector<double> q(q_in.begin(), q_in.end());
    floor_and_normalize(p);
    floor_and_normalize(q);

    const std::size_t n = p.size();
    std::vector<double> log_ratio(n);
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < n; ++i) {
        log_ratio[i] = std::log(p[i]) - std::log(q[i]);
        terms[i] = p[i] * log_ratio[i];
    }
    const double d = pairwise_sum(terms);
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = p[i] * (log_ratio[i] - d);
    return g;
}

std::vector<double> expand_dist(const TruncatedDist& d, std::size_t vocab_size) {
    std::vector<double> out(vocab_size, 0.0);
    for (std::size_t i = 0; i < d.ids.size(); ++i) {
        if (d.ids[i] >= vocab_size) throw ValidationError("dist token id outside vocabulary");
        out[d.ids[i]] = d.ps[i];
    }
    const std::size_t omitted = vocab_size - d.ids.size();
    if (d.tail_mass > 0.0 && omitted > 0) {
        const double share = d.tail_mass / static_cast<double>(omitted);
        std::vector<bool> present(vocab_size, false);
        for (std::uint32_t id : d.ids) present[id] = true;
        for (std::size_t i = 0; i < vocab_size; ++i)
            if (!present[i]) out[i] = share;
    }
    return out;
}

std::vector<TokenGradientSummary> summarize_gradients(
    const Corpus& corpus, const std::string& checkpoint,
    const std::unordered_map<std::uint32_t, TokenGroup>& groups, std::vector<std::uint32_t>* warnings,
    bool balance_over_all_types) {
    if (!corpus.has_checkpoint(checkpoint)) throw Error("missing checkpoint: " + checkpoint);
    const std::size_t vocab = corpus.vocabulary.size();

    struct Accum {
        std::vector<double> sum;
        std::size_t count = 0;
    };
    std::unordered_map<std::uint32_t, Accum> accums;
    if (!balance_over_all_types)
        for (const auto& [token, _] : groups) accums[token] = Accum{std::vector<double>(vocab, 0.0), 0};

    for (const auto& t : corpus.trajectories) {
        auto it = t.dists.find(checkpoint);
        if (it == t.dists.end()) continue;
        for (std::size_t i = 0; i < t.tokens.size(); ++i) {
            auto acc = accums.find(t.tokens[i]);
            if (acc == accums.end()) {
                if (!balance_over_all_types) continue;
                acc = accums.emplace(t.tokens[i], Accum{std::vector<double>(vocab, 0.0), 0}).first;
            }
            const auto student = expand_dist(it->second[i].first, vocab);
            const auto teacher = expand_dist(it->second[i].second, vocab);
            const auto g = reverse_kl_logit_gradient(student, teacher);
            for (std::size_t k = 0; k < vocab; ++k) acc->second.sum[k] += g[k];
            ++acc->second.count;
        }
    }

    std::vector<std::uint32_t> tokens;
    for (const auto& [token, _] : groups) tokens.push_back(token);
    std::sort(tokens.begin(), tokens.end());

    std::vector<TokenGradientSummary> out;
    for (std::uint32_t token : tokens) {
        const auto& acc = accums[token];
        if (acc.count == 0) {
            if (warnings) warnings->push_back(token);
            continue;
        }
        TokenGradientSummary s;
        s.token_id = token;
        s.n_occurrences = acc.count;
        s.group = groups.at(token);
        s.mean_gradient.resize(vocab);
        for (std::size_t k = 0; k < vocab; ++k)
            s.mean_gradient[k] = acc.sum[k] / static_cast<double>(acc.count);
        s.norm = l2_norm(s.mean_gradient);
        out.push_back(std::move(s));
    }

    // G_balanced: each contributing token type adds its mean gradient once,
    // in token-id order (deterministic reduction). The contributing set is
    // the grouped types, or every dist-bearing type when widened.
    std::vector<double> balanced(vocab, 0.0);
    if (balance_over_all_types) {
        std::vector<std::uint32_t> all_tokens;
        for (const auto& [token, acc] : accums)
            if (acc.count > 0) all_tokens.push_back(token);
        std::sort(all_tokens.begin(), all_tokens.end());
        for (std::uint32_t token : all_tokens) {
            const auto& acc = accums[token];
            for (std::size_t k = 0; k < vocab; ++k)
                balanced[k] += acc.sum[k] / static_cast<double>(acc.count);
        }
    } else {
        for (const auto& s : out)
            for (std::size_t k = 0; k < vocab; ++k) balanced[k] += s.mean_gradient[k];
    }
    const double balanced_norm = l2_norm(balanced);

    for (auto& s : out) {
        if (balanced_norm > 0.0 && s.norm > 0.0) {
            s.cos_balanced = dot(s.mean_gradient, balanced) / (s.norm * balanced_norm);
            s.contribution = static_cast<double>(s.n_occurrences) * s.norm * *s.cos_balanced;
        } else {
            s.cos_balanced = std::nullopt;
            s.contribution = 0.0;
        }
    }
    return out;
}

namespace {

std::optional<double> median_defined_cos(const std::vector<TokenGradientSummary>& summaries,
                                         TokenGroup group) {
    std::vector<double> vals;
    for (const auto& s : summaries)
        if (s.group == group && s.cos_balanced) vals.push_back(*s.cos_balanced);
    if (vals.empty()) return std::nullopt;
    return median(std::move(vals));
}

}  // namespace

GroupComparison compare_groups(const std::vector<TokenGradientSummary>& summaries, TokenGroup group_a,
                               TokenGroup group_b) {
    std::vector<double> norms_a, norms_b;
    for (const auto& s : summaries) {
        if (s.group == group_a) norms_a.push_back(s.norm);
        if (s.group == group_b) norms_b.push_back(s.norm);
    }
    if (norms_a.empty() || norms_b.empty()) throw StatError("compare_groups: empty group");
    GroupComparison cmp;
    cmp.median_norm_a = median(norms_a);
    cmp.median_norm_b = median(norms_b);
    cmp.mann_whitney_norms = mann_whitney(norms_a, norms_b);
    cmp.median_cos_a = median_defined_cos(summaries, group_a);
    cmp.median_cos_b = median_defined_cos(summaries, group_b);
    return cmp;
}

PersistenceAnalysis persistence_analysis(const Corpus& corpus, const std::string& early,
                                         const std::string& late,
                                         const std::unordered_map<std::uint32_t, TokenGroup>& groups) {
    if (!corpus.has_checkpoint(early)) throw Error("missing checkpoint: " + early);
    if (!corpus.has_checkpoint(late)) throw Error("missing checkpoint: " + late);

    std::unordered_map<std::uint32_t, std::vector<double>> early_losses, late_losses;
    for (const auto& t : corpus.trajectories) {
        const auto& le = t.losses.at(early);
        const auto& ll = t.losses.at(late);
        for (std::size_t i = 0; i < t.tokens.size(); ++i) {
            if (!groups.count(t.tokens[i])) continue;
            early_losses[t.tokens[i]].push_back(le[i]);
            late_losses[t.tokens[i]].push_back(ll[i]);
        }
    }

    std::vector<std::uint32_t> tokens;
    for (const auto& [token, _] : groups)
        if (early_losses.count(token)) tokens.push_back(token);
    std::sort(tokens.begin(), tokens.end());

    PersistenceAnalysis analysis;
    for (std::uint32_t token : tokens) {
        auto& le = early_losses[token];
        auto& ll = late_losses[token];
        std::sort(le.begin(), le.end());
        std::sort(ll.begin(), ll.end());
        PersistenceRecord rec;
        rec.token_id = token;
        rec.group = groups.at(token);
        rec.kl_early = pairwise_sum(le) / static_cast<double>(le.size());
        rec.kl_late = pairwise_sum(ll) / static_cast<double>(ll.size());
        rec.delta_kl = rec.kl_late - rec.kl_early;
        analysis.records.push_back(rec);
    }

    for (TokenGroup g : {TokenGroup::rock, TokenGroup::rare_high_kl, TokenGroup::random_control}) {
        std::vector<double> early_v, late_v, deltas, rel;
        for (const auto& rec : analysis.records) {
            if (rec.group != g) continue;
            early_v.push_back(rec.kl_early);
            late_v.push_back(rec.kl_late);
            deltas.push_back(rec.delta_kl);
            if (rec.kl_early > 0.0) rel.push_back((rec.kl_early - rec.kl_late) / rec.kl_early);
        }
        if (early_v.empty()) continue;
        GroupPersistence gp;
        gp.group = g;
        gp.n_tokens = early_v.size();
        gp.median_delta = median(deltas);
        gp.median_relative_reduction = rel.empty() ? 0.0 : median(rel);
        if (early_v.size() < 3) {
            gp.status = "skipped: fewer than 3 tokens";
        } else {
            try {
                gp.wilcoxon = wilcoxon_signed_rank(early_v, late_v);
                gp.status = "ok";
            } catch (const StatError&) {
                gp.status = "no change";  // all differences zero
            }
        }
        analysis.groups.push_back(gp);
    }
    return analysis;
}

std::unordered_map<std::uint32_t, TokenGroup> build_analysis_groups(
    const Corpus& corpus, const std::string& kl_checkpoint,
    const std::unordered_set<std::uint32_t>& rock_set, double freq_percentile, double kl_percentile,
    std::size_t random_controls, std::uint64_t seed) {
    if (!corpus.has_checkpoint(kl_checkpoint)) throw Error("missing checkpoint: " + kl_checkpoint);

    std::unordered_map<std::uint32_t, std::size_t> freq;
    std::unordered_map<std::uint32_t, std::vector<double>> losses;
    for (const auto& t : corpus.trajectories) {
        const auto& l = t.losses.at(kl_checkpoint);
        for (std::size_t i = 0; i < t.tokens.size(); ++i) {
            ++freq[t.tokens[i]];
            losses[t.tokens[i]].push_back(l[i]);
        }
    }

    std::vector<std::uint32_t> tokens;
    std::vector<double> freqs, mean_kls;
    for (const auto& [token, f] : freq) tokens.push_back(token);
    std::sort(tokens.begin(), tokens.end());
    std::unordered_map<std::uint32_t, double> mean_kl;
    for (std::uint32_t token : tokens) {
        auto& l = losses[token];
        std::sort(l.begin(), l.end());
        mean_kl[token] = pairwise_sum(l) / static_cast<double>(l.size());
        freqs.push_back(static_cast<double>(freq[token]));
        mean_kls.push_back(mean_kl[token]);
    }

    const double freq_cut = percentile_nearest_rank(freqs, freq_percentile);
    const double kl_cut = percentile_nearest_rank(mean_kls, kl_percentile);

    std::unordered_map<std::uint32_t, TokenGroup> groups;
    std::vector<std::uint32_t> leftovers;
    for (std::uint32_t token : tokens) {
        if (rock_set.count(token)) {
            groups[token] = TokenGroup::rock;
        } else if (static_cast<double>(freq[token]) < freq_cut && mean_kl[token] >= kl_cut) {
            groups[token] = TokenGroup::rare_high_kl;
        } else {
            leftovers.push_back(token);
        }
    }
    SplitMix64 rng(SplitMix64::derive(seed, 0x6A0ULL));
    const auto idx = sample_without_replacement(leftovers.size(),
                                                std::min(random_controls, leftovers.size()), rng);
    for (std::size_t i : idx) groups[leftovers[i]] = TokenGroup::random_control;
    return groups;
}

namespace {

double dist_entropy(const TruncatedDist& d, std::size_t vocab_size) {
    double h = 0.0;
    for (double p : d.ps)
        if (p > 0.0) h -= p * std::log(p);
    const std::size_t omitted = vocab_size - d.ids.size();
    if (d.tail_mass > 0.0 && omitted > 0) {
        const double share = d.tail_mass / static_cast<double>(omitted);
        h -= d.tail_mass * std::log(share);
    }
    return h;
}

}  // namespace

std::unordered_map<std::uint32_t, TokenEntropies> entropy_table(const Corpus& corpus,
                                                                const std::string& pre,
                                                                const std::string& post) {
    struct Accum {
        double teacher = 0.0, student_pre = 0.0, student_post = 0.0;
        std::size_t n_pre = 0, n_post = 0;
    };
    std::unordered_map<std::uint32_t, Accum> accums;
    const std::size_t vocab = corpus.vocabulary.size();
    for (const auto& t : corpus.trajectories) {
        const auto pre_it = t.dists.find(pre);
        const auto post_it = t.dists.find(post);
        for (std::size_t i = 0; i < t.tokens.size(); ++i) {
            auto& acc = accums[t.tokens[i]];
            if (pre_it != t.dists.end()) {
                acc.student_pre += dist_entropy(pre_it->second[i].first, vocab);
                // teacher is the same table at both checkpoints; average its
                // entropy over the same occurrences as the pre student
                acc.teacher += dist_entropy(pre_it->second[i].second, vocab);
                ++acc.n_pre;
            }
            if (post_it != t.dists.end()) {
                acc.student_post += dist_entropy(post_it->second[i].first, vocab);
                ++acc.n_post;
            }
        }
    }
    std::unordered_map<std::uint32_t, TokenEntropies> out;
    for (const auto& [token, acc] : accums) {
        if (acc.n_pre == 0 && acc.n_post == 0) continue;
        TokenEntropies e;
        if (acc.n_pre > 0) {
            e.teacher_entropy = acc.teacher / static_cast<double>(acc.n_pre);
            e.student_entropy_pre = acc.student_pre / static_cast<double>(acc.n_pre);
        }
        if (acc.n_post > 0) e.student_entropy_post = acc.student_post / static_cast<double>(acc.n_post);
        out[token] = e;
    }
    return out;
}

void write_gradient_csv(const std::vector<TokenGradientSummary>& summaries, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write gradient csv: " + path);
    out << "token_id,group,n_occurrences,norm,cos_balanced,contribution\n";
    for (const auto& s : summaries) {
        out << s.token_id << ',' << to_string(s.group) << ',' << s.n_occurrences << ','
            << format_double(s.norm) << ',';
        if (s.cos_balanced)
            out << format_double(*s.cos_balanced);
        else
            out << "undefined";
        out << ',' << format_double(s.contribution) << '\n';
    }
}

void write_persistence_csv(const PersistenceAnalysis& analysis, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write persistence csv: " + path);
    out << "token_id,group,kl_early,kl_late,delta_kl\n";
    for (const auto& rec : analysis.records) {
        out << rec.token_id << ',' << to_string(rec.group) << ',' << format_double(rec.kl_early) << ','
            << format_double(rec.kl_late) << ',' << format_double(rec.delta_kl) << '\n';
    }
}

}  // namespace rockscope
