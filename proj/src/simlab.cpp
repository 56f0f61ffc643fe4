#include "rockscope/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/rng.hpp"

namespace rockscope {

namespace {

constexpr std::uint64_t kNoGoal = 0xFF;
constexpr std::uint64_t kWild = 0xFFFF;

// decision-slot split: open another segment / answer / bonus detour
constexpr double kDecisionOpener = 0.45;
constexpr double kDecisionSep = 0.30;
constexpr double kDecisionHerald = 0.25;

inline std::uint64_t make_key(std::uint64_t goal, std::uint64_t h1, std::uint64_t h2) {
    return (goal << 32) | (h1 << 16) | h2;
}

std::vector<double> zipf_weights(std::size_t n, double exponent) {
    std::vector<double> w(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = 1.0 / std::pow(static_cast<double>(i + 1), exponent);
        sum += w[i];
    }
    for (double& x : w) x /= sum;
    return w;
}

const char* kPlantedSurfaces[12] = {"So", "Wait", "Let",  "Then", "Since", "$",
                                    "\\", "frac", "{",    "}",    "**",    "###"};
const char* kGuideSurfaces[12] = {"triangle", "equation", "region", "must",   "find",   "check",
                                  "value",    "term",     "case",   "step",   "result", "hence"};
const char* kFillerSurfaces[8] = {"alpha", "beta", "gamma", "delta", "omega", "sigma", "theta", "kappa"};
const char* kBonusSurfaces[6] = {"zeta", "iota", "lambda", "mu", "nu", "xi"};

enum class Slot { opener, answer, end_stop, bonus, post_bonus, filler, guide_next, decision, planted };

}  // namespace

SimConfig default_sim_config() {
    SimConfig cfg;
    VocabLayout layout;
    for (std::uint32_t i = 0; i < VocabLayout::kPlanted; ++i)
        cfg.planted_rock_tokens.push_back(layout.planted0 + i);
    cfg.planted_pillar_token = layout.sep;
    return cfg;
}

SimWorld::SimWorld(SimConfig config) : config_(std::move(config)) {
    if (config_.vocab_size < layout_.reserved0 + 1)
        throw ConfigError("vocab_size must be at least " + std::to_string(layout_.reserved0 + 1));
    if (config_.markov_order != 2)
        throw ConfigError("the built-in grammar supports markov_order 2 only");
    if (!(config_.zipf_exponent > 0.0)) throw ConfigError("zipf_exponent must be positive");
    for (std::uint32_t id : config_.planted_rock_tokens)
        if (id >= config_.vocab_size) throw ConfigError("planted token id outside vocabulary");
    if (config_.planted_pillar_token && *config_.planted_pillar_token >= config_.vocab_size)
        throw ConfigError("planted pillar token outside vocabulary");
}

SimWorld build_world(const SimConfig& config) { return SimWorld(config); }

Vocabulary SimWorld::vocabulary() const {
    Vocabulary v;
    v.id_to_string.resize(config_.vocab_size);
    for (std::uint32_t i = 0; i < 10; ++i) v.id_to_string[i] = std::string(1, char('0' + i));
    v.id_to_string[layout_.op] = "+";
    v.id_to_string[layout_.eq] = "=";
    v.id_to_string[layout_.sep] = "=>";
    v.id_to_string[layout_.end] = "<end>";
    v.id_to_string[layout_.herald] = "Note";
    for (std::uint32_t i = 0; i < VocabLayout::kPlanted; ++i)
        v.id_to_string[layout_.planted0 + i] = kPlantedSurfaces[i];
    for (std::uint32_t i = 0; i < VocabLayout::kGuides; ++i)
        v.id_to_string[layout_.guide0 + i] = kGuideSurfaces[i];
    for (std::uint32_t i = 0; i < VocabLayout::kFillers; ++i)
        v.id_to_string[layout_.filler0 + i] = kFillerSurfaces[i];
    for (std::uint32_t i = 0; i < VocabLayout::kBonus; ++i)
        v.id_to_string[layout_.bonus0 + i] = kBonusSurfaces[i];
    for (std::uint32_t i = layout_.reserved0; i < config_.vocab_size; ++i)
        v.id_to_string[i] = "pad" + std::to_string(i - layout_.reserved0);
    return v;
}

std::uint64_t SimWorld::context_key(std::uint32_t goal, std::span<const std::uint32_t> context) const {
    if (context.size() < 2) throw Error("context too short for order-2 table");
    const std::uint32_t h1 = context[context.size() - 2];
    const std::uint32_t h2 = context[context.size() - 1];
    const VocabLayout& L = layout_;
    if (h2 == L.eq) return make_key(kNoGoal, h1, h2);
    if (h2 == L.sep) return make_key(goal, kWild, h2);
    if (L.is_digit(h2)) return h1 == L.sep ? make_key(kNoGoal, L.sep, h2) : make_key(kNoGoal, kWild, h2);
    if (h2 == L.herald) return make_key(kNoGoal, kWild, h2);
    if (L.is_bonus(h2) || L.is_guide(h2) || L.is_planted(h2)) return make_key(kNoGoal, kWild, h2);
    // Scaffold slots: the teacher's off-mode spread rotates with the goal
    // digit, so these rows are goal-keyed.
    if (L.is_filler(h2)) return make_key(goal, h1, h2);
    return make_key(kNoGoal, kWild, h2);  // op/end/reserved: inert end row
}

namespace {

struct SlotSpec {
    Slot slot;
    std::vector<std::uint32_t> support;
    std::vector<double> teacher;
};

// 0.95 on the required token, the remainder Zipf-spread over the others in
// support order; `rotation` shifts the alternative ranking (goal-dependent
// off-mode preferences).
void spike_row(SlotSpec& spec, std::uint32_t required, double exponent, std::uint32_t rotation = 0) {
    const std::size_t n = spec.support.size();
    spec.teacher.assign(n, 0.0);
    if (n == 1) {
        spec.teacher[0] = 1.0;
        return;
    }
    const auto w = zipf_weights(n - 1, exponent);
    std::size_t alt = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (spec.support[i] == required)
            spec.teacher[i] = 0.95;
        else
            spec.teacher[i] = 0.05 * w[(alt++ + rotation) % (n - 1)];
    }
}

}  // namespace

SimRow& SimWorld::row(std::uint64_t key) const {
    auto it = rows_.find(key);
    if (it != rows_.end()) return it->second;

    const std::uint32_t goal = static_cast<std::uint32_t>(key >> 32);
    const std::uint32_t h1 = static_cast<std::uint32_t>((key >> 16) & 0xFFFF);
    const std::uint32_t h2 = static_cast<std::uint32_t>(key & 0xFFFF);
    const VocabLayout& L = layout_;
    const double ze = config_.zipf_exponent;

    SlotSpec spec;
    if (h2 == L.eq) {
        spec.slot = Slot::opener;
        for (std::uint32_t i = 0; i < VocabLayout::kGuides; ++i) spec.support.push_back(L.guide0 + i);
        spike_row(spec, L.guide0 + 6 * (h1 % 2), ze);
    } else if (h2 == L.sep) {
        spec.slot = Slot::answer;
        for (std::uint32_t d = 0; d < 10; ++d) spec.support.push_back(d);
        spike_row(spec, goal, ze);
    } else if (L.is_digit(h2)) {
        spec.slot = Slot::end_stop;
        spec.support = {L.end};
        spec.teacher = {1.0};
    } else if (h2 == L.herald) {
        spec.slot = Slot::bonus;
        for (std::uint32_t i = 0; i < VocabLayout::kBonus; ++i) spec.support.push_back(L.bonus0 + i);
        spec.teacher.assign(VocabLayout::kBonus, 1.0 / static_cast<double>(VocabLayout::kBonus));
    } else if (L.is_bonus(h2)) {
        spec.slot = Slot::post_bonus;
        spec.support = {L.sep, L.herald};
        spec.teacher = {0.95, 0.05};
    } else if (L.is_guide(h2)) {
        spec.slot = Slot::filler;
        for (std::uint32_t i = 0; i < VocabLayout::kFillers; ++i) spec.support.push_back(L.filler0 + i);
        spec.teacher = zipf_weights(VocabLayout::kFillers, ze);
    } else if (L.is_planted(h2)) {
        const std::uint32_t m = h2 - L.planted0;
        const std::uint32_t local = m % 6;
        if (local < 5) {
            spec.slot = Slot::guide_next;
            for (std::uint32_t i = 0; i < VocabLayout::kGuides; ++i) spec.support.push_back(L.guide0 + i);
            spike_row(spec, L.guide0 + m + 1, ze);
        } else {
            spec.slot = Slot::decision;
            const std::uint32_t t = m / 6;
            spec.support = {L.sep, L.guide0 + 6 * t, L.herald};
            spec.teacher = {kDecisionSep, kDecisionOpener, kDecisionHerald};
        }
    } else if (L.is_filler(h2)) {
        spec.slot = Slot::planted;
        const std::uint32_t m = L.is_guide(h1) ? h1 - L.guide0 : (h1 + h2) % 12;
        for (std::uint32_t i = 0; i < VocabLayout::kPlanted; ++i) spec.support.push_back(L.planted0 + i);
        spike_row(spec, L.planted0 + m, ze, goal == kNoGoal ? 0 : goal);
    } else {
        spec.slot = Slot::end_stop;
        spec.support = {L.end};
        spec.teacher = {1.0};
    }

    SimRow row;
    row.support = std::move(spec.support);
    row.teacher_probs = std::move(spec.teacher);
    row.teacher_logits.resize(row.support.size());
    row.student_logits.resize(row.support.size());
    for (std::size_t i = 0; i < row.support.size(); ++i) {
        row.teacher_logits[i] = std::log(row.teacher_probs[i]);
        row.student_logits[i] = row.teacher_logits[i];
    }

    if (row.support.size() > 1) {
        // Per-row noise, deterministic in (seed, key).
        SplitMix64 noise(SplitMix64::derive(SplitMix64::derive(config_.seed, 0x4015EULL), key));
        for (double& logit : row.student_logits) logit += config_.noise_sigma * noise.next_normal();
    }
    // Planted habit: each planted token carries its own fixed negative offset
    // wherever it is grammatical. The magnitudes are staggered across the set
    // (0.5x..1.5x rock_offset) so rows whose support is all-planted still
    // diverge; a uniform shift would be softmax-invariant.
    if (!config_.planted_rock_tokens.empty()) {
        const double denom = static_cast<double>(std::max<std::size_t>(1, config_.planted_rock_tokens.size() - 1));
        for (std::size_t i = 0; i < row.support.size(); ++i) {
            for (std::size_t k = 0; k < config_.planted_rock_tokens.size(); ++k) {
                if (row.support[i] == config_.planted_rock_tokens[k]) {
                    const double scale = 0.5 + static_cast<double>(k) / denom;
                    row.student_logits[i] -= config_.rock_offset * scale;
                }
            }
        }
    }
    // Bonus row: concentrated kick on one hot row.
    if (spec.slot == Slot::bonus) {
        for (std::size_t i = 0; i < row.support.size(); ++i)
            if (i % 2 == 0) row.student_logits[i] += config_.kick_offset;
    }

    auto [ins, _] = rows_.emplace(key, std::move(row));
    return ins->second;
}

namespace {

double log_sum_exp(std::span<const double> logits) {
    double m = logits[0];
    for (double l : logits) m = std::max(m, l);
    double s = 0.0;
    for (double l : logits) s += std::exp(l - m);
    return m + std::log(s);
}

}  // namespace

std::vector<double> SimWorld::student_probs(const SimRow& row) const {
    const std::size_t n = row.student_logits.size();
    const double lse = log_sum_exp(row.student_logits);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(row.student_logits[i] - lse);
    return p;
}

std::vector<double> SimWorld::row_log_ratios(const SimRow& row) const {
    const std::size_t n = row.student_logits.size();
    const double lse_s = log_sum_exp(row.student_logits);
    const double lse_t = log_sum_exp(row.teacher_logits);
    std::vector<double> lr(n);
    for (std::size_t i = 0; i < n; ++i)
        lr[i] = (row.student_logits[i] - lse_s) - (row.teacher_logits[i] - lse_t);
    return lr;
}

double SimWorld::row_kl(const SimRow& row) const {
    const auto p = student_probs(row);
    const auto lr = row_log_ratios(row);
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * lr[i];
    return std::max(0.0, kl);
}

std::vector<std::uint64_t> SimWorld::grammar_row_keys() const {
    const VocabLayout& L = layout_;
    std::vector<std::uint64_t> keys;
    for (std::uint32_t d = 0; d < 10; ++d) keys.push_back(make_key(kNoGoal, d, L.eq));
    for (std::uint32_t g = 0; g < 10; ++g) keys.push_back(make_key(g, kWild, L.sep));
    for (std::uint32_t d = 0; d < 10; ++d) keys.push_back(make_key(kNoGoal, L.sep, d));
    keys.push_back(make_key(kNoGoal, kWild, L.herald));
    for (std::uint32_t i = 0; i < VocabLayout::kBonus; ++i)
        keys.push_back(make_key(kNoGoal, kWild, L.bonus0 + i));
    for (std::uint32_t i = 0; i < VocabLayout::kGuides; ++i)
        keys.push_back(make_key(kNoGoal, kWild, L.guide0 + i));
    for (std::uint32_t i = 0; i < VocabLayout::kPlanted; ++i)
        keys.push_back(make_key(kNoGoal, kWild, L.planted0 + i));
    for (std::uint32_t goal = 0; goal < 10; ++goal)
        for (std::uint32_t g = 0; g < VocabLayout::kGuides; ++g)
            for (std::uint32_t f = 0; f < VocabLayout::kFillers; ++f)
                keys.push_back(make_key(goal, L.guide0 + g, L.filler0 + f));
    for (std::uint64_t key : keys) row(key);
    std::sort(keys.begin(), keys.end());
    return keys;
}

std::vector<std::uint32_t> SimWorld::kicked_tokens() const {
    std::vector<std::uint32_t> out;
    for (std::uint32_t i = 0; i < VocabLayout::kBonus; ++i) out.push_back(layout_.bonus0 + i);
    return out;
}

std::vector<std::uint32_t> SimWorld::prompt_tokens(std::size_t prompt_index) const {
    const std::uint32_t d1 = static_cast<std::uint32_t>(prompt_index % 10);
    const std::uint32_t d2 = static_cast<std::uint32_t>((prompt_index / 10) % 10);
    return {d1, layout_.op, d2, layout_.eq};
}

bool SimWorld::is_correct(std::span<const std::uint32_t> trajectory) const {
    if (trajectory.size() < 4) return false;
    const std::uint32_t goal = goal_of_prompt(trajectory[0], trajectory[2]);
    for (std::size_t i = 4; i + 2 < trajectory.size(); ++i) {
        if (trajectory[i] == layout_.sep && trajectory[i + 1] == goal &&
            trajectory[i + 2] == layout_.end)
            return true;
    }
    return false;
}

std::unordered_map<std::uint32_t, double> SimWorld::mean_kl_by_token() const {
    std::unordered_map<std::uint32_t, double> num, den;
    for (std::uint64_t key : grammar_row_keys()) {
        const SimRow& r = row(key);
        const auto p = student_probs(r);
        const double kl = row_kl(r);
        for (std::size_t i = 0; i < r.support.size(); ++i) {
            num[r.support[i]] += p[i] * kl;
            den[r.support[i]] += p[i];
        }
    }
    std::unordered_map<std::uint32_t, double> out;
    for (const auto& [token, d] : den)
        if (d > 0.0) out[token] = num[token] / d;
    return out;
}

std::vector<double> SimWorld::logit_snapshot(const std::vector<std::uint32_t>& tokens) const {
    std::unordered_set<std::uint32_t> wanted(tokens.begin(), tokens.end());
    std::vector<double> out;
    for (std::uint64_t key : grammar_row_keys()) {
        const SimRow& r = row(key);
        for (std::size_t i = 0; i < r.support.size(); ++i)
            if (wanted.count(r.support[i])) out.push_back(r.student_logits[i]);
    }
    return out;
}

namespace {

std::size_t sample_index(std::span<const double> probs, double u);

// Token sequence only; used by the training loop where losses are recomputed
// against the live student anyway.
std::vector<std::uint32_t> sample_tokens(const SimWorld& world, std::size_t prompt_index,
                                         SplitMix64& rng) {
    std::vector<std::uint32_t> tokens = world.prompt_tokens(prompt_index);
    const std::uint32_t goal = world.goal_of_prompt(tokens[0], tokens[2]);
    while (tokens.size() < world.config().max_len && tokens.back() != world.layout().end) {
        const std::uint64_t key = world.context_key(goal, tokens);
        const SimRow& row = world.row(key);
        const auto probs = world.student_probs(row);
        tokens.push_back(row.support[sample_index(probs, rng.next_double())]);
    }
    return tokens;
}

std::size_t sample_index(std::span<const double> probs, double u) {
    double cum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (u < cum) return i;
    }
    // fp slack: return the last positive-probability index
    for (std::size_t i = probs.size(); i > 0; --i)
        if (probs[i - 1] > 0.0) return i - 1;
    return probs.size() - 1;
}

TruncatedDist dist_from_probs(std::span<const std::uint32_t> ids, std::span<const double> ps) {
    std::vector<std::size_t> order(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (ps[a] != ps[b]) return ps[a] > ps[b];
        return ids[a] < ids[b];
    });
    TruncatedDist d;
    for (std::size_t i : order) {
        if (ps[i] <= 0.0) continue;
        d.ids.push_back(ids[i]);
        d.ps.push_back(ps[i]);
    }
    d.tail_mass = 0.0;
    return d;
}

TruncatedDist delta_dist(std::uint32_t token) {
    TruncatedDist d;
    d.ids = {token};
    d.ps = {1.0};
    d.tail_mass = 0.0;
    return d;
}

}  // namespace

std::vector<TrajectoryTrace> rollout(const SimWorld& world, std::size_t prompts,
                                     std::size_t rollouts_per_prompt, std::uint64_t seed,
                                     const std::string& checkpoint, bool with_dists) {
    std::vector<TrajectoryTrace> out;
    out.reserve(prompts * rollouts_per_prompt);
    std::uint64_t traj_id = 0;
    for (std::size_t p = 0; p < prompts; ++p) {
        const std::uint64_t prompt_stream = SplitMix64::derive(seed, p);
        for (std::size_t r = 0; r < rollouts_per_prompt; ++r) {
            SplitMix64 rng(SplitMix64::derive(prompt_stream, r));
            TrajectoryTrace t;
            t.trajectory_id = traj_id++;
            t.prompt_id = p;
            t.tokens = world.prompt_tokens(p);
            const std::uint32_t goal = world.goal_of_prompt(t.tokens[0], t.tokens[2]);

            std::vector<double> losses(t.tokens.size(), 0.0);
            std::vector<std::pair<TruncatedDist, TruncatedDist>> dists;
            if (with_dists)
                for (std::uint32_t tok : t.tokens) dists.emplace_back(delta_dist(tok), delta_dist(tok));

            while (t.tokens.size() < world.config().max_len && t.tokens.back() != world.layout().end) {
                const std::uint64_t key = world.context_key(goal, t.tokens);
                const SimRow& row = world.row(key);
                const auto probs = world.student_probs(row);
                const double u = rng.next_double();
                const std::size_t pick = sample_index(probs, u);
                t.tokens.push_back(row.support[pick]);
                losses.push_back(world.row_kl(row));
                if (with_dists)
                    dists.emplace_back(dist_from_probs(row.support, probs),
                                       dist_from_probs(row.support, row.teacher_probs));
            }
            t.losses.emplace(checkpoint, std::move(losses));
            if (with_dists) t.dists.emplace(checkpoint, std::move(dists));
            out.push_back(std::move(t));
        }
    }
    return out;
}

void add_checkpoint(const SimWorld& world, std::vector<TrajectoryTrace>& trajectories,
                    const std::string& checkpoint, bool with_dists) {
    for (auto& t : trajectories) {
        const std::uint32_t goal = world.goal_of_prompt(t.tokens[0], t.tokens[2]);
        std::vector<double> losses(t.tokens.size(), 0.0);
        std::vector<std::pair<TruncatedDist, TruncatedDist>> dists;
        if (with_dists)
            for (std::size_t i = 0; i < std::min<std::size_t>(4, t.tokens.size()); ++i)
                dists.emplace_back(delta_dist(t.tokens[i]), delta_dist(t.tokens[i]));
        for (std::size_t i = 4; i < t.tokens.size(); ++i) {
            const std::span<const std::uint32_t> prefix(t.tokens.data(), i);
            const std::uint64_t key = world.context_key(goal, prefix);
            const SimRow& row = world.row(key);
            losses[i] = world.row_kl(row);
            if (with_dists) {
                const auto probs = world.student_probs(row);
                dists.emplace_back(dist_from_probs(row.support, probs),
                                   dist_from_probs(row.support, row.teacher_probs));
            }
        }
        t.losses[checkpoint] = std::move(losses);
        if (with_dists) t.dists[checkpoint] = std::move(dists);
    }
}

Corpus make_corpus(const SimWorld& world, std::vector<TrajectoryTrace> trajectories) {
    Corpus c;
    c.vocabulary = world.vocabulary();
    c.trajectories = std::move(trajectories);
    if (!c.trajectories.empty())
        for (const auto& [name, _] : c.trajectories.front().losses) c.checkpoints.push_back(name);
    // emission order convention: "pre" before "post"
    std::sort(c.checkpoints.begin(), c.checkpoints.end(), std::greater<std::string>());
    validate_corpus(c);
    return c;
}

MaskSource make_freeze_mask(const std::unordered_set<std::uint32_t>& rock_set, std::size_t radius,
                            double lambda) {
    MaskSource src;
    src.frozen_tokens.assign(rock_set.begin(), rock_set.end());
    std::sort(src.frozen_tokens.begin(), src.frozen_tokens.end());
    std::unordered_set<std::uint32_t> set = rock_set;
    src.position_weights = [set, radius, lambda](std::span<const std::uint32_t> tokens) {
        std::vector<double> w(tokens.size(), 1.0);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (!set.count(tokens[i])) continue;
            const std::size_t lo = i >= radius ? i - radius : 0;
            const std::size_t hi = std::min(tokens.size() - 1, i + radius);
            for (std::size_t j = lo; j <= hi; ++j) w[j] = lambda;
        }
        return w;
    };
    return src;
}

namespace {

struct GradAccum {
    std::vector<double> sum;
    std::size_t count = 0;
};

void apply_optimizer(SimWorld& world, std::uint64_t key, const GradAccum& acc,
                     const OptimizerConfig& opt) {
    SimRow& row = world.row(key);
    const std::size_t n = row.student_logits.size();
    if (opt.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < n; ++i)
            row.student_logits[i] -= opt.learning_rate * acc.sum[i] / static_cast<double>(acc.count);
        return;
    }
    if (row.m.empty()) {
        row.m.assign(n, 0.0);
        row.v.assign(n, 0.0);
    }
    row.adam_steps += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(row.adam_steps));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(row.adam_steps));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = acc.sum[i] / static_cast<double>(acc.count);
        row.m[i] = opt.beta1 * row.m[i] + (1.0 - opt.beta1) * g;
        row.v[i] = opt.beta2 * row.v[i] + (1.0 - opt.beta2) * g * g;
        const double m_hat = row.m[i] / bc1;
        const double v_hat = row.v[i] / bc2;
        row.student_logits[i] -= opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.epsilon);
    }
}

}  // namespace

TrainResult train(SimWorld& world, const std::optional<std::vector<TrajectoryTrace>>& offline,
                  const MaskSource* mask, std::size_t steps, std::uint64_t seed) {
    const SimConfig& cfg = world.config();
    TrainResult result;

    // Fixed probe set, sampled from the pre-training student.
    std::vector<TrajectoryTrace> probe = rollout(world, cfg.prompts, cfg.rollouts_per_prompt,
                                                 SplitMix64::derive(seed, 0x9B0BEULL), "pre",
                                                 cfg.emit_dists);
    {
        std::vector<double> all;
        for (const auto& t : probe) {
            const auto& l = t.losses.at("pre");
            all.insert(all.end(), l.begin(), l.end());
        }
        std::sort(all.begin(), all.end());
        result.probe_pre_mean_kl = all.empty() ? 0.0 : pairwise_sum(all) / static_cast<double>(all.size());
    }

    std::unordered_set<std::uint32_t> frozen;
    if (mask) frozen.insert(mask->frozen_tokens.begin(), mask->frozen_tokens.end());

    std::size_t offline_cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<std::vector<std::uint32_t>> batch;
        if (offline) {
            if (offline->empty()) throw ConfigError("train: offline corpus is empty");
            for (std::size_t b = 0; b < cfg.batch_trajectories; ++b) {
                batch.push_back((*offline)[offline_cursor % offline->size()].tokens);
                ++offline_cursor;
            }
        } else {
            SplitMix64 prompt_rng(SplitMix64::derive(seed, 0x7500ULL + step));
            for (std::size_t b = 0; b < cfg.batch_trajectories; ++b) {
                const std::size_t p = static_cast<std::size_t>(prompt_rng.next_below(cfg.prompts));
                SplitMix64 traj_rng(SplitMix64::derive(seed, 0xA000000ULL + step * 64 + b));
                batch.push_back(sample_tokens(world, p, traj_rng));
            }
        }

        std::map<std::uint64_t, GradAccum> grads;
        double kl_sum = 0.0;
        std::size_t kl_count = 0;
        std::size_t active = 0, total = 0;
        for (const auto& tokens : batch) {
            const std::uint32_t goal = world.goal_of_prompt(tokens[0], tokens[2]);
            std::vector<double> weights(tokens.size(), 1.0);
            if (mask && mask->position_weights) weights = mask->position_weights(tokens);
            for (std::size_t i = 4; i < tokens.size(); ++i) {
                ++total;
                const std::span<const std::uint32_t> prefix(tokens.data(), i);
                const std::uint64_t key = world.context_key(goal, prefix);
                const SimRow& row = world.row(key);
                const auto p = world.student_probs(row);
                const auto log_ratio = world.row_log_ratios(row);
                double d = 0.0;
                for (std::size_t k = 0; k < p.size(); ++k) d += p[k] * log_ratio[k];
                kl_sum += std::max(0.0, d);
                ++kl_count;
                const double w = weights[i];
                if (w == 0.0) continue;  // masked term: skipped entirely
                ++active;
                auto& acc = grads[key];
                if (acc.sum.empty()) acc.sum.assign(p.size(), 0.0);
                for (std::size_t k = 0; k < p.size(); ++k) {
                    double g = p[k] * (log_ratio[k] - d) * w;
                    if (!frozen.empty() && frozen.count(row.support[k])) g = 0.0;
                    acc.sum[k] += g;
                }
                acc.count += 1;
            }
        }

        for (const auto& [key, acc] : grads) {  // std::map: key-sorted, deterministic
            apply_optimizer(world, key, acc, cfg.optimizer);
            for (double logit : world.row(key).student_logits)
                if (!std::isfinite(logit)) throw Error("train: non-finite update at step " +
                                                       std::to_string(step));
        }

        TrainLogRow logrow;
        logrow.step = step;
        logrow.batch_mean_kl = kl_count == 0 ? 0.0 : kl_sum / static_cast<double>(kl_count);
        logrow.active_terms = active;
        logrow.batch_positions = total;
        result.log.push_back(logrow);
        result.total_active_terms += active;
        result.total_positions += total;
    }

    add_checkpoint(world, probe, "post", cfg.emit_dists);
    {
        std::vector<double> all;
        for (const auto& t : probe) {
            const auto& l = t.losses.at("post");
            all.insert(all.end(), l.begin(), l.end());
        }
        std::sort(all.begin(), all.end());
        result.probe_post_mean_kl = all.empty() ? 0.0 : pairwise_sum(all) / static_cast<double>(all.size());
    }
    result.probe = make_corpus(world, std::move(probe));
    return result;
}

void StudentPolicy::distribution(std::span<const std::uint32_t> context, std::vector<double>& out) const {
    out.assign(world_.config().vocab_size, 0.0);
    if (context.size() < 4 || context.back() == world_.layout().end) {
        out[world_.layout().end] = 1.0;
        return;
    }
    const std::uint32_t goal = world_.goal_of_prompt(context[0], context[2]);
    const std::uint64_t key = world_.context_key(goal, context);
    const SimRow& row = world_.row(key);
    if (use_teacher_) {
        for (std::size_t i = 0; i < row.support.size(); ++i) out[row.support[i]] = row.teacher_probs[i];
    } else {
        const auto p = world_.student_probs(row);
        for (std::size_t i = 0; i < row.support.size(); ++i) out[row.support[i]] = p[i];
    }
}

std::vector<std::uint8_t> evaluate_accuracy(const SimWorld& world, const DecodingPolicy& policy,
                                            std::size_t prompts, std::size_t rollouts_per_prompt,
                                            std::uint64_t seed) {
    std::vector<std::uint8_t> indicators(prompts, 0);
    std::vector<double> dist;
    for (std::size_t p = 0; p < prompts; ++p) {
        const std::uint64_t prompt_stream = SplitMix64::derive(seed, p);
        std::size_t correct = 0;
        for (std::size_t r = 0; r < rollouts_per_prompt; ++r) {
            SplitMix64 rng(SplitMix64::derive(prompt_stream, r));
            std::vector<std::uint32_t> tokens = world.prompt_tokens(p);
            while (tokens.size() < world.config().max_len && tokens.back() != world.layout().end) {
                policy.distribution(tokens, dist);
                const double u = rng.next_double();
                tokens.push_back(static_cast<std::uint32_t>(sample_index(dist, u)));
            }
            if (world.is_correct(tokens)) ++correct;
        }
        indicators[p] = 2 * correct > rollouts_per_prompt ? 1 : 0;
    }
    return indicators;
}

namespace {

ProbeArm run_probe_arm(const SimConfig& base, OptimizerKind kind) {
    SimConfig cfg = base;
    cfg.optimizer.kind = kind;
    SimWorld world = build_world(cfg);
    const auto pre = world.mean_kl_by_token();
    train(world, std::nullopt, nullptr, cfg.steps, cfg.seed);
    const auto post = world.mean_kl_by_token();

    std::unordered_set<std::uint32_t> planted(cfg.planted_rock_tokens.begin(),
                                              cfg.planted_rock_tokens.end());
    const auto kicked_v = world.kicked_tokens();
    std::unordered_set<std::uint32_t> kicked(kicked_v.begin(), kicked_v.end());

    std::vector<double> planted_rel, kicked_rel, other_rel;
    std::vector<std::uint32_t> tokens;
    for (const auto& [token, _] : pre) tokens.push_back(token);
    std::sort(tokens.begin(), tokens.end());
    for (std::uint32_t token : tokens) {
        const double before = pre.at(token);
        if (before <= 1e-12) continue;
        const double after = post.count(token) ? post.at(token) : 0.0;
        const double rel = (before - after) / before;
        if (planted.count(token))
            planted_rel.push_back(rel);
        else if (kicked.count(token))
            kicked_rel.push_back(rel);
        else
            other_rel.push_back(rel);
    }
    ProbeArm arm;
    arm.optimizer = kind == OptimizerKind::sgd ? "sgd" : "adaptive_moment";
    if (!planted_rel.empty()) arm.planted_median_relative_reduction = median(planted_rel);
    if (!kicked_rel.empty()) arm.kicked_median_relative_reduction = median(kicked_rel);
    if (!other_rel.empty()) arm.other_median_relative_reduction = median(other_rel);
    return arm;
}

}  // namespace

ProbeReport optimizer_suppression_probe(const SimConfig& base, OptimizerKind first,
                                        OptimizerKind second) {
    ProbeReport report;
    report.first = run_probe_arm(base, first);
    report.second = run_probe_arm(base, second);
    return report;
}

std::string serialize_probe_report(const ProbeReport& report) {
    std::ostringstream out;
    for (const ProbeArm* arm : {&report.first, &report.second}) {
        out << arm->optimizer << ": planted=" << format_double(arm->planted_median_relative_reduction)
            << " kicked=" << format_double(arm->kicked_median_relative_reduction)
            << " other=" << format_double(arm->other_median_relative_reduction) << '\n';
    }
    return out.str();
}

}  // namespace rockscope
