#ifndef ROCKSCOPE_SIMLAB_HPP
#define ROCKSCOPE_SIMLAB_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rockscope/knockout.hpp"
#include "rockscope/trace.hpp"

namespace rockscope {

enum class OptimizerKind { sgd, adaptive_moment };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adaptive_moment;
    double learning_rate = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Desk-scale on-policy distillation world: a table-driven teacher over a
// digit-sum task with structural scaffolding, a tabular student initialized
// as the teacher plus per-row noise, planted rock biases and a few
// heavy-noise rare rows, and exact per-row reverse-KL losses and gradients.
//
// Task grammar. A prompt is <d1, '+', d2, '='>; the goal digit is
// (d1+d2) mod 10 and a trajectory is correct iff it contains the run
// <'=>', goal, '<end>'>. The teacher walks fixed scaffold templates
// (template = d2 mod 2), each a chain of [guide, filler, planted] periods,
// with a three-way decision after the final period: emit '=>' and answer,
// open another segment, or detour through the herald token into a short
// bonus segment of rare tokens. Rows are keyed by the goal digit (answer
// slot only) plus the last markov_order tokens, wildcarded where the grammar
// does not depend on the older token.
//
// Planted mechanics. Rock tokens carry a fixed negative logit offset in
// every row whose support contains them, i.e. every context where they are
// grammatical; the offsets sit in many filler-keyed rows, so each individual
// row is visited rarely and the mismatch survives training. The bonus-slot
// row instead concentrates a large kick on a single hot row, giving rare
// high-KL tokens that training repairs quickly.
struct SimConfig {
    std::size_t vocab_size = 64;
    std::size_t markov_order = 2;  // the built-in grammar requires 2
    double zipf_exponent = 1.2;    // shapes filler frequencies and alternative spreads
    std::vector<std::uint32_t> planted_rock_tokens;     // default: the 12 planted scaffolds
    std::optional<std::uint32_t> planted_pillar_token;  // default: the answer separator
    OptimizerConfig optimizer;
    std::size_t prompts = 500;
    std::size_t rollouts_per_prompt = 4;
    std::size_t steps = 2500;
    std::size_t batch_trajectories = 1;
    std::size_t max_len = 140;
    double noise_sigma = 0.1;
    double rock_offset = 2.2;  // base magnitude of the planted logit bias
    double kick_offset = 2.0;  // magnitude of the bonus-row kick
    bool emit_dists = true;    // full per-position (student, teacher) rows, tail_mass 0
    std::uint64_t seed = 5;
};

// Default config including the planted token ids; the toolkit's golden runs
// use this unchanged.
SimConfig default_sim_config();

// Fixed id layout of the synthetic vocabulary.
struct VocabLayout {
    std::uint32_t op = 10, eq = 11, sep = 12, end = 13, herald = 14;
    std::uint32_t planted0 = 15;  // 12 planted scaffolds
    std::uint32_t guide0 = 27;    // 12 guide scaffolds
    std::uint32_t filler0 = 39;   // 8 fillers
    std::uint32_t bonus0 = 47;    // 6 bonus (rare high-KL) tokens
    std::uint32_t reserved0 = 53; // phantoms: zero probability everywhere

    static constexpr std::size_t kPlanted = 12, kGuides = 12, kFillers = 8, kBonus = 6;

    bool is_digit(std::uint32_t id) const { return id < 10; }
    bool is_planted(std::uint32_t id) const { return id >= planted0 && id < planted0 + kPlanted; }
    bool is_guide(std::uint32_t id) const { return id >= guide0 && id < guide0 + kGuides; }
    bool is_filler(std::uint32_t id) const { return id >= filler0 && id < filler0 + kFillers; }
    bool is_bonus(std::uint32_t id) const { return id >= bonus0 && id < bonus0 + kBonus; }
};

struct SimRow {
    std::vector<std::uint32_t> support;
    std::vector<double> teacher_probs;
    std::vector<double> teacher_logits;  // ln(teacher_probs)
    std::vector<double> student_logits;
    // adaptive-moment state, updated lazily per row
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t adam_steps = 0;
};

class SimWorld {
  public:
    SimWorld(SimConfig config);

    const SimConfig& config() const { return config_; }
    const VocabLayout& layout() const { return layout_; }
    Vocabulary vocabulary() const;

    // Rows are built lazily; contents depend only on (config, key).
    SimRow& row(std::uint64_t key) const;
    std::uint64_t context_key(std::uint32_t goal, std::span<const std::uint32_t> context) const;

    std::vector<double> student_probs(const SimRow& row) const;
    double row_kl(const SimRow& row) const;  // reverse KL student || teacher
    // Per-support-token ln(student) - ln(teacher), computed through a shared
    // logsumexp path so an unperturbed row yields exact zeros.
    std::vector<double> row_log_ratios(const SimRow& row) const;

    // Canonical keys of every grammar-reachable row (lazily materializes them).
    std::vector<std::uint64_t> grammar_row_keys() const;

    std::vector<std::uint32_t> kicked_tokens() const;  // the bonus tokens
    std::uint32_t goal_of_prompt(std::uint32_t d1, std::uint32_t d2) const { return (d1 + d2) % 10; }
    std::vector<std::uint32_t> prompt_tokens(std::size_t prompt_index) const;
    bool is_correct(std::span<const std::uint32_t> trajectory) const;

    // Student-probability-weighted mean row KL per token over the grammar
    // rows whose support contains it.
    std::unordered_map<std::uint32_t, double> mean_kl_by_token() const;

    // Current student logit values for the given tokens across every grammar
    // row, in a fixed order; used for bit-identity checks under freezing.
    std::vector<double> logit_snapshot(const std::vector<std::uint32_t>& tokens) const;

  private:
    friend struct SimAccess;
    SimConfig config_;
    VocabLayout layout_;
    mutable std::unordered_map<std::uint64_t, SimRow> rows_;
};

SimWorld build_world(const SimConfig& config);

// Ancestral sampling from the current student; per-position losses are the
// exact reverse KL of the sampled row, recorded under `checkpoint`.
// Deterministic per seed; prompt p is (d1, d2) = (p mod 10, (p/10) mod 10).
std::vector<TrajectoryTrace> rollout(const SimWorld& world, std::size_t prompts,
                                     std::size_t rollouts_per_prompt, std::uint64_t seed,
                                     const std::string& checkpoint = "pre", bool with_dists = true);

// Re-evaluates the stored trajectories' losses (and optionally dists) under
// the current student and records them as `checkpoint`.
void add_checkpoint(const SimWorld& world, std::vector<TrajectoryTrace>& trajectories,
                    const std::string& checkpoint, bool with_dists);

Corpus make_corpus(const SimWorld& world, std::vector<TrajectoryTrace> trajectories);

struct MaskSource {
    // Per-position weights for a trajectory's tokens; empty function = all 1.
    std::function<std::vector<double>(std::span<const std::uint32_t>)> position_weights;
    // Gradient components of these token columns are zeroed in every row
    // update, so their logits stay bit-identical through training.
    std::vector<std::uint32_t> frozen_tokens;
};

// Weight 0 (or lambda) at positions whose token is in rock_set or within
// radius of one, 1 elsewhere: the decode-time window analog used in
// training batches.
MaskSource make_freeze_mask(const std::unordered_set<std::uint32_t>& rock_set, std::size_t radius,
                            double lambda);

struct TrainLogRow {
    std::size_t step = 0;
    double batch_mean_kl = 0.0;
    std::size_t active_terms = 0;
    std::size_t batch_positions = 0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    Corpus probe;  // fixed probe trajectories with "pre" and "post" losses
    double probe_pre_mean_kl = 0.0;
    double probe_post_mean_kl = 0.0;
    std::size_t total_active_terms = 0;
    std::size_t total_positions = 0;
};

// On-policy training loop: each step samples batch trajectories (fresh
// rollouts, or cycled from `offline` when given), accumulates exact
// mask-weighted reverse-KL row gradients and applies the optimizer. Probe
// trajectories are sampled before training and re-scored afterwards.
TrainResult train(SimWorld& world, const std::optional<std::vector<TrajectoryTrace>>& offline,
                  const MaskSource* mask, std::size_t steps, std::uint64_t seed);

// Student (or teacher) as a decoding policy over the full vocabulary.
class StudentPolicy : public DecodingPolicy {
  public:
    explicit StudentPolicy(const SimWorld& world, bool use_teacher = false)
        : world_(world), use_teacher_(use_teacher) {}
    std::size_t vocab_size() const override { return world_.config().vocab_size; }
    void distribution(std::span<const std::uint32_t> context, std::vector<double>& out) const override;

  private:
    const SimWorld& world_;
    bool use_teacher_;
};

// Per-prompt binary indicators: 1 iff a strict majority of the prompt's
// rollouts satisfies the answer rule. Paired seeds: identical (policy, seed)
// yields identical indicator vectors.
std::vector<std::uint8_t> evaluate_accuracy(const SimWorld& world, const DecodingPolicy& policy,
                                            std::size_t prompts, std::size_t rollouts_per_prompt,
                                            std::uint64_t seed);

class SimEnvironment : public EvalEnvironment {
  public:
    SimEnvironment(const SimWorld& world, std::size_t prompts, std::size_t rollouts_per_prompt)
        : world_(world), policy_(world), prompts_(prompts), rollouts_(rollouts_per_prompt) {}

    std::size_t prompt_count() const override { return prompts_; }
    const DecodingPolicy& base_policy() const override { return policy_; }
    std::uint32_t fallback_token() const override { return world_.layout().end; }
    std::vector<std::uint8_t> evaluate(const DecodingPolicy& policy, std::uint64_t seed) const override {
        return evaluate_accuracy(world_, policy, prompts_, rollouts_, seed);
    }

  private:
    const SimWorld& world_;
    StudentPolicy policy_;
    std::size_t prompts_;
    std::size_t rollouts_;
};

struct ProbeArm {
    std::string optimizer;
    double planted_median_relative_reduction = 0.0;
    double kicked_median_relative_reduction = 0.0;
    double other_median_relative_reduction = 0.0;
};

struct ProbeReport {
    ProbeArm first;
    ProbeArm second;
};

// Two training runs differing only in the optimizer, same seed; reports
// per-group relative KL reduction. Descriptive, deterministic per seed.
ProbeReport optimizer_suppression_probe(const SimConfig& base, OptimizerKind first, OptimizerKind second);

std::string serialize_probe_report(const ProbeReport& report);

}  // namespace rockscope

#endif
