#ifndef ROCKSCOPE_TRACE_HPP
#define ROCKSCOPE_TRACE_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace rockscope {

inline constexpr int kTraceSchemaVersion = 1;

// Truncated top-k probability vector with explicit mass for omitted ids.
// The simulator emits the full support (tail_mass 0); external stacks may
// truncate.
struct TruncatedDist {
    std::vector<std::uint32_t> ids;  // sorted by descending probability
    std::vector<double> ps;          // positive, aligned with ids
    double tail_mass = 0.0;
};

// One sampled trajectory: token ids plus per-position losses at one or more
// named checkpoints. Losses are per-token reverse-KL estimates, stored as
// produced by the emitting stack.
struct TrajectoryTrace {
    std::uint64_t trajectory_id = 0;
    std::uint64_t prompt_id = 0;
    std::vector<std::uint32_t> tokens;
    // checkpoint name -> one non-negative loss per position
    std::map<std::string, std::vector<double>> losses;
    // optional: checkpoint name -> per-position (student, teacher) pair
    std::map<std::string, std::vector<std::pair<TruncatedDist, TruncatedDist>>> dists;

    std::size_t length() const { return tokens.size(); }
};

struct Vocabulary {
    std::vector<std::string> id_to_string;  // ids dense in [0, size)
    std::size_t size() const { return id_to_string.size(); }
};

struct Corpus {
    std::vector<TrajectoryTrace> trajectories;
    Vocabulary vocabulary;
    std::vector<std::string> checkpoints;  // order of first appearance

    bool has_checkpoint(const std::string& name) const;
    std::size_t total_positions() const;
};

// One aligned (pre, post) loss pair per position.
struct OccurrencePair {
    std::uint64_t trajectory_id = 0;
    std::uint32_t position = 0;
    std::uint32_t token_id = 0;
    double loss_pre = 0.0;
    double loss_post = 0.0;
};

// Throws ValidationError naming the offending trajectory and field.
void validate_trajectory(const TrajectoryTrace& t);
void validate_corpus(const Corpus& c);

// Streaming line-delimited read; one trajectory per line. Malformed lines
// raise ParseError with the line number.
Corpus load_corpus(const std::string& trace_path, const std::string& vocab_path);

std::vector<TrajectoryTrace> load_trajectories(const std::string& trace_path);
Vocabulary load_vocabulary(const std::string& vocab_path);

// Byte-stable output: fixed key order, floats in shortest round-trip form
// capped at 9 significant digits.
void write_corpus(const Corpus& corpus, const std::string& trace_path);
void write_vocabulary(const Vocabulary& vocab, const std::string& vocab_path);

std::string trajectory_to_line(const TrajectoryTrace& t);

// One pair per position, trajectory order then position order.
std::vector<OccurrencePair> align_checkpoints(const Corpus& corpus, const std::string& pre,
                                              const std::string& post);

}  // namespace rockscope

#endif
