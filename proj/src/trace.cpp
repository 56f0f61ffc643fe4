#include "rockscope/trace.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rockscope/error.hpp"
#include "rockscope/numeric.hpp"

namespace rockscope {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

bool Corpus::has_checkpoint(const std::string& name) const {
    for (const auto& c : checkpoints)
        if (c == name) return true;
    return false;
}

std::size_t Corpus::total_positions() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.length();
    return n;
}

namespace {

void validate_dist(const TruncatedDist& d, std::uint64_t traj_id, const char* side) {
    if (d.ids.size() != d.ps.size())
        throw ValidationError("trajectory " + std::to_string(traj_id) + ": dist ids/ps length mismatch (" +
                              side + ")");
    double sum = d.tail_mass;
    double prev = 1e300;
    for (std::size_t i = 0; i < d.ps.size(); ++i) {
        if (!(d.ps[i] > 0.0))
            throw ValidationError("trajectory " + std::to_string(traj_id) +
                                  ": non-positive probability in dist (" + side + ")");
        if (d.ps[i] > prev + 1e-12)
            throw ValidationError("trajectory " + std::to_string(traj_id) +
                                  ": dist entries not sorted by descending probability (" + side + ")");
        prev = d.ps[i];
        sum += d.ps[i];
    }
    if (d.tail_mass < 0.0 || d.tail_mass > 1.0)
        throw ValidationError("trajectory " + std::to_string(traj_id) + ": tail_mass outside [0,1] (" +
                              side + ")");
    if (sum < 1.0 - 1e-6 || sum > 1.0 + 1e-6)
        throw ValidationError("trajectory " + std::to_string(traj_id) +
                              ": dist mass does not sum to 1 (" + side + ")");
    std::vector<std::uint32_t> ids = d.ids;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw ValidationError("trajectory " + std::to_string(traj_id) + ": duplicate token id in dist (" +
                              side + ")");
}

}  // namespace

void validate_trajectory(const TrajectoryTrace& t) {
    const std::string id = std::to_string(t.trajectory_id);
    if (t.losses.empty()) throw ValidationError("trajectory " + id + ": field losses: no checkpoint present");
    for (const auto& [name, values] : t.losses) {
        if (values.size() != t.tokens.size())
            throw ValidationError("trajectory " + id + ": field losses[" + name +
                                  "]: length != tokens length");
        for (double v : values)
            if (!(v >= 0.0))
                throw ValidationError("trajectory " + id + ": field losses[" + name +
                                      "]: negative or non-finite loss");
    }
    for (const auto& [name, pairs] : t.dists) {
        if (!t.losses.count(name))
            throw ValidationError("trajectory " + id + ": field dists[" + name +
                                  "]: no matching loss checkpoint");
        if (pairs.size() != t.tokens.size())
            throw ValidationError("trajectory " + id + ": field dists[" + name +
                                  "]: does not cover the same positions as losses");
        for (const auto& [student, teacher] : pairs) {
            validate_dist(student, t.trajectory_id, "student");
            validate_dist(teacher, t.trajectory_id, "teacher");
        }
    }
}

void validate_corpus(const Corpus& c) {
    for (const auto& t : c.trajectories) {
        validate_trajectory(t);
        for (std::uint32_t tok : t.tokens)
            if (tok >= c.vocabulary.size())
                throw ValidationError("trajectory " + std::to_string(t.trajectory_id) +
                                      ": field tokens: id " + std::to_string(tok) +
                                      " outside vocabulary of size " + std::to_string(c.vocabulary.size()));
        for (const auto& name : c.checkpoints)
            if (!t.losses.count(name))
                throw ValidationError("trajectory " + std::to_string(t.trajectory_id) +
                                      ": field losses: missing checkpoint " + name);
    }
}

namespace {

TruncatedDist dist_from_json(const ordered_json& j) {
    TruncatedDist d;
    const auto& ids = j.at("ids");
    const auto& ps = j.at("ps");
    d.ids.reserve(ids.size());
    d.ps.reserve(ps.size());
    for (const auto& v : ids) d.ids.push_back(v.get<std::uint32_t>());
    for (const auto& v : ps) d.ps.push_back(v.get<double>());
    d.tail_mass = j.at("tail").get<double>();
    return d;
}

// Returns the trajectory plus the checkpoint names in file order.
TrajectoryTrace trajectory_from_json(const ordered_json& j, std::vector<std::string>* order) {
    TrajectoryTrace t;
    const int schema = j.at("schema").get<int>();
    if (schema != kTraceSchemaVersion)
        throw Error("unsupported trace schema version " + std::to_string(schema));
    t.trajectory_id = j.at("trajectory_id").get<std::uint64_t>();
    t.prompt_id = j.at("prompt_id").get<std::uint64_t>();
    for (const auto& v : j.at("tokens")) t.tokens.push_back(v.get<std::uint32_t>());
    for (const auto& [name, arr] : j.at("losses").items()) {
        std::vector<double> values;
        values.reserve(arr.size());
        for (const auto& v : arr) values.push_back(v.get<double>());
        if (!t.losses.emplace(name, std::move(values)).second)
            throw ValidationError("trajectory " + std::to_string(t.trajectory_id) +
                                  ": duplicate checkpoint " + name);
        if (order) order->push_back(name);
    }
    if (j.contains("dists")) {
        for (const auto& [name, arr] : j.at("dists").items()) {
            std::vector<std::pair<TruncatedDist, TruncatedDist>> pairs;
            pairs.reserve(arr.size());
            for (const auto& pos : arr)
                pairs.emplace_back(dist_from_json(pos.at(0)), dist_from_json(pos.at(1)));
            t.dists.emplace(name, std::move(pairs));
        }
    }
    return t;
}

void append_double_array(std::string& out, const std::vector<double>& xs) {
    out.push_back('[');
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out.push_back(',');
        out += format_double(xs[i]);
    }
    out.push_back(']');
}

void append_dist(std::string& out, const TruncatedDist& d) {
    out += "{\"ids\":[";
    for (std::size_t i = 0; i < d.ids.size(); ++i) {
        if (i) out.push_back(',');
        out += std::to_string(d.ids[i]);
    }
    out += "],\"ps\":";
    append_double_array(out, d.ps);
    out += ",\"tail\":";
    out += format_double(d.tail_mass);
    out.push_back('}');
}

std::vector<std::string> serialization_order(const TrajectoryTrace& t,
                                             const std::vector<std::string>& preferred) {
    std::vector<std::string> order;
    for (const auto& name : preferred)
        if (t.losses.count(name)) order.push_back(name);
    for (const auto& [name, _] : t.losses)
        if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
    return order;
}

// Serialized by hand so float formatting and key order stay byte-stable;
// nlohmann only escapes the checkpoint names.
std::string trajectory_line(const TrajectoryTrace& t, const std::vector<std::string>& checkpoint_order) {
    const std::vector<std::string> order = serialization_order(t, checkpoint_order);
    std::string out;
    out.reserve(64 + t.tokens.size() * 8);
    out += "{\"schema\":";
    out += std::to_string(kTraceSchemaVersion);
    out += ",\"trajectory_id\":";
    out += std::to_string(t.trajectory_id);
    out += ",\"prompt_id\":";
    out += std::to_string(t.prompt_id);
    out += ",\"tokens\":[";
    for (std::size_t i = 0; i < t.tokens.size(); ++i) {
        if (i) out.push_back(',');
        out += std::to_string(t.tokens[i]);
    }
    out += "],\"losses\":{";
    bool first = true;
    for (const auto& name : order) {
        if (!first) out.push_back(',');
        first = false;
        out += json(name).dump();
        out.push_back(':');
        append_double_array(out, t.losses.at(name));
    }
    out.push_back('}');
    if (!t.dists.empty()) {
        out += ",\"dists\":{";
        first = true;
        for (const auto& name : order) {
            auto it = t.dists.find(name);
            if (it == t.dists.end()) continue;
            if (!first) out.push_back(',');
            first = false;
            out += json(name).dump();
            out += ":[";
            const auto& pairs = it->second;
            for (std::size_t i = 0; i < pairs.size(); ++i) {
                if (i) out.push_back(',');
                out.push_back('[');
                append_dist(out, pairs[i].first);
                out.push_back(',');
                append_dist(out, pairs[i].second);
                out.push_back(']');
            }
            out.push_back(']');
        }
        out.push_back('}');
    }
    out.push_back('}');
    return out;
}

std::vector<TrajectoryTrace> load_trajectories_impl(const std::string& trace_path,
                                                    std::vector<std::string>* first_order) {
    std::ifstream in(trace_path);
    if (!in) throw IoError("cannot open trace file: " + trace_path);
    std::vector<TrajectoryTrace> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const ordered_json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
        TrajectoryTrace t;
        try {
            t = trajectory_from_json(j, out.empty() ? first_order : nullptr);
        } catch (const ordered_json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
        validate_trajectory(t);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace

std::string trajectory_to_line(const TrajectoryTrace& t) { return trajectory_line(t, {}); }

std::vector<TrajectoryTrace> load_trajectories(const std::string& trace_path) {
    return load_trajectories_impl(trace_path, nullptr);
}

Vocabulary load_vocabulary(const std::string& vocab_path) {
    std::ifstream in(vocab_path);
    if (!in) throw IoError("cannot open vocabulary file: " + vocab_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(e.what(), 1);
    }
    Vocabulary v;
    const std::size_t size = j.at("size").get<std::size_t>();
    v.id_to_string.assign(size, std::string());
    std::vector<bool> seen(size, false);
    for (const auto& [key, value] : j.at("tokens").items()) {
        std::size_t id = 0;
        try {
            id = std::stoull(key);
        } catch (const std::exception&) {
            throw ValidationError("vocabulary: non-numeric token id '" + key + "'");
        }
        if (id >= size)
            throw ValidationError("vocabulary: token id " + key + " outside [0, size)");
        v.id_to_string[id] = value.get<std::string>();
        seen[id] = true;
    }
    for (std::size_t i = 0; i < size; ++i)
        if (!seen[i])
            throw ValidationError("vocabulary: ids not dense, missing " + std::to_string(i));
    return v;
}

Corpus load_corpus(const std::string& trace_path, const std::string& vocab_path) {
    Corpus c;
    c.vocabulary = load_vocabulary(vocab_path);
    c.trajectories = load_trajectories_impl(trace_path, &c.checkpoints);
    validate_corpus(c);
    return c;
}

void write_corpus(const Corpus& corpus, const std::string& trace_path) {
    std::ofstream out(trace_path, std::ios::binary);
    if (!out) throw IoError("cannot open trace file for writing: " + trace_path);
    for (const auto& t : corpus.trajectories) {
        out << trajectory_line(t, corpus.checkpoints) << '\n';
        if (!out) throw IoError("write failed: " + trace_path);
    }
}

void write_vocabulary(const Vocabulary& vocab, const std::string& vocab_path) {
    std::ofstream out(vocab_path, std::ios::binary);
    if (!out) throw IoError("cannot open vocabulary file for writing: " + vocab_path);
    out << "{\"schema\":" << kTraceSchemaVersion << ",\"size\":" << vocab.size() << ",\"tokens\":{";
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        if (i) out << ',';
        out << json(std::to_string(i)).dump() << ':' << json(vocab.id_to_string[i]).dump();
    }
    out << "}}\n";
    if (!out) throw IoError("write failed: " + vocab_path);
}

std::vector<OccurrencePair> align_checkpoints(const Corpus& corpus, const std::string& pre,
                                              const std::string& post) {
    if (!corpus.has_checkpoint(pre)) throw Error("missing checkpoint: " + pre);
    if (!corpus.has_checkpoint(post)) throw Error("missing checkpoint: " + post);
    std::vector<OccurrencePair> out;
    out.reserve(corpus.total_positions());
    for (const auto& t : corpus.trajectories) {
        const auto& lp = t.losses.at(pre);
        const auto& lq = t.losses.at(post);
        for (std::size_t i = 0; i < t.tokens.size(); ++i) {
            out.push_back({t.trajectory_id, static_cast<std::uint32_t>(i), t.tokens[i], lp[i], lq[i]});
        }
    }
    return out;
}

}  // namespace rockscope
