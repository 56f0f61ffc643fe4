#include "rockscope/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "json.hpp"
#include "rockscope/cutoff.hpp"
#include "rockscope/detect.hpp"
#include "rockscope/digest.hpp"
#include "rockscope/error.hpp"
#include "rockscope/gradgeom.hpp"
#include "rockscope/knockout.hpp"
#include "rockscope/numeric.hpp"
#include "rockscope/reweight.hpp"
#include "rockscope/rng.hpp"
#include "rockscope/simlab.hpp"
#include "rockscope/stats.hpp"
#include "rockscope/trace.hpp"

namespace rockscope {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool g_quiet = false;

json default_config_json() {
    const SimConfig sim = default_sim_config();
    json planted = json::array();
    for (std::uint32_t id : sim.planted_rock_tokens) planted.push_back(id);
    return json{
        {"seed", 5},
        {"sim",
         {{"vocab_size", sim.vocab_size},
          {"markov_order", sim.markov_order},
          {"zipf_exponent", sim.zipf_exponent},
          {"planted_rock_tokens", planted},
          {"planted_pillar_token", *sim.planted_pillar_token},
          {"optimizer", "adaptive_moment"},
          {"learning_rate", sim.optimizer.learning_rate},
          {"beta1", sim.optimizer.beta1},
          {"beta2", sim.optimizer.beta2},
          {"epsilon", sim.optimizer.epsilon},
          {"prompts", sim.prompts},
          {"rollouts_per_prompt", sim.rollouts_per_prompt},
          {"steps", sim.steps},
          {"batch_trajectories", sim.batch_trajectories},
          {"max_len", sim.max_len},
          {"noise_sigma", sim.noise_sigma},
          {"rock_offset", sim.rock_offset},
          {"kick_offset", sim.kick_offset},
          {"emit_dists", sim.emit_dists}}},
        {"detect",
         {{"pre_checkpoint", "pre"},
          {"post_checkpoint", "post"},
          {"tau_pre_mode", "percentile"},
          {"tau_pre", 80.0},
          {"tau_post_mode", "percentile"},
          {"tau_post", 80.0},
          {"window_radius", 5},
          {"gamma", 0.5},
          {"eta", 0.3},
          {"selection_mode", "top_k"},
          {"top_k", 20},
          {"tau_r", 0.0},
          {"pairwise_cap", 2000}}},
        {"sweep",
         {{"sizes", json::array({50, 100, 200, 400})},
          {"ks", json::array({5, 10, 15, 20, 30})},
          {"repeats", 8},
          {"min_jaccard", 0.70},
          {"min_coverage", 0.50}}},
        {"gradgeom",
         {{"checkpoint", "pre"},
          {"freq_percentile", 20.0},
          {"kl_percentile", 95.0},
          {"random_controls", 12}}},
        {"knockout",
         {{"prompts", 200},
          {"rollouts_per_prompt", 4},
          {"resamples", 10000},
          {"alpha", 0.05},
          {"epsilon", 0.01},
          {"candidates", 40}}},  // screening pool: 2x the default core K
        {"reweight", {{"lambda", 0.0}, {"radius", 5}, {"regime", "rock_freeze"}}}};
}

void apply_override(json& config, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must be key=value, got: " + spec);
    const std::string keypath = spec.substr(0, eq);
    const std::string value_text = spec.substr(eq + 1);

    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= keypath.size()) {
        const auto dot = keypath.find('.', start);
        if (dot == std::string::npos) {
            parts.push_back(keypath.substr(start));
            break;
        }
        parts.push_back(keypath.substr(start, dot - start));
        start = dot + 1;
    }

    json* node = &config;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i]))
            throw ConfigError("unknown override key: " + keypath);
        node = &(*node)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!node->is_object() || !node->contains(leaf))
        throw ConfigError("unknown override key: " + keypath);

    json value;
    try {
        value = json::parse(value_text);
    } catch (const json::exception&) {
        value = value_text;  // bare string
    }
    json& target = (*node)[leaf];
    const bool both_numeric = target.is_number() && value.is_number();
    if (!both_numeric && target.type() != value.type())
        throw ConfigError("override type mismatch for key: " + keypath);
    target = value;
}

SimConfig sim_config_from_json(const json& config) {
    const json& s = config.at("sim");
    SimConfig cfg;
    cfg.vocab_size = s.at("vocab_size").get<std::size_t>();
    cfg.markov_order = s.at("markov_order").get<std::size_t>();
    cfg.zipf_exponent = s.at("zipf_exponent").get<double>();
    cfg.planted_rock_tokens.clear();
    for (const auto& v : s.at("planted_rock_tokens")) cfg.planted_rock_tokens.push_back(v.get<std::uint32_t>());
    cfg.planted_pillar_token = s.at("planted_pillar_token").get<std::uint32_t>();
    cfg.optimizer.kind = s.at("optimizer").get<std::string>() == "sgd" ? OptimizerKind::sgd
                                                                       : OptimizerKind::adaptive_moment;
    cfg.optimizer.learning_rate = s.at("learning_rate").get<double>();
    cfg.optimizer.beta1 = s.at("beta1").get<double>();
    cfg.optimizer.beta2 = s.at("beta2").get<double>();
    cfg.optimizer.epsilon = s.at("epsilon").get<double>();
    cfg.prompts = s.at("prompts").get<std::size_t>();
    cfg.rollouts_per_prompt = s.at("rollouts_per_prompt").get<std::size_t>();
    cfg.steps = s.at("steps").get<std::size_t>();
    cfg.batch_trajectories = s.at("batch_trajectories").get<std::size_t>();
    cfg.max_len = s.at("max_len").get<std::size_t>();
    cfg.noise_sigma = s.at("noise_sigma").get<double>();
    cfg.rock_offset = s.at("rock_offset").get<double>();
    cfg.kick_offset = s.at("kick_offset").get<double>();
    cfg.emit_dists = s.at("emit_dists").get<bool>();
    cfg.seed = config.at("seed").get<std::uint64_t>();
    return cfg;
}

DetectionConfig detection_config_from_json(const json& config) {
    const json& d = config.at("detect");
    DetectionConfig cfg;
    cfg.pre_checkpoint = d.at("pre_checkpoint").get<std::string>();
    cfg.post_checkpoint = d.at("post_checkpoint").get<std::string>();
    cfg.tau_pre.mode = d.at("tau_pre_mode").get<std::string>() == "absolute" ? Threshold::Mode::absolute
                                                                             : Threshold::Mode::percentile;
    cfg.tau_pre.value = d.at("tau_pre").get<double>();
    cfg.tau_post.mode = d.at("tau_post_mode").get<std::string>() == "absolute"
                            ? Threshold::Mode::absolute
                            : Threshold::Mode::percentile;
    cfg.tau_post.value = d.at("tau_post").get<double>();
    cfg.window_radius = d.at("window_radius").get<std::size_t>();
    cfg.gamma = d.at("gamma").get<double>();
    cfg.eta = d.at("eta").get<double>();
    cfg.selection.mode = d.at("selection_mode").get<std::string>() == "score_threshold"
                             ? Selection::Mode::score_threshold
                             : Selection::Mode::top_k;
    cfg.selection.k = d.at("top_k").get<std::size_t>();
    cfg.selection.tau_r = d.at("tau_r").get<double>();
    cfg.pairwise_cap = d.at("pairwise_cap").get<std::size_t>();
    cfg.seed = config.at("seed").get<std::uint64_t>();
    return cfg;
}

struct ManifestBuilder {
    json inputs = json::array();
    json outputs = json::array();

    void input(const std::string& path) {
        // digest first: a throw inside a json initializer list leaks its refs
        const std::string digest = Sha256::of_file(path);
        inputs.push_back({{"path", path}, {"sha256", digest}});
    }
    void output(const std::string& path) {
        const std::string digest = Sha256::of_file(path);
        outputs.push_back({{"path", path}, {"sha256", digest}});
    }
    void write(const std::string& command, const json& config, const std::string& dir) const {
        json doc{{"schema", 1},      {"tool", "rockscope"},  {"version", kToolVersion},
                 {"command", command}, {"config", config},     {"seed", config.at("seed")},
                 {"inputs", inputs},   {"outputs", outputs}};
        const std::string path = dir + "/manifest_" + command + ".json";
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write manifest: " + path);
        out << doc.dump(2) << '\n';
    }
};

std::string trace_path(const std::string& dir) { return dir + "/trace.jsonl"; }
std::string vocab_path(const std::string& dir) { return dir + "/vocab.json"; }

void write_training_log(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write training log: " + path);
    out << "step,batch_mean_kl,active_terms,batch_positions\n";
    for (const auto& row : log)
        out << row.step << ',' << format_double(row.batch_mean_kl) << ',' << row.active_terms << ','
            << row.batch_positions << '\n';
}

void stage_simulate(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    SimConfig cfg = sim_config_from_json(config);
    SimWorld world = build_world(cfg);
    TrainResult result = train(world, std::nullopt, nullptr, cfg.steps, cfg.seed);
    write_corpus(result.probe, trace_path(dir));
    write_vocabulary(result.probe.vocabulary, vocab_path(dir));
    write_training_log(result.log, dir + "/training_log.csv");
    json summary{{"probe_pre_mean_kl", result.probe_pre_mean_kl},
                 {"probe_post_mean_kl", result.probe_post_mean_kl},
                 {"total_active_terms", result.total_active_terms},
                 {"total_positions", result.total_positions},
                 {"trajectories", result.probe.trajectories.size()}};
    std::ofstream sum(dir + "/simulate_summary.json", std::ios::binary);
    sum << summary.dump(2) << '\n';
    manifest.output(trace_path(dir));
    manifest.output(vocab_path(dir));
    manifest.output(dir + "/training_log.csv");
    manifest.output(dir + "/simulate_summary.json");
}

void stage_detect(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    manifest.input(trace_path(dir));
    manifest.input(vocab_path(dir));
    Corpus corpus = load_corpus(trace_path(dir), vocab_path(dir));
    DetectionConfig cfg = detection_config_from_json(config);
    DetectionReport report = select_rock_tokens(corpus, cfg);
    write_detection_report(report, corpus.vocabulary, dir + "/detection.json", dir + "/detection.csv");
    manifest.output(dir + "/detection.json");
    manifest.output(dir + "/detection.csv");
}

void stage_sweep(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    manifest.input(trace_path(dir));
    manifest.input(vocab_path(dir));
    Corpus corpus = load_corpus(trace_path(dir), vocab_path(dir));
    DetectionConfig dcfg = detection_config_from_json(config);
    const json& s = config.at("sweep");
    std::vector<std::size_t> sizes, ks;
    for (const auto& v : s.at("sizes")) sizes.push_back(v.get<std::size_t>());
    for (const auto& v : s.at("ks")) ks.push_back(v.get<std::size_t>());
    SweepResult sweep = stability_sweep(corpus, dcfg, sizes, ks, s.at("repeats").get<std::size_t>(),
                                        SplitMix64::derive(config.at("seed").get<std::uint64_t>(), 0x53EEULL));
    ChosenK chosen = choose_k(sweep, s.at("min_jaccard").get<double>(), s.at("min_coverage").get<double>());
    sweep.chosen_k = chosen.k;
    if (!g_quiet)
        std::cout << "chosen K = " << chosen.k << " (mean Jaccard " << format_double(chosen.mean_jaccard)
                  << ", coverage " << format_double(chosen.coverage)
                  << (chosen.fallback ? ", fallback" : "") << ")\n";
    write_sweep_csv(sweep, dir + "/sweep_jaccard.csv", dir + "/sweep_coverage.csv");
    json doc{{"chosen_k", chosen.k},
             {"fallback", chosen.fallback},
             {"mean_jaccard", chosen.mean_jaccard},
             {"coverage", chosen.coverage}};
    std::ofstream out(dir + "/cutoff.json", std::ios::binary);
    out << doc.dump(2) << '\n';
    manifest.output(dir + "/sweep_jaccard.csv");
    manifest.output(dir + "/sweep_coverage.csv");
    manifest.output(dir + "/cutoff.json");
}

json group_persistence_to_json(const GroupPersistence& gp) {
    json j{{"group", to_string(gp.group)},
           {"n_tokens", gp.n_tokens},
           {"status", gp.status},
           {"median_delta", gp.median_delta},
           {"median_relative_reduction", gp.median_relative_reduction}};
    if (gp.wilcoxon) {
        j["wilcoxon_w"] = gp.wilcoxon->statistic;
        j["wilcoxon_p"] = gp.wilcoxon->p_value;
    }
    return j;
}

void stage_gradgeom(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    manifest.input(trace_path(dir));
    manifest.input(vocab_path(dir));
    manifest.input(dir + "/detection.json");
    Corpus corpus = load_corpus(trace_path(dir), vocab_path(dir));
    DetectionReport detection = load_detection_report(dir + "/detection.json");
    const json& g = config.at("gradgeom");
    const std::string checkpoint = g.at("checkpoint").get<std::string>();
    const std::uint64_t seed = config.at("seed").get<std::uint64_t>();

    auto groups = build_analysis_groups(corpus, checkpoint, detection.rock_set,
                                        g.at("freq_percentile").get<double>(),
                                        g.at("kl_percentile").get<double>(),
                                        g.at("random_controls").get<std::size_t>(), seed);
    std::vector<std::uint32_t> warnings;
    auto summaries = summarize_gradients(corpus, checkpoint, groups, &warnings);
    write_gradient_csv(summaries, dir + "/gradients.csv");
    auto persistence = persistence_analysis(corpus, detection.config.pre_checkpoint,
                                            detection.config.post_checkpoint, groups);
    write_persistence_csv(persistence, dir + "/persistence.csv");

    json doc{{"checkpoint", checkpoint}, {"skipped_tokens", warnings}};
    try {
        GroupComparison cmp = compare_groups(summaries, TokenGroup::rock, TokenGroup::rare_high_kl);
        doc["rock_median_norm"] = cmp.median_norm_a;
        doc["rare_high_kl_median_norm"] = cmp.median_norm_b;
        doc["mann_whitney_u"] = cmp.mann_whitney_norms.statistic;
        doc["mann_whitney_p"] = cmp.mann_whitney_norms.p_value;
        if (cmp.median_cos_a) doc["rock_median_cos"] = *cmp.median_cos_a;
        if (cmp.median_cos_b) doc["rare_high_kl_median_cos"] = *cmp.median_cos_b;
    } catch (const StatError& e) {
        doc["group_comparison_note"] = e.what();
    }
    json gp = json::array();
    for (const auto& grp : persistence.groups) gp.push_back(group_persistence_to_json(grp));
    doc["persistence_groups"] = gp;
    std::ofstream out(dir + "/gradgeom.json", std::ios::binary);
    out << doc.dump(2) << '\n';
    manifest.output(dir + "/gradients.csv");
    manifest.output(dir + "/persistence.csv");
    manifest.output(dir + "/gradgeom.json");
}

void stage_knockout(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    manifest.input(dir + "/detection.json");
    DetectionReport detection = load_detection_report(dir + "/detection.json");
    const json& k = config.at("knockout");
    const std::uint64_t seed = config.at("seed").get<std::uint64_t>();

    // Reproduce the post-training student deterministically from the config.
    SimConfig cfg = sim_config_from_json(config);
    SimWorld world = build_world(cfg);
    train(world, std::nullopt, nullptr, cfg.steps, cfg.seed);
    SimEnvironment env(world, k.at("prompts").get<std::size_t>(),
                       k.at("rollouts_per_prompt").get<std::size_t>());

    // Screening pool: context-aware ranking first, stage-1 burden for the rest.
    std::vector<const TokenAggregate*> ranked;
    for (const auto& a : detection.aggregates) ranked.push_back(&a);
    std::sort(ranked.begin(), ranked.end(), [](const TokenAggregate* a, const TokenAggregate* b) {
        if (a->rock_score_ctx != b->rock_score_ctx) return a->rock_score_ctx > b->rock_score_ctx;
        if (a->rock_score != b->rock_score) return a->rock_score > b->rock_score;
        return a->token_id < b->token_id;
    });
    const std::size_t n_candidates = std::min(ranked.size(), k.at("candidates").get<std::size_t>());

    MeasureOptions opts;
    opts.bootstrap_resamples = k.at("resamples").get<std::size_t>();
    opts.alpha = k.at("alpha").get<double>();
    opts.epsilon = k.at("epsilon").get<double>();

    std::vector<KnockoutRecord> records;
    for (std::size_t i = 0; i < n_candidates; ++i) {
        const std::uint32_t candidate = ranked[i]->token_id;
        auto window = window_companion_set(detection, candidate, detection.config.gamma);
        opts.seed = SplitMix64::derive(seed, 0xC0DEULL + candidate);
        records.push_back(measure_delta(env, candidate, window, opts));
    }

    CensusReport rep = census(records, detection.rock_set, opts.alpha, 0.20);
    Corpus corpus = load_corpus(trace_path(dir), vocab_path(dir));
    manifest.input(trace_path(dir));
    manifest.input(vocab_path(dir));
    try {
        const auto entropies = entropy_table(corpus, detection.config.pre_checkpoint,
                                             detection.config.post_checkpoint);
        rep.correlations = predictor_table(records, detection.aggregates, entropies);

        // per-candidate predictor scatter data
        std::unordered_map<std::uint32_t, const TokenAggregate*> agg_by_id;
        for (const auto& a : detection.aggregates) agg_by_id[a.token_id] = &a;
        std::ofstream scatter(dir + "/predictors.csv", std::ios::binary);
        scatter << "token_id,delta_token,frequency,rock_count,rock_rate,pre_kl,post_kl,"
                   "kl_improvement,teacher_entropy,student_entropy_pre,student_entropy_post\n";
        for (const auto& r : records) {
            const TokenAggregate* a = agg_by_id.at(r.token_id);
            const TokenEntropies& e = entropies.at(r.token_id);
            scatter << r.token_id << ',' << format_double(r.delta_token) << ',' << a->freq << ','
                    << a->rock_occurrences << ',' << format_double(a->ccr) << ','
                    << format_double(a->mean_loss_pre) << ',' << format_double(a->mean_loss_post) << ','
                    << format_double(a->mean_loss_pre - a->mean_loss_post) << ','
                    << format_double(e.teacher_entropy) << ',' << format_double(e.student_entropy_pre)
                    << ',' << format_double(e.student_entropy_post) << '\n';
        }
        manifest.output(dir + "/predictors.csv");
    } catch (const std::exception& e) {
        PredictorCorrelation pc;
        pc.predictor = "all";
        pc.note = e.what();
        rep.correlations.push_back(pc);
    }
    write_census_json(rep, records, dir + "/census.json");
    write_knockout_csv(records, dir + "/knockout.csv");
    manifest.output(dir + "/census.json");
    manifest.output(dir + "/knockout.csv");
}

void stage_mask(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    manifest.input(trace_path(dir));
    manifest.input(vocab_path(dir));
    manifest.input(dir + "/detection.json");
    Corpus corpus = load_corpus(trace_path(dir), vocab_path(dir));
    DetectionReport detection = load_detection_report(dir + "/detection.json");
    const json& r = config.at("reweight");
    const double lambda = r.at("lambda").get<double>();
    const std::size_t radius = r.at("radius").get<std::size_t>();
    const std::string regime = r.at("regime").get<std::string>();
    const std::uint64_t seed = config.at("seed").get<std::uint64_t>();

    WindowSet rock_ws = rock_windows(corpus, detection, radius);
    std::vector<WeightMask> masks;
    if (regime == "baseline") {
        masks = build_mask(corpus, {}, WindowSet{}, 1.0);
        for (auto& m : masks) m.regime = Regime::baseline;
    } else if (regime == "rock_freeze") {
        masks = build_mask(corpus, detection.rock_set, rock_ws, lambda);
        for (auto& m : masks) m.regime = Regime::rock_freeze;
    } else if (regime == "freq_matched_random") {
        WindowSet control = freq_matched_random_windows(corpus, rock_ws, detection.rock_set, seed);
        masks = build_mask(corpus, {}, control, lambda);
        for (auto& m : masks) m.regime = Regime::freq_matched_random;
    } else {
        throw ConfigError("unknown regime: " + regime);
    }
    const std::string mask_file = dir + "/masks_" + regime + ".jsonl";
    write_masks(masks, mask_file);

    const std::string checkpoint = detection.config.post_checkpoint;
    WeightedLoss wl = weighted_loss(corpus, masks, checkpoint);
    double masked_positions = 0.0;
    for (const auto& m : masks) masked_positions += m.masked_fraction * static_cast<double>(m.weights.size());
    json doc{{"regime", regime},
             {"lambda", lambda},
             {"radius", radius},
             {"checkpoint", checkpoint},
             {"weighted_total", wl.total},
             {"active_term_count", wl.active_term_count},
             {"total_positions", corpus.total_positions()},
             {"masked_positions", static_cast<std::size_t>(masked_positions + 0.5)}};
    std::ofstream out(dir + "/mask_summary_" + regime + ".json", std::ios::binary);
    out << doc.dump(2) << '\n';
    manifest.output(mask_file);
    manifest.output(dir + "/mask_summary_" + regime + ".json");
}

void stage_train(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    const json& r = config.at("reweight");
    const std::string regime = r.at("regime").get<std::string>();
    const double lambda = r.at("lambda").get<double>();
    const std::size_t radius = r.at("radius").get<std::size_t>();
    SimConfig cfg = sim_config_from_json(config);
    SimWorld world = build_world(cfg);

    MaskSource mask;
    const MaskSource* mask_ptr = nullptr;
    if (regime != "baseline") {
        manifest.input(dir + "/detection.json");
        DetectionReport detection = load_detection_report(dir + "/detection.json");
        if (regime == "rock_freeze") {
            mask = make_freeze_mask(detection.rock_set, radius, lambda);
        } else if (regime == "freq_matched_random") {
            auto controls = freq_matched_controls(detection, {}, cfg.seed);
            mask = make_freeze_mask(controls, radius, lambda);
        } else {
            throw ConfigError("unknown regime: " + regime);
        }
        mask_ptr = &mask;
    }
    TrainResult result = train(world, std::nullopt, mask_ptr, cfg.steps,
                               SplitMix64::derive(cfg.seed, 0x7EA1ULL));
    const std::string trace_file = dir + "/trace_" + regime + ".jsonl";
    write_corpus(result.probe, trace_file);
    write_training_log(result.log, dir + "/training_log_" + regime + ".csv");
    json doc{{"regime", regime},
             {"lambda", lambda},
             {"probe_pre_mean_kl", result.probe_pre_mean_kl},
             {"probe_post_mean_kl", result.probe_post_mean_kl},
             {"total_active_terms", result.total_active_terms},
             {"total_positions", result.total_positions}};
    std::ofstream out(dir + "/train_summary_" + regime + ".json", std::ios::binary);
    out << doc.dump(2) << '\n';
    manifest.output(trace_file);
    manifest.output(dir + "/training_log_" + regime + ".csv");
    manifest.output(dir + "/train_summary_" + regime + ".json");
}

json read_json_if_exists(const std::string& path) {
    std::ifstream in(path);
    if (!in) return json();
    try {
        return json::parse(in);
    } catch (const json::exception&) {
        return json();
    }
}

void stage_report(const json& config, const std::string& dir, ManifestBuilder& manifest) {
    (void)config;
    std::ostringstream md;
    md << "# rockscope run report\n";

    const json detection = read_json_if_exists(dir + "/detection.json");
    const json cutoff = read_json_if_exists(dir + "/cutoff.json");
    const json gradgeom = read_json_if_exists(dir + "/gradgeom.json");
    const json censusj = read_json_if_exists(dir + "/census.json");
    const json simulate = read_json_if_exists(dir + "/simulate_summary.json");
    if (!detection.is_object() && !cutoff.is_object() && !gradgeom.is_object() &&
        !censusj.is_object() && !simulate.is_object())
        throw IoError("no stage outputs in " + dir +
                      "; run simulate/detect/sweep/gradgeom/knockout first");
    json vocab;
    {
        std::ifstream in(vocab_path(dir));
        if (in) {
            try {
                vocab = json::parse(in);
            } catch (const json::exception&) {
            }
        }
    }
    auto surface = [&](std::uint32_t id) -> std::string {
        if (vocab.is_object() && vocab.contains("tokens")) {
            const std::string key = std::to_string(id);
            if (vocab.at("tokens").contains(key)) return vocab.at("tokens").at(key).get<std::string>();
        }
        return "?";
    };

    md << "\n## corpus\n";
    if (simulate.is_object()) {
        md << "trajectories: " << simulate.at("trajectories") << "\n";
        md << "probe mean KL pre -> post: " << format_double(simulate.at("probe_pre_mean_kl").get<double>())
           << " -> " << format_double(simulate.at("probe_post_mean_kl").get<double>()) << "\n";
    } else {
        md << "absent\n";
    }

    md << "\n## detection\n";
    if (detection.is_object()) {
        md << "median rock density: " << format_double(detection.at("median_density").get<double>())
           << "\n";
        md << "rock set:";
        for (const auto& v : detection.at("rock_set"))
            md << ' ' << v.get<std::uint32_t>() << "('" << surface(v.get<std::uint32_t>()) << "')";
        md << "\n";
    } else {
        md << "absent\n";
    }

    md << "\n## categories\n";
    if (detection.is_object()) {
        std::map<std::string, std::size_t> counts;
        for (const auto& row : detection.at("aggregates")) {
            bool in_rock = false;
            for (const auto& v : detection.at("rock_set"))
                if (v == row.at("token_id")) in_rock = true;
            if (in_rock) counts[row.at("category").get<std::string>()] += 1;
        }
        for (const auto& [cat, n] : counts) md << cat << ": " << n << "\n";
        if (counts.empty()) md << "rock set empty\n";
    } else {
        md << "absent\n";
    }

    md << "\n## cutoff\n";
    if (cutoff.is_object()) {
        md << "chosen K: " << cutoff.at("chosen_k") << " (mean Jaccard "
           << format_double(cutoff.at("mean_jaccard").get<double>()) << ", coverage "
           << format_double(cutoff.at("coverage").get<double>())
           << (cutoff.at("fallback").get<bool>() ? ", fallback" : "") << ")\n";
    } else {
        md << "absent\n";
    }

    md << "\n## gradients\n";
    if (gradgeom.is_object() && gradgeom.contains("rock_median_norm")) {
        md << "median |g|: rock " << format_double(gradgeom.at("rock_median_norm").get<double>())
           << " vs rare-high-KL " << format_double(gradgeom.at("rare_high_kl_median_norm").get<double>())
           << " (Mann-Whitney p " << format_double(gradgeom.at("mann_whitney_p").get<double>()) << ")\n";
    } else {
        md << "absent\n";
    }

    md << "\n## persistence\n";
    if (gradgeom.is_object() && gradgeom.contains("persistence_groups")) {
        for (const auto& g : gradgeom.at("persistence_groups")) {
            md << g.at("group").get<std::string>() << ": median relative KL reduction "
               << format_double(g.at("median_relative_reduction").get<double>()) << " over "
               << g.at("n_tokens") << " tokens (" << g.at("status").get<std::string>() << ")\n";
        }
    } else {
        md << "absent\n";
    }

    md << "\n## knockout\n";
    if (censusj.is_object()) {
        md << "candidates: " << censusj.at("n_candidates") << ", strong pillars: "
           << censusj.at("strong_pillars") << ", neutral: " << censusj.at("neutral")
           << ", strong stumbling: " << censusj.at("strong_stumbling") << "\n";
        md << "baseline accuracy: " << format_double(censusj.at("baseline_accuracy").get<double>())
           << "\n";
        md << "rejection signs: " << censusj.at("rejecting_negative") << " negative / "
           << censusj.at("rejecting_positive") << " positive, sign test p "
           << format_double(censusj.at("sign_test_p").get<double>()) << "\n";
        md << "bonferroni rejections: " << censusj.at("bonferroni_rejections") << ", BH rejections: "
           << censusj.at("bh_rejections") << "\n";
    } else {
        md << "absent\n";
    }

    md << "\n## reweight\n";
    bool any_reweight = false;
    for (const char* regime : {"baseline", "rock_freeze", "freq_matched_random"}) {
        const json summary = read_json_if_exists(dir + "/train_summary_" + std::string(regime) + ".json");
        const json mask_summary =
            read_json_if_exists(dir + "/mask_summary_" + std::string(regime) + ".json");
        if (summary.is_object()) {
            any_reweight = true;
            md << regime << ": probe mean KL " << format_double(summary.at("probe_pre_mean_kl").get<double>())
               << " -> " << format_double(summary.at("probe_post_mean_kl").get<double>())
               << ", active terms " << summary.at("total_active_terms") << "/"
               << summary.at("total_positions") << "\n";
        } else if (mask_summary.is_object()) {
            any_reweight = true;
            md << regime << ": masked positions " << mask_summary.at("masked_positions") << "/"
               << mask_summary.at("total_positions") << ", weighted total "
               << format_double(mask_summary.at("weighted_total").get<double>()) << "\n";
        }
    }
    if (!any_reweight) md << "absent\n";

    std::ofstream out(dir + "/report.md", std::ios::binary);
    if (!out) throw IoError("cannot write report: " + dir + "/report.md");
    out << md.str();

    // Figure-equivalent CSV: per-trajectory rock density.
    if (detection.is_object()) {
        std::ofstream density(dir + "/density.csv", std::ios::binary);
        density << "trajectory_index,rock_density\n";
        std::size_t i = 0;
        for (const auto& v : detection.at("densities"))
            density << i++ << ',' << format_double(v.get<double>()) << '\n';
        manifest.output(dir + "/density.csv");
    }
    manifest.output(dir + "/report.md");
}

std::string default_out_dir(const json& config) {
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    return "runs/" + std::to_string(ms) + "-" + std::to_string(config.at("seed").get<std::uint64_t>());
}

}  // namespace

std::string default_config_text() { return default_config_json().dump(2) + "\n"; }

std::string resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    json config = default_config_json();
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw IoError("cannot open config file: " + config_path);
        json file_config;
        try {
            file_config = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config parse failed: ") + e.what());
        }
        config.merge_patch(file_config);
    }
    for (const auto& o : overrides) apply_override(config, o);
    return config.dump(2) + "\n";
}

int run_stage(const CliOptions& options) {
    g_quiet = options.quiet;
    try {
        const json config = json::parse(resolve_config(options.config_path, options.overrides));
        const std::string dir = options.out_dir.empty() ? default_out_dir(config) : options.out_dir;
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create run directory: " + dir);

        ManifestBuilder manifest;
        if (options.command == "simulate")
            stage_simulate(config, dir, manifest);
        else if (options.command == "detect")
            stage_detect(config, dir, manifest);
        else if (options.command == "sweep")
            stage_sweep(config, dir, manifest);
        else if (options.command == "gradgeom")
            stage_gradgeom(config, dir, manifest);
        else if (options.command == "knockout")
            stage_knockout(config, dir, manifest);
        else if (options.command == "mask")
            stage_mask(config, dir, manifest);
        else if (options.command == "train")
            stage_train(config, dir, manifest);
        else if (options.command == "report")
            stage_report(config, dir, manifest);
        else {
            std::cerr << "unknown command: " << options.command << "\n";
            return kExitUsage;
        }
        manifest.write(options.command, config, dir);
        if (!options.quiet) std::cout << dir << "\n";
        return kExitOk;
    } catch (const IoError& e) {
        std::cerr << e.what() << "\n";
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitValidation;
    }
}

}  // namespace rockscope
