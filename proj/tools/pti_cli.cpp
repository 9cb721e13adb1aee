// pti: desk-scale decoder runtime with one-time KV-cache steering.
//
// Subcommands cover the full pipeline: init-model (seeded weights),
// make-synth (synthetic grounding dataset), extract (steering directions
// from contrastive inputs), generate (prefill -> optional intervention ->
// decode), analyze (attention dynamics from trace CSVs), eval (CHAIR / POPE
// metrics), bench (latency and throughput) and grid (lambda search).

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pti/analytics.hpp"
#include "pti/decoder.hpp"
#include "pti/directions.hpp"
#include "pti/errors.hpp"
#include "pti/eval.hpp"
#include "pti/generate.hpp"
#include "pti/intervention.hpp"
#include "pti/model.hpp"
#include "pti/sequence.hpp"
#include "pti/trace.hpp"

namespace {

constexpr const char* kToolVersion = "0.1.0";

using nlohmann::json;
namespace fs = std::filesystem;

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

LogLevel log_level() {
    const char* env = std::getenv("PTI_LOG");
    if (!env) return LogLevel::info;
    const std::string v = env;
    if (v == "quiet") return LogLevel::quiet;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::info;
}

void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::info) std::cerr << "pti: " << msg << "\n";
}

void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::debug) std::cerr << "pti[debug]: " << msg << "\n";
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// outputs are never overwritten without --force
void ensure_writable(const std::string& path, bool force) {
    if (!force && fs::exists(path)) {
        throw pti::overwrite_error("refusing to overwrite " + path + " (use --force)");
    }
}

void require_input(const std::string& path) {
    if (!fs::exists(path)) throw pti::io_error("input file not found: " + path);
}

struct ManifestWriter {
    std::string command;
    std::string started = utc_timestamp();
    json extra = json::object();
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;

    void write(const std::string& primary_output) {
        json j;
        j["command"] = command;
        j["tool_version"] = kToolVersion;
        j["started_at"] = started;
        j["finished_at"] = utc_timestamp();
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        for (auto& [k, v] : extra.items()) j[k] = v;
        std::ofstream out(primary_output + ".run.json", std::ios::trunc);
        if (!out) throw pti::io_error("cannot write run manifest for " + primary_output);
        out << j.dump(2) << "\n";
    }
};

std::vector<size_t> parse_index_list(const std::string& csv) {
    std::vector<size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoul(item));
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

pti::ModalitySegmentedSequence load_input_sequence(const std::string& path, int sample_index) {
    require_input(path);
    std::ifstream probe(path);
    json j;
    try {
        probe >> j;
    } catch (const json::exception& e) {
        throw pti::io_error("bad JSON in " + path + ": " + e.what());
    }
    if (j.contains("samples")) {
        pti::SynthDataset data = pti::load_synth_dataset_json(path);
        if (sample_index < 0 || size_t(sample_index) >= data.samples.size()) {
            throw std::invalid_argument("--sample index out of range for dataset " + path);
        }
        return data.samples[size_t(sample_index)].sequence;
    }
    return pti::load_sequence_json(path);
}

// ---------------------------------------------------------------- init-model

struct InitModelArgs {
    uint64_t seed = 0;
    size_t layers = 2, heads = 2, head_dim = 8;
    size_t vocab = 64, max_seq_len = 256;
    std::string output;
    bool force = false;
};

void run_init_model(const InitModelArgs& args) {
    ensure_writable(args.output, args.force);
    pti::ModelConfig cfg;
    cfg.num_layers = args.layers;
    cfg.num_heads = args.heads;
    cfg.head_dim = args.head_dim;
    cfg.hidden_dim = args.heads * args.head_dim;
    cfg.vocab_size = args.vocab;
    cfg.max_seq_len = args.max_seq_len;
    cfg.rng_seed = args.seed;

    pti::Weights weights = pti::init_weights(cfg);
    pti::save_weights(weights, args.output);
    log_info("wrote " + args.output + " (fingerprint " + pti::weights_fingerprint(weights) + ")");

    ManifestWriter manifest;
    manifest.command = "init-model";
    manifest.extra["seed"] = args.seed;
    manifest.extra["model_fingerprint"] = pti::weights_fingerprint(weights);
    manifest.outputs = {args.output, args.output + ".manifest.txt"};
    manifest.write(args.output);
}

// ----------------------------------------------------------------- make-synth

struct MakeSynthArgs {
    std::string model;
    pti::SynthTaskConfig cfg;
    std::string output;
    bool force = false;
};

void run_make_synth(const MakeSynthArgs& args) {
    require_input(args.model);
    ensure_writable(args.output, args.force);
    pti::Weights weights = pti::load_weights(args.model);
    pti::SynthDataset data = pti::synth_grounding_dataset(weights, args.cfg);
    pti::save_synth_dataset_json(data, args.output);
    log_info("wrote " + std::to_string(data.samples.size()) + " samples to " + args.output);

    ManifestWriter manifest;
    manifest.command = "make-synth";
    manifest.extra["seed"] = args.cfg.rng_seed;
    manifest.inputs = {args.model};
    manifest.outputs = {args.output};
    manifest.write(args.output);
}

// -------------------------------------------------------------------- extract

struct ExtractArgs {
    std::string model;
    std::string synth;   // dataset to derive contrast pairs from
    std::string pairs;   // or explicit pairs JSON
    int pca_rank = -1;   // <0: no PCA
    int sample_limit = -1;
    std::string output;
    bool force = false;
};

pti::Matrix rows_subset(const pti::Matrix& m, const std::vector<size_t>& rows) {
    pti::Matrix out(rows.size(), m.cols);
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t c = 0; c < m.cols; ++c) out.at(r, c) = m.at(rows[r], c);
    }
    return out;
}

pti::Matrix json_matrix(const json& rows) {
    pti::Matrix out(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t c = 0; c < out.cols; ++c) out.at(r, c) = rows[r][c].get<double>();
    }
    return out;
}

void run_extract(const ExtractArgs& args) {
    require_input(args.model);
    ensure_writable(args.output, args.force);
    pti::Weights weights = pti::load_weights(args.model);

    std::vector<pti::ContrastiveVisualPair> visual_pairs;
    std::vector<pti::ContrastiveTextualPair> textual_pairs;

    if (!args.synth.empty()) {
        require_input(args.synth);
        pti::SynthDataset data = pti::load_synth_dataset_json(args.synth);
        if (data.model_fingerprint != pti::weights_fingerprint(weights)) {
            throw pti::fingerprint_error("dataset " + args.synth +
                                         " was built for a different model");
        }
        size_t count = data.samples.size();
        if (args.sample_limit > 0) count = std::min(count, size_t(args.sample_limit));
        for (size_t i = 0; i < count; ++i) {
            const pti::SynthSample& s = data.samples[i];
            pti::Matrix image = rows_subset(s.sequence.embeddings, s.sequence.visual_indices);
            pti::Matrix prompt = rows_subset(s.sequence.embeddings, s.sequence.textual_indices);
            visual_pairs.push_back(pti::build_visual_contrast(image, s.object_mask, prompt));
            textual_pairs.push_back(pti::build_textual_contrast(prompt, s.anchor_indices, image));
        }
        log_debug("built " + std::to_string(visual_pairs.size()) + " contrast pairs from synth data");
    } else if (!args.pairs.empty()) {
        require_input(args.pairs);
        std::ifstream in(args.pairs);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw pti::io_error("bad pairs JSON in " + args.pairs + ": " + e.what());
        }
        for (const auto& p : j.value("visual", json::array())) {
            pti::ObjectMask mask{p.at("mask").get<std::vector<uint8_t>>()};
            visual_pairs.push_back(pti::build_visual_contrast(
                json_matrix(p.at("image_tokens")), mask, json_matrix(p.at("prompt_tokens"))));
        }
        for (const auto& p : j.value("textual", json::array())) {
            textual_pairs.push_back(pti::build_textual_contrast(
                json_matrix(p.at("prompt_tokens")), p.at("anchor_indices").get<std::vector<size_t>>(),
                json_matrix(p.at("image_tokens"))));
        }
    } else {
        throw std::invalid_argument("extract requires --synth or --pairs");
    }

    size_t degenerate = 0;
    for (const auto& p : visual_pairs) degenerate += p.degenerate;
    for (const auto& p : textual_pairs) degenerate += p.degenerate;
    if (degenerate > 0) {
        log_info("warning: " + std::to_string(degenerate) +
                 " degenerate contrast pair(s) (empty object or context side)");
    }

    std::optional<size_t> rank;
    if (args.pca_rank >= 1) rank = size_t(args.pca_rank);
    pti::SteeringDirections dirs =
        pti::assemble_directions(weights, visual_pairs, textual_pairs, rank);
    pti::save_directions_json(dirs, args.output);
    log_info("extracted directions from " + std::to_string(visual_pairs.size()) +
             " visual and " + std::to_string(textual_pairs.size()) + " textual pairs");

    ManifestWriter manifest;
    manifest.command = "extract";
    manifest.inputs = {args.model, args.synth.empty() ? args.pairs : args.synth};
    manifest.outputs = {args.output};
    manifest.extra["sample_count"] = visual_pairs.size();
    manifest.extra["pca_rank"] = args.pca_rank >= 1 ? json(args.pca_rank) : json(nullptr);
    manifest.write(args.output);
}

// ------------------------------------------------------------------- generate

struct GenerateArgs {
    std::string model;
    std::string input;
    int sample_index = -1;
    std::string directions;
    std::string config;
    bool no_intervention = false;
    std::string strategy = "greedy";
    size_t beam_width = 5;
    double top_p = 1.0;
    double temperature = 1.0;
    uint64_t seed = 0;
    size_t max_new = 16;
    std::string trace_path;
    std::string output;
    bool force = false;
};

void run_generate(const GenerateArgs& args) {
    require_input(args.model);
    ensure_writable(args.output, args.force);
    if (!args.trace_path.empty()) ensure_writable(args.trace_path, args.force);

    pti::Weights weights = pti::load_weights(args.model);
    pti::ModalitySegmentedSequence seq = load_input_sequence(args.input, args.sample_index);

    pti::DecodeStrategy strategy;
    if (args.strategy == "greedy") {
        strategy = pti::GreedyStrategy{};
    } else if (args.strategy == "beam") {
        strategy = pti::BeamStrategy{args.beam_width};
    } else if (args.strategy == "nucleus") {
        strategy = pti::NucleusStrategy{args.top_p, args.temperature, args.seed};
    } else {
        throw std::invalid_argument("unknown strategy: " + args.strategy);
    }

    pti::PrefillResult pre = pti::prefill(weights, seq);
    if (!args.no_intervention) {
        if (args.directions.empty() || args.config.empty()) {
            throw std::invalid_argument(
                "generate requires --directions and --config, or --no-intervention");
        }
        require_input(args.directions);
        require_input(args.config);
        pti::SteeringDirections dirs = pti::load_directions_json(args.directions);
        pti::InterventionConfig cfg = pti::load_intervention_config_json(args.config);
        pti::apply_pti(pre.cache, dirs, cfg, seq);
        log_debug("intervention applied");
    }

    // decoding starts by re-feeding the final prompt embedding so the first
    // sampled token already attends over the (possibly intervened) cache
    pti::GenerateResult result =
        pti::generate(weights, pre.cache, strategy, seq.embeddings.row(seq.length() - 1),
                      args.max_new, !args.trace_path.empty());

    json j;
    j["tokens"] = result.token_ids;
    j["truncated"] = result.truncated;
    j["strategy"] = args.strategy;
    std::ofstream out(args.output, std::ios::trunc);
    if (!out) throw pti::io_error("cannot open output file: " + args.output);
    out << j.dump(2) << "\n";
    out.close();

    if (!args.trace_path.empty()) pti::save_trace_csv(result.trace, args.trace_path);
    log_info("generated " + std::to_string(result.token_ids.size()) + " tokens");

    ManifestWriter manifest;
    manifest.command = "generate";
    manifest.extra["seed"] = args.seed;
    manifest.extra["strategy"] = args.strategy;
    if (!args.config.empty()) manifest.extra["config_path"] = args.config;
    manifest.inputs = {args.model, args.input};
    manifest.outputs = {args.output};
    if (!args.trace_path.empty()) manifest.outputs.push_back(args.trace_path);
    manifest.write(args.output);
}

// -------------------------------------------------------------------- analyze

struct AnalyzeArgs {
    std::string before_path;
    std::string after_path;
    size_t stages = 4;
    std::string input;  // sequence/dataset supplying I_img
    int sample_index = -1;
    std::string visual_indices_csv;
    std::string object_mask_csv;
    int step = -1;  // heatmap step; default last common step
    std::string outdir;
    bool force = false;
};

void run_analyze(const AnalyzeArgs& args) {
    require_input(args.before_path);
    require_input(args.after_path);
    fs::create_directories(args.outdir);

    pti::AttentionTrace before = pti::load_trace_csv(args.before_path);
    pti::AttentionTrace after = pti::load_trace_csv(args.after_path);

    std::vector<size_t> visual;
    if (!args.visual_indices_csv.empty()) {
        visual = parse_index_list(args.visual_indices_csv);
    } else if (!args.input.empty()) {
        visual = load_input_sequence(args.input, args.sample_index).visual_indices;
    } else {
        throw std::invalid_argument("analyze requires --visual-indices or --input");
    }

    pti::AnalyticsConfig cfg;
    cfg.num_stages = args.stages;

    auto p_before = pti::visual_attention_series(before, visual, cfg);
    auto p_after = pti::visual_attention_series(after, visual, cfg);
    pti::StageSeries staged_before = pti::staged_series(p_before, args.stages, "p_img_before");
    pti::StageSeries staged_after = pti::staged_series(p_after, args.stages, "p_img_after");
    pti::StageSeries delta = pti::relative_change_rate(staged_before, staged_after, cfg);

    const std::string before_csv = (fs::path(args.outdir) / "p_img_before.csv").string();
    const std::string after_csv = (fs::path(args.outdir) / "p_img_after.csv").string();
    const std::string delta_csv = (fs::path(args.outdir) / "delta_r.csv").string();
    for (const std::string& p : {before_csv, after_csv, delta_csv}) ensure_writable(p, args.force);
    pti::save_stage_series_csv(staged_before, before_csv);
    pti::save_stage_series_csv(staged_after, after_csv);
    pti::save_stage_series_csv(delta, delta_csv);

    ManifestWriter manifest;
    manifest.command = "analyze";
    manifest.inputs = {args.before_path, args.after_path};
    manifest.outputs = {before_csv, after_csv, delta_csv};

    if (!args.object_mask_csv.empty()) {
        pti::ObjectMask mask;
        for (size_t v : parse_index_list(args.object_mask_csv)) {
            mask.values.push_back(uint8_t(v));
        }
        mask.validate();
        size_t step = args.step >= 0
                          ? size_t(args.step)
                          : std::min(before.step_count(), after.step_count()) - 1;
        pti::Matrix s_before = pti::object_score_matrix(before, step, visual, mask);
        pti::Matrix s_after = pti::object_score_matrix(after, step, visual, mask);
        const std::string shift_csv = (fs::path(args.outdir) / "s_obj_shift.csv").string();
        ensure_writable(shift_csv, args.force);
        pti::save_heatmap_csv(pti::object_attention_shift(s_before, s_after), shift_csv);
        manifest.outputs.push_back(shift_csv);
    }

    log_info("analysis written to " + args.outdir);
    manifest.write((fs::path(args.outdir) / "analyze").string());
}

// ----------------------------------------------------------------------- eval

struct EvalArgs {
    std::string chair_path;
    std::string pope_path;
    std::string output;
    bool force = false;
};

void run_eval(const EvalArgs& args) {
    if (args.chair_path.empty() && args.pope_path.empty()) {
        throw std::invalid_argument("eval requires --chair and/or --pope records");
    }
    ensure_writable(args.output, args.force);
    const std::string csv_path = args.output + ".csv";
    ensure_writable(csv_path, args.force);

    json summary;
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw pti::io_error("cannot open metrics CSV: " + csv_path);
    csv << "metric,value\n";

    if (!args.chair_path.empty()) {
        require_input(args.chair_path);
        auto records = pti::load_caption_records_jsonl(args.chair_path);
        pti::ChairScores scores = pti::chair_scores(records);
        summary["chair"] = {{"records", records.size()},
                            {"chair_s", scores.chair_s},
                            {"chair_i", scores.chair_i}};
        csv << "chair_s," << scores.chair_s << "\n";
        csv << "chair_i," << scores.chair_i << "\n";
        log_info("CHAIR over " + std::to_string(records.size()) + " records: chair_s=" +
                 std::to_string(scores.chair_s) + " chair_i=" + std::to_string(scores.chair_i));
    }
    if (!args.pope_path.empty()) {
        require_input(args.pope_path);
        auto records = pti::load_binary_qa_records_jsonl(args.pope_path);
        pti::PopeScores scores = pti::pope_scores(records);
        summary["pope"] = {{"records", records.size()},
                           {"accuracy", scores.accuracy},
                           {"f1", scores.f1}};
        csv << "pope_accuracy," << scores.accuracy << "\n";
        csv << "pope_f1," << scores.f1 << "\n";
        log_info("POPE over " + std::to_string(records.size()) + " records: acc=" +
                 std::to_string(scores.accuracy) + " f1=" + std::to_string(scores.f1));
    }

    std::ofstream out(args.output, std::ios::trunc);
    if (!out) throw pti::io_error("cannot open summary file: " + args.output);
    out << summary.dump(2) << "\n";

    ManifestWriter manifest;
    manifest.command = "eval";
    if (!args.chair_path.empty()) manifest.inputs.push_back(args.chair_path);
    if (!args.pope_path.empty()) manifest.inputs.push_back(args.pope_path);
    manifest.outputs = {args.output, csv_path};
    manifest.write(args.output);
}

// ---------------------------------------------------------------------- bench

struct BenchArgs {
    std::string model;
    std::string input;
    int sample_index = -1;
    std::string directions;
    std::string config;
    size_t n_tokens = 256;
    size_t warmup = 2;
    size_t timed = 5;
    std::string output;
    bool force = false;
};

void run_bench(const BenchArgs& args) {
    require_input(args.model);
    ensure_writable(args.output, args.force);
    pti::Weights weights = pti::load_weights(args.model);
    pti::ModalitySegmentedSequence seq = load_input_sequence(args.input, args.sample_index);

    if (args.directions.empty() != args.config.empty()) {
        throw std::invalid_argument("bench needs both --directions and --config, or neither");
    }
    std::optional<pti::SteeringDirections> dirs;
    std::optional<pti::InterventionConfig> cfg;
    if (!args.directions.empty()) {
        require_input(args.directions);
        require_input(args.config);
        dirs = pti::load_directions_json(args.directions);
        cfg = pti::load_intervention_config_json(args.config);
    }

    pti::LatencyReport report =
        pti::measure_throughput(weights, seq, cfg ? &*cfg : nullptr, dirs ? &*dirs : nullptr,
                                args.n_tokens, args.warmup, args.timed);
    pti::save_latency_report_json(report, args.output);
    log_info("decode " + std::to_string(report.ms_per_token) + " ms/token (" +
             std::to_string(report.tokens_per_second) + " tok/s), factor x" +
             std::to_string(report.factor_vs_baseline));

    ManifestWriter manifest;
    manifest.command = "bench";
    manifest.inputs = {args.model, args.input};
    if (!args.config.empty()) manifest.extra["config_path"] = args.config;
    manifest.outputs = {args.output};
    manifest.write(args.output);
}

// ----------------------------------------------------------------------- grid

struct GridArgs {
    std::string model;
    std::string synth;
    std::string directions;
    std::string config;      // optional: modes and grid values from a config file
    std::string lambda_csv;  // empty: config grid or 0,0.1,...,1.0
    size_t holdout = 0;      // 0: every sample
    size_t steps = 8;
    std::string textual_mode;
    std::string normalization;
    std::string output;
    bool force = false;
};

void run_grid(const GridArgs& args) {
    require_input(args.model);
    require_input(args.synth);
    require_input(args.directions);
    ensure_writable(args.output, args.force);
    const std::string best_path = args.output + ".best.json";
    ensure_writable(best_path, args.force);

    pti::Weights weights = pti::load_weights(args.model);
    pti::SynthDataset data = pti::load_synth_dataset_json(args.synth);
    pti::SteeringDirections dirs = pti::load_directions_json(args.directions);
    if (data.model_fingerprint != pti::weights_fingerprint(weights)) {
        throw pti::fingerprint_error("dataset " + args.synth + " was built for a different model");
    }

    size_t count = data.samples.size();
    if (args.holdout > 0) count = std::min(count, args.holdout);
    if (count == 0) throw std::invalid_argument("grid: no samples to evaluate");

    // mode and grid resolution: explicit flags beat the config file, which
    // beats the defaults
    std::string textual_mode = args.textual_mode;
    std::string normalization = args.normalization;
    std::vector<double> lambdas;
    if (!args.lambda_csv.empty()) lambdas = parse_double_list(args.lambda_csv);
    if (!args.config.empty()) {
        require_input(args.config);
        pti::InterventionConfig base = pti::load_intervention_config_json(args.config);
        if (textual_mode.empty()) {
            textual_mode = base.textual_position_mode == pti::TextualPositionMode::last_token_only
                               ? "last_token_only"
                               : "all_textual";
        }
        if (normalization.empty()) {
            normalization =
                base.normalization_mode == pti::NormalizationMode::off ? "off" : "per_token_norm_preserving";
        }
        if (lambdas.empty()) {
            std::ifstream in(args.config);
            json j;
            in >> j;
            if (j.contains("grid") && j["grid"].contains("lambda_values")) {
                lambdas = j["grid"]["lambda_values"].get<std::vector<double>>();
            }
        }
    }
    if (lambdas.empty()) lambdas = pti::default_lambda_values();

    pti::TextualPositionMode tmode = textual_mode == "last_token_only"
                                         ? pti::TextualPositionMode::last_token_only
                                         : pti::TextualPositionMode::all_textual;
    pti::NormalizationMode nmode = normalization == "off"
                                       ? pti::NormalizationMode::off
                                       : pti::NormalizationMode::per_token_norm_preserving;
    std::vector<pti::InterventionConfig> grid = pti::make_tied_grid(lambdas, tmode, nmode);

    // prefill once per sample; every candidate branches on a copy
    std::vector<pti::PrefillResult> prefills;
    prefills.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        prefills.push_back(pti::prefill(weights, data.samples[i].sequence));
    }

    auto mean_s_obj = [&](const pti::InterventionConfig* cfg) {
        double total = 0.0;
        size_t scored = 0;
        for (size_t i = 0; i < count; ++i) {
            const pti::SynthSample& sample = data.samples[i];
            pti::KVCache cache = prefills[i].cache;
            if (cfg) pti::apply_pti(cache, dirs, *cfg, sample.sequence);
            pti::GenerateResult gen = pti::generate(
                weights, cache, pti::GreedyStrategy{},
                sample.sequence.embeddings.row(sample.sequence.length() - 1), args.steps, true);
            for (size_t t = 0; t < gen.trace.step_count(); ++t) {
                pti::Matrix scores = pti::object_score_matrix(
                    gen.trace, t, sample.sequence.visual_indices, sample.object_mask);
                for (double v : scores.data) {
                    total += v;
                    ++scored;
                }
            }
        }
        return total / double(scored);
    };

    const double vanilla_score = mean_s_obj(nullptr);
    log_debug("vanilla mean S_obj = " + std::to_string(vanilla_score));

    pti::GridSearchResult result = pti::grid_search_lambdas(
        grid, [&](const pti::InterventionConfig& cfg) { return mean_s_obj(&cfg); });
    for (auto& entry : result.table) {
        entry.extras = {{"mean_s_obj", entry.score},
                        {"delta_vs_vanilla", entry.score - vanilla_score}};
    }

    pti::save_grid_csv(result, args.output);
    pti::save_intervention_config_json(result.best, best_path);
    log_info("grid best: lambda_k=" + std::to_string(result.best.lambda_k_img) +
             " lambda_v=" + std::to_string(result.best.lambda_v_img) +
             " score=" + std::to_string(result.best_score) +
             " (vanilla " + std::to_string(vanilla_score) + ")");

    ManifestWriter manifest;
    manifest.command = "grid";
    manifest.inputs = {args.model, args.synth, args.directions};
    manifest.outputs = {args.output, best_path};
    manifest.extra["samples_evaluated"] = count;
    manifest.extra["decode_steps"] = args.steps;
    manifest.write(args.output);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale decoder runtime with prefill-time KV-cache steering"};
    app.require_subcommand(1);

    InitModelArgs init_args;
    auto* init = app.add_subcommand("init-model", "create a seeded random weights file");
    init->add_option("--seed", init_args.seed, "rng seed");
    init->add_option("--layers", init_args.layers, "decoder layers")->check(CLI::PositiveNumber);
    init->add_option("--heads", init_args.heads, "attention heads")->check(CLI::PositiveNumber);
    init->add_option("--head-dim", init_args.head_dim, "per-head dimension")->check(CLI::PositiveNumber);
    init->add_option("--vocab", init_args.vocab, "vocabulary size (id 0 is EOS)");
    init->add_option("--max-seq-len", init_args.max_seq_len, "positional table length");
    init->add_option("-o,--output", init_args.output, "weights file path")->required();
    init->add_flag("--force", init_args.force, "overwrite existing outputs");
    init->callback([&]() { run_init_model(init_args); });

    MakeSynthArgs synth_args;
    auto* synth = app.add_subcommand("make-synth", "emit a synthetic grounding dataset");
    synth->add_option("--model", synth_args.model, "weights file")->required();
    synth->add_option("--num-samples", synth_args.cfg.num_samples, "sample count");
    synth->add_option("--visual-tokens", synth_args.cfg.visual_token_count, "visual tokens per sample");
    synth->add_option("--object-fraction", synth_args.cfg.object_fraction, "fraction of object tokens");
    synth->add_option("--prompt-len", synth_args.cfg.prompt_length, "textual prompt rows (>= 2)");
    synth->add_option("--signal-strength", synth_args.cfg.signal_strength, "object signal scale");
    synth->add_option("--noise-scale", synth_args.cfg.noise_scale, "background noise scale");
    synth->add_option("--seed", synth_args.cfg.rng_seed, "rng seed");
    synth->add_option("-o,--output", synth_args.output, "dataset path")->required();
    synth->add_flag("--force", synth_args.force, "overwrite existing outputs");
    synth->callback([&]() { run_make_synth(synth_args); });

    ExtractArgs extract_args;
    auto* extract = app.add_subcommand("extract", "extract steering directions from contrast pairs");
    extract->add_option("--model", extract_args.model, "weights file")->required();
    extract->add_option("--synth", extract_args.synth, "synthetic dataset to build pairs from");
    extract->add_option("--pairs", extract_args.pairs, "explicit contrast pairs JSON");
    extract->add_option("--pca-rank", extract_args.pca_rank, "PCA rank (omit for plain mean)");
    extract->add_option("--samples", extract_args.sample_limit, "use only the first N samples");
    extract->add_option("-o,--output", extract_args.output, "directions file path")->required();
    extract->add_flag("--force", extract_args.force, "overwrite existing outputs");
    extract->callback([&]() { run_extract(extract_args); });

    GenerateArgs gen_args;
    auto* gen = app.add_subcommand("generate", "prefill, optionally intervene, then decode");
    gen->add_option("--model", gen_args.model, "weights file")->required();
    gen->add_option("--input", gen_args.input, "sequence JSON (or dataset with --sample)")->required();
    gen->add_option("--sample", gen_args.sample_index, "sample index when --input is a dataset");
    gen->add_option("--directions", gen_args.directions, "steering directions file");
    gen->add_option("--config", gen_args.config, "intervention config file");
    gen->add_flag("--no-intervention", gen_args.no_intervention, "decode from the raw prefill cache");
    gen->add_option("--strategy", gen_args.strategy, "greedy | beam | nucleus");
    gen->add_option("--beam-width", gen_args.beam_width, "beam width (beam strategy)");
    gen->add_option("--top-p", gen_args.top_p, "nucleus mass threshold");
    gen->add_option("--temperature", gen_args.temperature, "softmax temperature");
    gen->add_option("--seed", gen_args.seed, "sampling seed (nucleus strategy)");
    gen->add_option("--max-new", gen_args.max_new, "maximum generated tokens")->required();
    gen->add_option("--record-trace", gen_args.trace_path, "write attention trace CSV here");
    gen->add_option("-o,--output", gen_args.output, "token output path")->required();
    gen->add_flag("--force", gen_args.force, "overwrite existing outputs");
    gen->callback([&]() { run_generate(gen_args); });

    AnalyzeArgs analyze_args;
    auto* analyze = app.add_subcommand("analyze", "attention dynamics from two trace CSVs");
    analyze->add_option("--before", analyze_args.before_path, "vanilla trace CSV")->required();
    analyze->add_option("--after", analyze_args.after_path, "intervened trace CSV")->required();
    analyze->add_option("--stages", analyze_args.stages, "number of stages K");
    analyze->add_option("--input", analyze_args.input, "sequence/dataset supplying visual indices");
    analyze->add_option("--sample", analyze_args.sample_index, "sample index when --input is a dataset");
    analyze->add_option("--visual-indices", analyze_args.visual_indices_csv, "comma-separated I_img");
    analyze->add_option("--object-mask", analyze_args.object_mask_csv,
                        "comma-separated 0/1 mask over I_img (enables the shift heatmap)");
    analyze->add_option("--step", analyze_args.step, "heatmap step (default: last common step)");
    analyze->add_option("-o,--outdir", analyze_args.outdir, "output directory")->required();
    analyze->add_flag("--force", analyze_args.force, "overwrite existing outputs");
    analyze->callback([&]() { run_analyze(analyze_args); });

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "hallucination metrics from record files");
    eval->add_option("--chair", eval_args.chair_path, "caption records (JSONL)");
    eval->add_option("--pope", eval_args.pope_path, "binary QA records (JSONL)");
    eval->add_option("-o,--output", eval_args.output, "summary JSON path")->required();
    eval->add_flag("--force", eval_args.force, "overwrite existing outputs");
    eval->callback([&]() { run_eval(eval_args); });

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "latency / throughput micro-benchmark");
    bench->add_option("--model", bench_args.model, "weights file")->required();
    bench->add_option("--input", bench_args.input, "sequence JSON (or dataset with --sample)")->required();
    bench->add_option("--sample", bench_args.sample_index, "sample index when --input is a dataset");
    bench->add_option("--directions", bench_args.directions, "steering directions file");
    bench->add_option("--config", bench_args.config, "intervention config file");
    bench->add_option("--n-tokens", bench_args.n_tokens, "decode steps per run");
    bench->add_option("--warmup", bench_args.warmup, "warmup iterations");
    bench->add_option("--timed", bench_args.timed, "timed iterations (>= 3)");
    bench->add_option("-o,--output", bench_args.output, "report JSON path")->required();
    bench->add_flag("--force", bench_args.force, "overwrite existing outputs");
    bench->callback([&]() { run_bench(bench_args); });

    GridArgs grid_args;
    auto* grid = app.add_subcommand("grid", "tied lambda grid search on a synthetic dataset");
    grid->add_option("--model", grid_args.model, "weights file")->required();
    grid->add_option("--synth", grid_args.synth, "synthetic dataset")->required();
    grid->add_option("--directions", grid_args.directions, "steering directions file")->required();
    grid->add_option("--config", grid_args.config,
                     "config file supplying modes and an optional grid.lambda_values list");
    grid->add_option("--grid", grid_args.lambda_csv, "comma-separated lambda values");
    grid->add_option("--holdout", grid_args.holdout, "evaluate only the first N samples");
    grid->add_option("--steps", grid_args.steps, "decode steps per evaluation");
    grid->add_option("--textual-mode", grid_args.textual_mode, "all_textual | last_token_only");
    grid->add_option("--normalization", grid_args.normalization, "per_token_norm_preserving | off");
    grid->add_option("-o,--output", grid_args.output, "score table CSV path")->required();
    grid->add_flag("--force", grid_args.force, "overwrite existing outputs");
    grid->callback([&]() { run_grid(grid_args); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const pti::fingerprint_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const pti::overwrite_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const pti::io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
