#include "pti/eval.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "pti/decoder.hpp"
#include "pti/errors.hpp"

namespace pti {

namespace {

std::string canonical_label(const std::string& raw) {
    size_t begin = 0;
    size_t end = raw.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(raw[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(raw[end - 1]))) --end;
    std::string out = raw.substr(begin, end - begin);
    for (char& c : out) c = char(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

CaptionRecord CaptionRecord::make(const std::vector<std::string>& mentioned,
                                  const std::vector<std::string>& ground_truth) {
    CaptionRecord rec;
    for (const auto& m : mentioned) rec.mentioned_objects.insert(canonical_label(m));
    for (const auto& g : ground_truth) rec.ground_truth_objects.insert(canonical_label(g));
    return rec;
}

ChairScores chair_scores(const std::vector<CaptionRecord>& records) {
    if (records.empty()) throw std::invalid_argument("chair_scores: no records");
    size_t total_mentions = 0;
    size_t hallucinated_mentions = 0;
    size_t captions_with_hallucination = 0;
    for (const auto& rec : records) {
        size_t h = 0;
        for (const auto& obj : rec.mentioned_objects) {
            if (!rec.ground_truth_objects.count(obj)) ++h;
        }
        total_mentions += rec.mentioned_objects.size();
        hallucinated_mentions += h;
        if (h > 0) ++captions_with_hallucination;
    }
    ChairScores scores;
    scores.chair_s = double(captions_with_hallucination) / double(records.size());
    scores.chair_i =
        total_mentions == 0 ? 0.0 : double(hallucinated_mentions) / double(total_mentions);
    return scores;
}

PopeScores pope_scores(const std::vector<BinaryQARecord>& records) {
    if (records.empty()) throw std::invalid_argument("pope_scores: no records");
    size_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (const auto& rec : records) {
        if (rec.prediction_yes && rec.label_yes) ++tp;
        else if (rec.prediction_yes && !rec.label_yes) ++fp;
        else if (!rec.prediction_yes && rec.label_yes) ++fn;
        else ++tn;
    }
    PopeScores scores;
    scores.accuracy = double(tp + tn) / double(records.size());
    const double precision = (tp + fp) ? double(tp) / double(tp + fp) : 0.0;
    const double recall = (tp + fn) ? double(tp) / double(tp + fn) : 0.0;
    scores.f1 = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    return scores;
}

namespace {

nlohmann::json parse_jsonl_line(const std::string& line, const std::string& path, size_t lineno) {
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad JSON at " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
}

bool parse_yes_no(const nlohmann::json& j, const char* field, const std::string& ctx) {
    const std::string v = canonical_label(j.at(field).get<std::string>());
    if (v == "yes") return true;
    if (v == "no") return false;
    throw io_error(ctx + ": field '" + field + "' must be yes or no, got '" + v + "'");
}

}  // namespace

std::vector<CaptionRecord> load_caption_records_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open records file: " + path);
    std::vector<CaptionRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = parse_jsonl_line(line, path, lineno);
        records.push_back(CaptionRecord::make(j.at("mentioned").get<std::vector<std::string>>(),
                                              j.at("ground_truth").get<std::vector<std::string>>()));
    }
    return records;
}

std::vector<BinaryQARecord> load_binary_qa_records_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open records file: " + path);
    std::vector<BinaryQARecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = parse_jsonl_line(line, path, lineno);
        const std::string ctx = path + ":" + std::to_string(lineno);
        records.push_back({parse_yes_no(j, "prediction", ctx), parse_yes_no(j, "label", ctx)});
    }
    return records;
}

void SynthTaskConfig::validate() const {
    if (num_samples < 1) throw std::invalid_argument("synth: num_samples must be >= 1");
    if (visual_token_count < 1) throw std::invalid_argument("synth: visual_token_count must be >= 1");
    if (!(object_fraction > 0.0 && object_fraction < 1.0)) {
        throw std::invalid_argument("synth: object_fraction must be in (0, 1)");
    }
    if (size_t(std::floor(object_fraction * double(visual_token_count))) < 1) {
        throw std::invalid_argument("synth: object_fraction * visual_token_count must floor to >= 1");
    }
    if (prompt_length < 2) throw std::invalid_argument("synth: prompt_length must be >= 2");
    if (!(signal_strength > 0.0)) throw std::invalid_argument("synth: signal_strength must be > 0");
    if (noise_scale < 0.0) throw std::invalid_argument("synth: noise_scale must be >= 0");
}

namespace {

std::vector<double> random_unit_vector(Rng& rng, size_t dim) {
    std::vector<double> v(dim);
    double norm_sq = 0.0;
    do {
        norm_sq = 0.0;
        for (double& x : v) {
            x = rng.normal();
            norm_sq += x * x;
        }
    } while (norm_sq == 0.0);
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v) x *= inv;
    return v;
}

// unit vector orthogonal to `axis`
std::vector<double> random_orthogonal_unit(Rng& rng, std::span<const double> axis) {
    for (;;) {
        std::vector<double> g = random_unit_vector(rng, axis.size());
        double along = 0.0;
        for (size_t i = 0; i < g.size(); ++i) along += g[i] * axis[i];
        double norm_sq = 0.0;
        for (size_t i = 0; i < g.size(); ++i) {
            g[i] -= along * axis[i];
            norm_sq += g[i] * g[i];
        }
        if (norm_sq > 1e-12) {
            const double inv = 1.0 / std::sqrt(norm_sq);
            for (double& x : g) x *= inv;
            return g;
        }
    }
}

}  // namespace

SynthDataset synth_grounding_dataset(const Weights& weights, const SynthTaskConfig& cfg) {
    cfg.validate();
    const ModelConfig& model = weights.config;
    const size_t d = model.hidden_dim;
    const size_t m = cfg.visual_token_count;
    const size_t p = cfg.prompt_length;
    if (m + p > model.max_seq_len) {
        throw std::invalid_argument("synth: sample length exceeds max_seq_len");
    }

    Rng rng(cfg.rng_seed);
    SynthDataset dataset;
    dataset.config = cfg;
    dataset.model_fingerprint = weights_fingerprint(weights);

    // one fixed query row shared across the dataset, standing in for the
    // instruction suffix of a prompt
    std::vector<double> query_row = random_unit_vector(rng, d);

    const size_t object_count = size_t(std::floor(cfg.object_fraction * double(m)));
    for (size_t s = 0; s < cfg.num_samples; ++s) {
        SynthSample sample;
        std::vector<double> signal = random_unit_vector(rng, d);

        // pick object positions without replacement
        std::vector<size_t> perm(m);
        for (size_t i = 0; i < m; ++i) perm[i] = i;
        for (size_t i = 0; i < object_count; ++i) {
            const size_t j = i + size_t(rng.below(uint64_t(m - i)));
            std::swap(perm[i], perm[j]);
        }
        sample.object_mask.values.assign(m, 0);
        for (size_t i = 0; i < object_count; ++i) sample.object_mask.values[perm[i]] = 1;

        sample.sequence.embeddings = Matrix(m + p, d);
        for (size_t r = 0; r < m; ++r) {
            if (sample.object_mask.values[r]) {
                for (size_t c = 0; c < d; ++c) {
                    sample.sequence.embeddings.at(r, c) = cfg.signal_strength * signal[c];
                }
            } else {
                std::vector<double> noise = random_orthogonal_unit(rng, signal);
                for (size_t c = 0; c < d; ++c) {
                    sample.sequence.embeddings.at(r, c) = cfg.noise_scale * noise[c];
                }
            }
        }
        // prompt block: context noise rows, then the anchor row mirroring the
        // object signal, then the shared query row
        for (size_t r = 0; r + 2 < p; ++r) {
            std::vector<double> noise = random_unit_vector(rng, d);
            for (size_t c = 0; c < d; ++c) {
                sample.sequence.embeddings.at(m + r, c) = 0.5 * noise[c];
            }
        }
        for (size_t c = 0; c < d; ++c) {
            sample.sequence.embeddings.at(m + p - 2, c) = cfg.signal_strength * signal[c];
            sample.sequence.embeddings.at(m + p - 1, c) = query_row[c];
        }
        for (size_t i = 0; i < m; ++i) sample.sequence.visual_indices.push_back(i);
        for (size_t i = 0; i < p; ++i) sample.sequence.textual_indices.push_back(m + i);
        sample.anchor_indices = {p - 2};

        // target token = the head's strongest response to the signal vector;
        // id 0 is reserved for EOS and skipped
        std::vector<double> response(model.vocab_size);
        row_times_matrix(signal, weights.output_head, response);
        int target = 1;
        for (size_t t = 2; t < model.vocab_size; ++t) {
            if (response[t] > response[size_t(target)]) target = int(t);
        }
        sample.target_token = target;
        sample.ground_truth_label = "object_" + std::to_string(target);

        sample.sequence.validate();
        dataset.samples.push_back(std::move(sample));
    }
    return dataset;
}

void save_synth_dataset_json(const SynthDataset& dataset, const std::string& path) {
    nlohmann::json j;
    j["config"] = {{"num_samples", dataset.config.num_samples},
                   {"visual_token_count", dataset.config.visual_token_count},
                   {"object_fraction", dataset.config.object_fraction},
                   {"prompt_length", dataset.config.prompt_length},
                   {"signal_strength", dataset.config.signal_strength},
                   {"noise_scale", dataset.config.noise_scale},
                   {"rng_seed", dataset.config.rng_seed}};
    j["model_fingerprint"] = dataset.model_fingerprint;
    auto samples = nlohmann::json::array();
    for (const auto& s : dataset.samples) {
        nlohmann::json js;
        auto rows = nlohmann::json::array();
        for (size_t r = 0; r < s.sequence.embeddings.rows; ++r) {
            auto row = nlohmann::json::array();
            for (size_t c = 0; c < s.sequence.embeddings.cols; ++c) {
                row.push_back(s.sequence.embeddings.at(r, c));
            }
            rows.push_back(std::move(row));
        }
        js["embeddings"] = std::move(rows);
        js["visual_indices"] = s.sequence.visual_indices;
        js["textual_indices"] = s.sequence.textual_indices;
        js["object_mask"] = s.object_mask.values;
        js["anchor_indices"] = s.anchor_indices;
        js["target_token"] = s.target_token;
        js["ground_truth"] = s.ground_truth_label;
        samples.push_back(std::move(js));
    }
    j["samples"] = std::move(samples);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open dataset file for writing: " + path);
    out << j.dump() << "\n";
}

SynthDataset load_synth_dataset_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open dataset file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad dataset JSON in " + path + ": " + e.what());
    }

    SynthDataset dataset;
    const auto& jc = j.at("config");
    dataset.config.num_samples = jc.at("num_samples").get<size_t>();
    dataset.config.visual_token_count = jc.at("visual_token_count").get<size_t>();
    dataset.config.object_fraction = jc.at("object_fraction").get<double>();
    dataset.config.prompt_length = jc.at("prompt_length").get<size_t>();
    dataset.config.signal_strength = jc.at("signal_strength").get<double>();
    dataset.config.noise_scale = jc.at("noise_scale").get<double>();
    dataset.config.rng_seed = jc.at("rng_seed").get<uint64_t>();
    dataset.model_fingerprint = j.at("model_fingerprint").get<std::string>();

    for (const auto& js : j.at("samples")) {
        SynthSample s;
        const auto& emb = js.at("embeddings");
        s.sequence.embeddings = Matrix(emb.size(), emb.empty() ? 0 : emb[0].size());
        for (size_t r = 0; r < emb.size(); ++r) {
            for (size_t c = 0; c < s.sequence.embeddings.cols; ++c) {
                s.sequence.embeddings.at(r, c) = emb[r][c].get<double>();
            }
        }
        s.sequence.visual_indices = js.at("visual_indices").get<std::vector<size_t>>();
        s.sequence.textual_indices = js.at("textual_indices").get<std::vector<size_t>>();
        s.object_mask.values = js.at("object_mask").get<std::vector<uint8_t>>();
        s.anchor_indices = js.at("anchor_indices").get<std::vector<size_t>>();
        s.target_token = js.at("target_token").get<int>();
        s.ground_truth_label = js.at("ground_truth").get<std::string>();
        s.sequence.validate();
        dataset.samples.push_back(std::move(s));
    }
    return dataset;
}

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double ms_between(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
}

struct TimedRun {
    double prefill_ms = 0.0;
    double intervention_ms = 0.0;
    double decode_ms = 0.0;
};

TimedRun run_once(const Weights& weights, const ModalitySegmentedSequence& seq,
                  const InterventionConfig* cfg, const SteeringDirections* dirs, size_t n_tokens) {
    TimedRun out;

    auto t0 = Clock::now();
    PrefillResult pre = prefill(weights, seq);
    auto t1 = Clock::now();
    out.prefill_ms = ms_between(t0, t1);

    // Both variants materialize the same throwaway copies so the baseline and
    // the intervened run enter their decode loops from identical machine
    // state; only the intervened variant times the applications. Several
    // applications are timed together (throwaway copies plus the real cache)
    // and reported per application, since a sub-millisecond single shot is
    // dominated by cache-residency noise. The decoded cache receives exactly
    // one application and keeps its reserved capacity.
    constexpr size_t kInterventionReps = 8;
    std::vector<KVCache> throwaway(kInterventionReps - 1, pre.cache);
    if (cfg) {
        auto t2 = Clock::now();
        for (KVCache& target : throwaway) apply_pti(target, *dirs, *cfg, seq);
        apply_pti(pre.cache, *dirs, *cfg, seq);
        auto t3 = Clock::now();
        out.intervention_ms = ms_between(t2, t3) / double(kInterventionReps);
    }
    throwaway.clear();

    // fixed-length greedy replay: EOS is ignored so every run decodes
    // exactly n_tokens steps
    std::vector<double> x(seq.embeddings.row(seq.length() - 1).begin(),
                          seq.embeddings.row(seq.length() - 1).end());
    auto t4 = Clock::now();
    for (size_t step = 0; step < n_tokens; ++step) {
        DecodeResult res = decode_step(weights, pre.cache, x);
        size_t best = 0;
        for (size_t i = 1; i < res.logits.size(); ++i) {
            if (res.logits[i] > res.logits[best]) best = i;
        }
        std::span<const double> emb = weights.embedding.row(best);
        x.assign(emb.begin(), emb.end());
    }
    auto t5 = Clock::now();
    if ((t5 - t4).count() < 10) {
        throw std::runtime_error(
            "measure_throughput: timer resolution insufficient; increase n_tokens");
    }
    out.decode_ms = ms_between(t4, t5);
    return out;
}

}  // namespace

LatencyReport measure_throughput(const Weights& weights, const ModalitySegmentedSequence& seq,
                                 const InterventionConfig* cfg, const SteeringDirections* dirs,
                                 size_t n_tokens, size_t warmup_iters, size_t timed_iters) {
    if (n_tokens < 1) throw std::invalid_argument("measure_throughput: n_tokens must be >= 1");
    if (timed_iters < 3) throw std::invalid_argument("measure_throughput: timed_iters must be >= 3");
    if (cfg && !dirs) {
        throw std::invalid_argument("measure_throughput: intervention config without directions");
    }
    if (seq.length() + n_tokens > weights.config.max_seq_len) {
        throw std::invalid_argument("measure_throughput: prompt + n_tokens exceeds max_seq_len");
    }

    for (size_t i = 0; i < warmup_iters; ++i) {
        run_once(weights, seq, nullptr, nullptr, n_tokens);
        run_once(weights, seq, cfg, dirs, n_tokens);
    }

    // interleave baseline and main runs, alternating which goes first, so
    // slow drift and frequency ramps hit both sides equally
    std::vector<double> base_decode, main_decode, main_prefill, main_interv;
    for (size_t i = 0; i < timed_iters; ++i) {
        TimedRun base, main;
        if (i % 2 == 0) {
            base = run_once(weights, seq, nullptr, nullptr, n_tokens);
            main = run_once(weights, seq, cfg, dirs, n_tokens);
        } else {
            main = run_once(weights, seq, cfg, dirs, n_tokens);
            base = run_once(weights, seq, nullptr, nullptr, n_tokens);
        }
        base_decode.push_back(base.decode_ms);
        main_decode.push_back(main.decode_ms);
        main_prefill.push_back(main.prefill_ms);
        main_interv.push_back(main.intervention_ms);
    }

    LatencyReport report;
    report.ms_per_token = median(main_decode) / double(n_tokens);
    report.tokens_per_second = 1000.0 / report.ms_per_token;
    report.prefill_ms = median(main_prefill);
    report.intervention_ms = median(main_interv);
    report.baseline_ms_per_token = median(base_decode) / double(n_tokens);
    report.factor_vs_baseline = report.ms_per_token / report.baseline_ms_per_token;
    return report;
}

void save_latency_report_json(const LatencyReport& report, const std::string& path) {
    nlohmann::json j;
    j["ms_per_token"] = report.ms_per_token;
    j["tokens_per_second"] = report.tokens_per_second;
    j["prefill_ms"] = report.prefill_ms;
    j["intervention_ms"] = report.intervention_ms;
    j["baseline_ms_per_token"] = report.baseline_ms_per_token;
    j["factor_vs_baseline"] = report.factor_vs_baseline;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open report file for writing: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace pti
