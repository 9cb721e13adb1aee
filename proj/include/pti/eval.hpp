#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pti/directions.hpp"
#include "pti/intervention.hpp"
#include "pti/model.hpp"
#include "pti/sequence.hpp"

namespace pti {

// Object labels are canonicalized (trimmed, case-folded) on construction.
struct CaptionRecord {
    std::set<std::string> mentioned_objects;
    std::set<std::string> ground_truth_objects;

    static CaptionRecord make(const std::vector<std::string>& mentioned,
                              const std::vector<std::string>& ground_truth);
};

struct BinaryQARecord {
    bool prediction_yes = false;
    bool label_yes = false;
};

struct ChairScores {
    double chair_s = 0.0;  // fraction of captions containing any hallucinated mention
    double chair_i = 0.0;  // hallucinated mentions / total mentions
};

struct PopeScores {
    double accuracy = 0.0;
    double f1 = 0.0;  // positive class is "yes"
};

// A mention counts as hallucinated when it is absent from that record's
// ground truth. Both ratios use the 0/0 -> 0 convention.
ChairScores chair_scores(const std::vector<CaptionRecord>& records);

PopeScores pope_scores(const std::vector<BinaryQARecord>& records);

// Line-delimited JSON ingestion; one record object per line.
std::vector<CaptionRecord> load_caption_records_jsonl(const std::string& path);
std::vector<BinaryQARecord> load_binary_qa_records_jsonl(const std::string& path);

// Synthetic grounded-generation task. Each sample plants a per-sample random
// unit signal vector at a fixed number of visual positions, orthogonalized
// noise elsewhere, and mirrors the signal at one prompt anchor row. The
// target token is the head's argmax response to the signal, which makes
// "the right object" well-defined without any training.
struct SynthTaskConfig {
    size_t num_samples = 16;
    size_t visual_token_count = 16;  // m
    double object_fraction = 0.25;   // floor(object_fraction * m) >= 1
    size_t prompt_length = 4;        // p >= 2 (anchor row + query row)
    double signal_strength = 1.0;
    double noise_scale = 1.0;
    uint64_t rng_seed = 0;

    void validate() const;
};

struct SynthSample {
    ModalitySegmentedSequence sequence;
    ObjectMask object_mask;               // over visual positions
    std::vector<size_t> anchor_indices;   // prompt-relative
    int target_token = 0;
    std::string ground_truth_label;       // "object_<target_token>"
};

struct SynthDataset {
    SynthTaskConfig config;
    std::string model_fingerprint;
    std::vector<SynthSample> samples;
};

SynthDataset synth_grounding_dataset(const Weights& weights, const SynthTaskConfig& cfg);

void save_synth_dataset_json(const SynthDataset& dataset, const std::string& path);
SynthDataset load_synth_dataset_json(const std::string& path);

struct LatencyReport {
    double ms_per_token = 0.0;
    double tokens_per_second = 0.0;  // 1000 / ms_per_token
    double prefill_ms = 0.0;
    double intervention_ms = 0.0;
    double baseline_ms_per_token = 0.0;
    double factor_vs_baseline = 1.0;  // vanilla run in the same process = x1.00
};

// Median decode ms/token over `timed_iters` runs of `n_tokens` greedy steps,
// always measured against a vanilla baseline in the same process. Prefill
// and the one-time intervention are timed separately. The decode loop keeps
// feeding the argmax token and ignores EOS so every run has equal length.
LatencyReport measure_throughput(const Weights& weights, const ModalitySegmentedSequence& seq,
                                 const InterventionConfig* cfg, const SteeringDirections* dirs,
                                 size_t n_tokens, size_t warmup_iters, size_t timed_iters);

void save_latency_report_json(const LatencyReport& report, const std::string& path);

}  // namespace pti
