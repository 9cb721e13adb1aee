#pragma once

#include <string>
#include <vector>

#include "pti/directions.hpp"
#include "pti/tensor.hpp"
#include "pti/trace.hpp"

namespace pti {

struct AnalyticsConfig {
    double epsilon = 1e-9;
    size_t num_stages = 4;
};

// Scalar sampled at aligned generation stages (visual attention proportion,
// relative change rate, ...). `eps_guarded` marks stages whose denominator
// was dominated by epsilon.
struct StageSeries {
    std::string name;
    std::vector<size_t> step_indices;  // t_k per stage, non-decreasing, starts at 0
    std::vector<double> values;
    std::vector<uint8_t> eps_guarded;

    size_t size() const { return values.size(); }
};

// Average over layers and heads of the attention mass on visual positions at
// one generation step: (1/(L*H)) * sum_l sum_h sum_{v in I_img} A[v] /
// (sum_n A[n] + eps). Empty I_img yields 0.
double visual_attention_proportion(const AttentionTrace& trace, size_t step,
                                   const std::vector<size_t>& visual_indices,
                                   const AnalyticsConfig& cfg = {});

// P_img at every recorded step.
std::vector<double> visual_attention_series(const AttentionTrace& trace,
                                            const std::vector<size_t>& visual_indices,
                                            const AnalyticsConfig& cfg = {});

// Stage boundaries t_k = floor(k*N/K) for k = 0..K; an index landing on N is
// clamped to N-1 so the completion stage samples the final step.
std::vector<size_t> stage_indices(size_t total_steps, size_t num_stages);

// Samples a per-step series at the stage boundaries.
StageSeries staged_series(const std::vector<double>& per_step_values, size_t num_stages,
                          const std::string& name);

// Stage-wise relative change in percent: 100 * (after - before) / (|before| + eps).
StageSeries relative_change_rate(const StageSeries& before, const StageSeries& after,
                                 const AnalyticsConfig& cfg = {});

// Conditional distribution of one attention row over the visual positions.
// Zero visual mass is an error: a corrupted trace should fail loudly.
std::vector<double> renormalized_visual_attention(const std::vector<double>& row,
                                                  const std::vector<size_t>& visual_indices);

// Share of the renormalized visual attention falling inside the object mask.
double object_attention_score(const std::vector<double>& renormalized, const ObjectMask& mask);

// Per-layer, per-head S_obj at one step (rows = layers, cols = heads).
Matrix object_score_matrix(const AttentionTrace& trace, size_t step,
                           const std::vector<size_t>& visual_indices, const ObjectMask& mask);

// Elementwise after - before, heatmap-ready.
Matrix object_attention_shift(const Matrix& before, const Matrix& after);

// CSV schemas: series files carry stage,k,t_k,value,flag; heatmaps carry
// layer,head,delta.
void save_stage_series_csv(const StageSeries& series, const std::string& path);
void save_heatmap_csv(const Matrix& delta, const std::string& path);

}  // namespace pti
