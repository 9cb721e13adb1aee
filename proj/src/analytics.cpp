#include "pti/analytics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "pti/errors.hpp"

namespace pti {

double visual_attention_proportion(const AttentionTrace& trace, size_t step,
                                   const std::vector<size_t>& visual_indices,
                                   const AnalyticsConfig& cfg) {
    if (step >= trace.step_count()) {
        throw std::out_of_range("visual_attention_proportion: step not recorded");
    }
    if (visual_indices.empty()) return 0.0;

    const auto& layers = trace.steps[step];
    double total = 0.0;
    size_t head_count = 0;
    for (const auto& heads : layers) {
        for (const auto& row : heads) {
            for (size_t v : visual_indices) {
                if (v >= row.size()) {
                    throw std::out_of_range("visual_attention_proportion: visual index beyond row");
                }
            }
            double visual_mass = 0.0;
            for (size_t v : visual_indices) visual_mass += row[v];
            double row_mass = 0.0;
            for (double p : row) row_mass += p;
            total += visual_mass / (row_mass + cfg.epsilon);
            ++head_count;
        }
    }
    return total / double(head_count);
}

std::vector<double> visual_attention_series(const AttentionTrace& trace,
                                            const std::vector<size_t>& visual_indices,
                                            const AnalyticsConfig& cfg) {
    std::vector<double> out(trace.step_count());
    for (size_t t = 0; t < trace.step_count(); ++t) {
        out[t] = visual_attention_proportion(trace, t, visual_indices, cfg);
    }
    return out;
}

std::vector<size_t> stage_indices(size_t total_steps, size_t num_stages) {
    if (total_steps < 1) throw std::invalid_argument("stage_indices: total_steps must be >= 1");
    if (num_stages < 1) throw std::invalid_argument("stage_indices: num_stages must be >= 1");
    std::vector<size_t> out(num_stages + 1);
    for (size_t k = 0; k <= num_stages; ++k) {
        size_t idx = (k * total_steps) / num_stages;
        if (idx >= total_steps) idx = total_steps - 1;
        out[k] = idx;
    }
    return out;
}

StageSeries staged_series(const std::vector<double>& per_step_values, size_t num_stages,
                          const std::string& name) {
    StageSeries series;
    series.name = name;
    series.step_indices = stage_indices(per_step_values.size(), num_stages);
    for (size_t t : series.step_indices) series.values.push_back(per_step_values[t]);
    series.eps_guarded.assign(series.values.size(), 0);
    return series;
}

StageSeries relative_change_rate(const StageSeries& before, const StageSeries& after,
                                 const AnalyticsConfig& cfg) {
    if (before.size() != after.size()) {
        throw std::invalid_argument("relative_change_rate: stage count mismatch");
    }
    StageSeries out;
    out.name = "delta_r";
    out.step_indices = before.step_indices;
    out.values.resize(before.size());
    out.eps_guarded.resize(before.size());
    for (size_t k = 0; k < before.size(); ++k) {
        const double denom = std::fabs(before.values[k]) + cfg.epsilon;
        out.values[k] = 100.0 * (after.values[k] - before.values[k]) / denom;
        out.eps_guarded[k] = std::fabs(before.values[k]) <= cfg.epsilon ? 1 : 0;
    }
    return out;
}

std::vector<double> renormalized_visual_attention(const std::vector<double>& row,
                                                  const std::vector<size_t>& visual_indices) {
    if (visual_indices.empty()) {
        throw std::invalid_argument("renormalized_visual_attention: empty visual index set");
    }
    double mass = 0.0;
    for (size_t v : visual_indices) {
        if (v >= row.size()) {
            throw std::out_of_range("renormalized_visual_attention: index beyond row");
        }
        if (row[v] < 0.0) {
            throw std::invalid_argument("renormalized_visual_attention: negative weight");
        }
        mass += row[v];
    }
    if (mass <= 0.0) {
        throw std::domain_error("renormalized_visual_attention: zero visual attention mass");
    }
    std::vector<double> out(visual_indices.size());
    for (size_t i = 0; i < visual_indices.size(); ++i) out[i] = row[visual_indices[i]] / mass;
    return out;
}

double object_attention_score(const std::vector<double>& renormalized, const ObjectMask& mask) {
    if (renormalized.size() != mask.size()) {
        throw std::invalid_argument("object_attention_score: length mismatch");
    }
    double score = 0.0;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask.values[i]) score += renormalized[i];
    }
    return score;
}

Matrix object_score_matrix(const AttentionTrace& trace, size_t step,
                           const std::vector<size_t>& visual_indices, const ObjectMask& mask) {
    if (step >= trace.step_count()) throw std::out_of_range("object_score_matrix: step not recorded");
    const auto& layers = trace.steps[step];
    Matrix out(layers.size(), layers.empty() ? 0 : layers[0].size());
    for (size_t l = 0; l < layers.size(); ++l) {
        for (size_t h = 0; h < layers[l].size(); ++h) {
            const auto renorm = renormalized_visual_attention(layers[l][h], visual_indices);
            out.at(l, h) = object_attention_score(renorm, mask);
        }
    }
    return out;
}

Matrix object_attention_shift(const Matrix& before, const Matrix& after) {
    if (!before.same_shape(after)) {
        throw std::invalid_argument("object_attention_shift: shape mismatch");
    }
    Matrix out(before.rows, before.cols);
    for (size_t i = 0; i < before.data.size(); ++i) out.data[i] = after.data[i] - before.data[i];
    return out;
}

void save_stage_series_csv(const StageSeries& series, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open series CSV for writing: " + path);
    out << "stage,k,t_k,value,flag\n";
    char buf[40];
    for (size_t k = 0; k < series.size(); ++k) {
        std::snprintf(buf, sizeof(buf), "%.17g", series.values[k]);
        out << series.name << "," << k << "," << series.step_indices[k] << "," << buf << ","
            << (series.eps_guarded[k] ? "eps_guarded" : "") << "\n";
    }
}

void save_heatmap_csv(const Matrix& delta, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open heatmap CSV for writing: " + path);
    out << "layer,head,delta\n";
    char buf[40];
    for (size_t l = 0; l < delta.rows; ++l) {
        for (size_t h = 0; h < delta.cols; ++h) {
            std::snprintf(buf, sizeof(buf), "%.17g", delta.at(l, h));
            out << l << "," << h << "," << buf << "\n";
        }
    }
}

}  // namespace pti
