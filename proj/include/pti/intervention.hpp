#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pti/decoder.hpp"
#include "pti/directions.hpp"

namespace pti {

enum class TextualPositionMode { all_textual, last_token_only };
enum class NormalizationMode { per_token_norm_preserving, off };

// The four intervention strengths plus the tying and position conventions.
struct InterventionConfig {
    double lambda_k_img = 0.0;
    double lambda_v_img = 0.0;
    double lambda_k_txt = 0.0;
    double lambda_v_txt = 0.0;
    bool tie_k = false;  // enforces lambda_k_img == lambda_k_txt
    bool tie_v = false;
    TextualPositionMode textual_position_mode = TextualPositionMode::all_textual;
    NormalizationMode normalization_mode = NormalizationMode::per_token_norm_preserving;

    void validate() const;
};

// Shifts cached keys/values at the visual positions by the per-head visual
// directions, once. With normalization on, every modified row is rescaled
// back to its pre-intervention L2 norm. Rows outside I_img are untouched
// bit for bit; a second visual application is a hard error.
void apply_visual_intervention(KVCache& cache, const SteeringDirections& dirs,
                               const InterventionConfig& cfg,
                               const std::vector<size_t>& visual_indices);

// Textual counterpart; targets all textual positions or only the final
// prompt position depending on cfg.textual_position_mode.
void apply_textual_intervention(KVCache& cache, const SteeringDirections& dirs,
                                const InterventionConfig& cfg,
                                const std::vector<size_t>& textual_indices);

// Visual then textual. The target sets are disjoint so the order is
// immaterial; both orders produce bit-identical caches.
void apply_pti(KVCache& cache, const SteeringDirections& dirs, const InterventionConfig& cfg,
               const ModalitySegmentedSequence& seq);

struct GridEntry {
    InterventionConfig config;
    double score = 0.0;
    std::vector<std::pair<std::string, double>> extras;  // metric breakdown for the CSV
};

struct GridSearchResult {
    InterventionConfig best;
    double best_score = 0.0;
    size_t best_index = 0;
    std::vector<GridEntry> table;
};

// Evaluates every candidate in order; the maximal score wins and ties go to
// the earliest grid position.
GridSearchResult grid_search_lambdas(const std::vector<InterventionConfig>& grid,
                                     const std::function<double(const InterventionConfig&)>& evaluate);

// Tied (lambda_k, lambda_v) product grid over the given values, row-major
// with lambda_k varying slowest. The conventional default is 0, 0.1, ... 1.0.
std::vector<InterventionConfig> make_tied_grid(const std::vector<double>& lambda_values,
                                               TextualPositionMode textual_mode,
                                               NormalizationMode norm_mode);
std::vector<double> default_lambda_values();

void save_grid_csv(const GridSearchResult& result, const std::string& path);

void save_intervention_config_json(const InterventionConfig& cfg, const std::string& path);
InterventionConfig load_intervention_config_json(const std::string& path);

}  // namespace pti
