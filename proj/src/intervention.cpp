#include "pti/intervention.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "pti/errors.hpp"

namespace pti {

void InterventionConfig::validate() const {
    for (double v : {lambda_k_img, lambda_v_img, lambda_k_txt, lambda_v_txt}) {
        if (!std::isfinite(v)) throw std::invalid_argument("InterventionConfig: non-finite lambda");
    }
    if (tie_k && lambda_k_img != lambda_k_txt) {
        throw std::invalid_argument("InterventionConfig: tie_k set but key lambdas differ");
    }
    if (tie_v && lambda_v_img != lambda_v_txt) {
        throw std::invalid_argument("InterventionConfig: tie_v set but value lambdas differ");
    }
}

namespace {

// row += lambda * direction, then optionally rescale to the pre-shift norm.
// Skipped entirely at lambda == 0 so an identity intervention leaves every
// bit of the cache unchanged.
void shift_row(std::span<double> row, std::span<const double> direction, double lambda,
               bool preserve_norm) {
    if (lambda == 0.0) return;
    double old_sq = 0.0;
    for (double v : row) old_sq += v * v;
    for (size_t i = 0; i < row.size(); ++i) row[i] += lambda * direction[i];
    if (!preserve_norm) return;
    double new_sq = 0.0;
    for (double v : row) new_sq += v * v;
    if (new_sq == 0.0) return;  // canceled to zero; no norm to restore
    const double rescale = std::sqrt(old_sq / new_sq);
    for (double& v : row) v *= rescale;
}

void apply_directions(KVCache& cache, const SteeringDirections& dirs, double lambda_k,
                      double lambda_v, const std::vector<std::vector<double>>& key_dirs,
                      const std::vector<std::vector<double>>& value_dirs,
                      const std::vector<size_t>& positions, bool preserve_norm) {
    for (size_t l = 0; l < cache.layers.size(); ++l) {
        LayerCache& lc = cache.layers[l];
        for (size_t h = 0; h < lc.num_heads; ++h) {
            std::span<const double> sk = dirs.head_slice(key_dirs[l], h);
            std::span<const double> sv = dirs.head_slice(value_dirs[l], h);
            for (size_t pos : positions) {
                shift_row(lc.key_row(h, pos), sk, lambda_k, preserve_norm);
                shift_row(lc.value_row(h, pos), sv, lambda_v, preserve_norm);
            }
        }
    }
}

void check_compatible(const KVCache& cache, const SteeringDirections& dirs,
                      const std::vector<size_t>& positions) {
    if (dirs.model_fingerprint != cache.model_fingerprint) {
        throw fingerprint_error("steering directions were extracted from a different model (" +
                                dirs.model_fingerprint + " vs " + cache.model_fingerprint + ")");
    }
    if (cache.layers.size() != dirs.num_layers) {
        throw std::invalid_argument("intervention: layer count mismatch");
    }
    if (!cache.layers.empty() && (cache.layers[0].num_heads != dirs.num_heads ||
                                  cache.layers[0].head_dim != dirs.head_dim)) {
        throw std::invalid_argument("intervention: head geometry mismatch");
    }
    if (cache.origin_length == 0 || cache.origin_length > cache.length()) {
        throw std::invalid_argument("intervention: cache has no prefill origin");
    }
    for (size_t p : positions) {
        if (p >= cache.origin_length) {
            throw std::invalid_argument("intervention: target position beyond prefill origin");
        }
    }
}

}  // namespace

void apply_visual_intervention(KVCache& cache, const SteeringDirections& dirs,
                               const InterventionConfig& cfg,
                               const std::vector<size_t>& visual_indices) {
    cfg.validate();
    check_compatible(cache, dirs, visual_indices);
    if (cache.visual_applied) {
        throw std::runtime_error("visual intervention already applied to this cache");
    }
    apply_directions(cache, dirs, cfg.lambda_k_img, cfg.lambda_v_img, dirs.visual_key,
                     dirs.visual_value, visual_indices,
                     cfg.normalization_mode == NormalizationMode::per_token_norm_preserving);
    cache.visual_applied = true;
}

void apply_textual_intervention(KVCache& cache, const SteeringDirections& dirs,
                                const InterventionConfig& cfg,
                                const std::vector<size_t>& textual_indices) {
    cfg.validate();
    std::vector<size_t> targets;
    if (cfg.textual_position_mode == TextualPositionMode::last_token_only) {
        targets = {cache.origin_length - 1};
    } else {
        targets = textual_indices;
    }
    check_compatible(cache, dirs, targets);
    if (cache.textual_applied) {
        throw std::runtime_error("textual intervention already applied to this cache");
    }
    apply_directions(cache, dirs, cfg.lambda_k_txt, cfg.lambda_v_txt, dirs.textual_key,
                     dirs.textual_value, targets,
                     cfg.normalization_mode == NormalizationMode::per_token_norm_preserving);
    cache.textual_applied = true;
}

void apply_pti(KVCache& cache, const SteeringDirections& dirs, const InterventionConfig& cfg,
               const ModalitySegmentedSequence& seq) {
    apply_visual_intervention(cache, dirs, cfg, seq.visual_indices);
    apply_textual_intervention(cache, dirs, cfg, seq.textual_indices);
}

GridSearchResult grid_search_lambdas(
    const std::vector<InterventionConfig>& grid,
    const std::function<double(const InterventionConfig&)>& evaluate) {
    if (grid.empty()) throw std::invalid_argument("grid_search_lambdas: empty grid");

    GridSearchResult result;
    result.table.reserve(grid.size());
    for (size_t i = 0; i < grid.size(); ++i) {
        grid[i].validate();
        GridEntry entry;
        entry.config = grid[i];
        entry.score = evaluate(grid[i]);
        result.table.push_back(std::move(entry));
        if (i == 0 || result.table[i].score > result.best_score) {
            result.best_score = result.table[i].score;
            result.best_index = i;
        }
    }
    result.best = result.table[result.best_index].config;
    return result;
}

std::vector<InterventionConfig> make_tied_grid(const std::vector<double>& lambda_values,
                                               TextualPositionMode textual_mode,
                                               NormalizationMode norm_mode) {
    std::vector<InterventionConfig> grid;
    grid.reserve(lambda_values.size() * lambda_values.size());
    for (double lk : lambda_values) {
        for (double lv : lambda_values) {
            InterventionConfig cfg;
            cfg.lambda_k_img = cfg.lambda_k_txt = lk;
            cfg.lambda_v_img = cfg.lambda_v_txt = lv;
            cfg.tie_k = cfg.tie_v = true;
            cfg.textual_position_mode = textual_mode;
            cfg.normalization_mode = norm_mode;
            grid.push_back(cfg);
        }
    }
    return grid;
}

std::vector<double> default_lambda_values() {
    std::vector<double> v;
    for (int i = 0; i <= 10; ++i) v.push_back(double(i) / 10.0);
    return v;
}

void save_grid_csv(const GridSearchResult& result, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open grid CSV for writing: " + path);
    out << "lambda_k_img,lambda_v_img,lambda_k_txt,lambda_v_txt,score";
    if (!result.table.empty()) {
        for (const auto& [name, _] : result.table[0].extras) out << "," << name;
    }
    out << "\n";
    char buf[40];
    auto put = [&](double v, bool lead_comma = true) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        if (lead_comma) out << ",";
        out << buf;
    };
    for (const auto& entry : result.table) {
        put(entry.config.lambda_k_img, false);
        put(entry.config.lambda_v_img);
        put(entry.config.lambda_k_txt);
        put(entry.config.lambda_v_txt);
        put(entry.score);
        for (const auto& [_, value] : entry.extras) put(value);
        out << "\n";
    }
}

namespace {

std::string position_mode_name(TextualPositionMode m) {
    return m == TextualPositionMode::all_textual ? "all_textual" : "last_token_only";
}

std::string norm_mode_name(NormalizationMode m) {
    return m == NormalizationMode::per_token_norm_preserving ? "per_token_norm_preserving" : "off";
}

}  // namespace

void save_intervention_config_json(const InterventionConfig& cfg, const std::string& path) {
    cfg.validate();
    nlohmann::json j;
    j["lambda_k_img"] = cfg.lambda_k_img;
    j["lambda_v_img"] = cfg.lambda_v_img;
    j["lambda_k_txt"] = cfg.lambda_k_txt;
    j["lambda_v_txt"] = cfg.lambda_v_txt;
    j["tie_k"] = cfg.tie_k;
    j["tie_v"] = cfg.tie_v;
    j["textual_position_mode"] = position_mode_name(cfg.textual_position_mode);
    j["normalization_mode"] = norm_mode_name(cfg.normalization_mode);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open config file for writing: " + path);
    out << j.dump(2) << "\n";
}

InterventionConfig load_intervention_config_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad config JSON in " + path + ": " + e.what());
    }

    InterventionConfig cfg;
    cfg.lambda_k_img = j.at("lambda_k_img").get<double>();
    cfg.lambda_v_img = j.at("lambda_v_img").get<double>();
    cfg.lambda_k_txt = j.at("lambda_k_txt").get<double>();
    cfg.lambda_v_txt = j.at("lambda_v_txt").get<double>();
    cfg.tie_k = j.value("tie_k", false);
    cfg.tie_v = j.value("tie_v", false);
    const std::string pos = j.value("textual_position_mode", "all_textual");
    if (pos == "all_textual") {
        cfg.textual_position_mode = TextualPositionMode::all_textual;
    } else if (pos == "last_token_only") {
        cfg.textual_position_mode = TextualPositionMode::last_token_only;
    } else {
        throw io_error("unknown textual_position_mode: " + pos);
    }
    const std::string norm = j.value("normalization_mode", "per_token_norm_preserving");
    if (norm == "per_token_norm_preserving") {
        cfg.normalization_mode = NormalizationMode::per_token_norm_preserving;
    } else if (norm == "off") {
        cfg.normalization_mode = NormalizationMode::off;
    } else {
        throw io_error("unknown normalization_mode: " + norm);
    }
    cfg.validate();
    return cfg;
}

}  // namespace pti
