#include "pti/directions.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "pti/decoder.hpp"
#include "pti/errors.hpp"
#include "pti/linalg.hpp"

namespace pti {

size_t ObjectMask::object_count() const {
    size_t n = 0;
    for (uint8_t v : values) n += (v != 0);
    return n;
}

void ObjectMask::validate() const {
    for (uint8_t v : values) {
        if (v > 1) throw std::invalid_argument("ObjectMask: values must be 0 or 1");
    }
}

namespace {

ModalitySegmentedSequence stack_sequence(const Matrix& visual, const Matrix& textual) {
    ModalitySegmentedSequence seq;
    seq.embeddings = Matrix(visual.rows + textual.rows, visual.cols);
    for (size_t r = 0; r < visual.rows; ++r) {
        for (size_t c = 0; c < visual.cols; ++c) seq.embeddings.at(r, c) = visual.at(r, c);
    }
    for (size_t r = 0; r < textual.rows; ++r) {
        for (size_t c = 0; c < textual.cols; ++c) {
            seq.embeddings.at(visual.rows + r, c) = textual.at(r, c);
        }
    }
    for (size_t i = 0; i < visual.rows; ++i) seq.visual_indices.push_back(i);
    for (size_t i = 0; i < textual.rows; ++i) seq.textual_indices.push_back(visual.rows + i);
    return seq;
}

}  // namespace

ContrastiveVisualPair build_visual_contrast(const Matrix& image_tokens, const ObjectMask& mask,
                                            const Matrix& prompt_tokens) {
    mask.validate();
    if (mask.size() != image_tokens.rows) {
        throw std::invalid_argument("build_visual_contrast: mask length != visual token count");
    }
    if (image_tokens.rows == 0 || prompt_tokens.rows == 0) {
        throw std::invalid_argument("build_visual_contrast: empty image or prompt block");
    }
    if (image_tokens.cols != prompt_tokens.cols) {
        throw std::invalid_argument("build_visual_contrast: embedding width mismatch");
    }

    Matrix object_only = image_tokens;
    Matrix background_only = image_tokens;
    for (size_t r = 0; r < mask.size(); ++r) {
        Matrix& zeroed = mask.values[r] ? background_only : object_only;
        for (size_t c = 0; c < image_tokens.cols; ++c) zeroed.at(r, c) = 0.0;
    }

    ContrastiveVisualPair pair;
    pair.positive = stack_sequence(object_only, prompt_tokens);
    pair.negative = stack_sequence(background_only, prompt_tokens);
    const size_t objects = mask.object_count();
    pair.degenerate = (objects == 0 || objects == mask.size());
    return pair;
}

ContrastiveTextualPair build_textual_contrast(const Matrix& prompt_tokens,
                                              const std::vector<size_t>& anchor_indices,
                                              const Matrix& image_tokens,
                                              const std::vector<size_t>& protected_indices) {
    if (anchor_indices.empty()) {
        throw std::invalid_argument("build_textual_contrast: empty anchor set");
    }
    if (prompt_tokens.rows == 0 || image_tokens.rows == 0) {
        throw std::invalid_argument("build_textual_contrast: empty prompt or image block");
    }
    if (image_tokens.cols != prompt_tokens.cols) {
        throw std::invalid_argument("build_textual_contrast: embedding width mismatch");
    }
    std::vector<uint8_t> is_anchor(prompt_tokens.rows, 0);
    for (size_t i : anchor_indices) {
        if (i >= prompt_tokens.rows) {
            throw std::invalid_argument("build_textual_contrast: anchor index out of range");
        }
        is_anchor[i] = 1;
    }
    std::vector<uint8_t> is_protected(prompt_tokens.rows, 0);
    for (size_t i : protected_indices) {
        if (i >= prompt_tokens.rows) {
            throw std::invalid_argument("build_textual_contrast: protected index out of range");
        }
        if (is_anchor[i]) {
            throw std::invalid_argument("build_textual_contrast: index both anchor and protected");
        }
        is_protected[i] = 1;
    }

    // positive zeroes the non-anchor context, negative zeroes the anchors;
    // protected rows survive in both halves
    Matrix anchors_kept = prompt_tokens;
    Matrix anchors_masked = prompt_tokens;
    size_t maskable_context = 0;
    for (size_t r = 0; r < prompt_tokens.rows; ++r) {
        if (is_protected[r]) continue;
        Matrix& zeroed = is_anchor[r] ? anchors_masked : anchors_kept;
        if (!is_anchor[r]) ++maskable_context;
        for (size_t c = 0; c < prompt_tokens.cols; ++c) zeroed.at(r, c) = 0.0;
    }

    ContrastiveTextualPair pair;
    pair.positive = stack_sequence(image_tokens, anchors_kept);
    pair.negative = stack_sequence(image_tokens, anchors_masked);
    pair.last_index = image_tokens.rows + prompt_tokens.rows - 1;
    for (size_t i : anchor_indices) pair.anchor_indices.push_back(image_tokens.rows + i);
    std::sort(pair.anchor_indices.begin(), pair.anchor_indices.end());
    pair.degenerate = (maskable_context == 0);
    return pair;
}

PcaResult pca_denoise(const Matrix& sample_vectors, size_t rank) {
    const size_t n = sample_vectors.rows;
    const size_t dim = sample_vectors.cols;
    if (n < 1 || dim < 1) throw std::invalid_argument("pca_denoise: empty sample matrix");
    if (rank < 1 || rank > std::min(n, dim)) {
        throw std::invalid_argument("pca_denoise: rank must be in [1, min(N, dim)]");
    }

    PcaResult result;
    std::vector<double> mean(dim, 0.0);
    for (size_t r = 0; r < n; ++r) {
        for (size_t c = 0; c < dim; ++c) mean[c] += sample_vectors.at(r, c);
    }
    for (double& v : mean) v /= double(n);

    bool all_zero = true;
    for (size_t r = 0; r < n && all_zero; ++r) {
        for (size_t c = 0; c < dim; ++c) {
            if (sample_vectors.at(r, c) != 0.0) {
                all_zero = false;
                break;
            }
        }
    }
    if (all_zero) {
        result.direction.assign(dim, 0.0);
        result.degenerate = true;
        return result;
    }

    Matrix variation = sample_vectors;
    if (n >= 2) {  // centering a single sample would annihilate it
        for (size_t r = 0; r < n; ++r) {
            for (size_t c = 0; c < dim; ++c) variation.at(r, c) -= mean[c];
        }
    }

    SvdResult svd = svd_right(variation);
    const double sigma_max = svd.singular_values.empty() ? 0.0 : svd.singular_values[0];
    size_t numeric_rank = 0;
    for (double s : svd.singular_values) {
        if (s > 1e-12 * sigma_max && s > 0.0) ++numeric_rank;
    }

    const size_t effective = std::min(rank, numeric_rank);
    result.effective_rank = effective;
    result.rank_clamped = (rank > numeric_rank);

    // keep the mean's projection onto the top-`rank` variation directions and
    // its component outside the variation space entirely (no sample noise
    // lives there); discard only the low-variance noise directions
    std::vector<double> kept(dim, 0.0);
    std::vector<double> in_span(dim, 0.0);
    for (size_t j = 0; j < numeric_rank; ++j) {
        double coeff = 0.0;
        for (size_t c = 0; c < dim; ++c) coeff += svd.right_vectors.at(c, j) * mean[c];
        for (size_t c = 0; c < dim; ++c) {
            const double contrib = coeff * svd.right_vectors.at(c, j);
            in_span[c] += contrib;
            if (j < effective) kept[c] += contrib;
        }
    }
    result.direction.resize(dim);
    for (size_t c = 0; c < dim; ++c) result.direction[c] = kept[c] + (mean[c] - in_span[c]);

    double align = 0.0;
    for (size_t c = 0; c < dim; ++c) align += result.direction[c] * mean[c];
    if (align < 0.0) {
        for (double& v : result.direction) v = -v;
    }
    return result;
}

namespace {

// mean over `positions` of (pos_cache - neg_cache) rows, flattened head-major
std::vector<double> pooled_cache_difference(const LayerCache& pos_cache, const LayerCache& neg_cache,
                                            const std::vector<size_t>& positions, bool keys) {
    const size_t width = pos_cache.num_heads * pos_cache.head_dim;
    std::vector<double> out(width, 0.0);
    for (size_t p : positions) {
        const double* a = (keys ? pos_cache.keys : pos_cache.values).data() + p * width;
        const double* b = (keys ? neg_cache.keys : neg_cache.values).data() + p * width;
        for (size_t c = 0; c < width; ++c) out[c] += a[c] - b[c];
    }
    for (double& v : out) v /= double(positions.size());
    return out;
}

ExtractionResult reduce_samples(std::vector<std::vector<std::vector<double>>>&& key_samples,
                                std::vector<std::vector<std::vector<double>>>&& value_samples,
                                std::optional<size_t> pca_rank) {
    ExtractionResult result;
    result.key_samples = std::move(key_samples);
    result.value_samples = std::move(value_samples);
    const size_t layers = result.key_samples.size();
    result.key_directions.resize(layers);
    result.value_directions.resize(layers);

    auto reduce = [&](const std::vector<std::vector<double>>& samples) {
        const size_t dim = samples[0].size();
        std::vector<double> mean(dim, 0.0);
        // fixed sample-index order keeps the reduction bit-reproducible
        for (const auto& s : samples) {
            for (size_t c = 0; c < dim; ++c) mean[c] += s[c];
        }
        for (double& v : mean) v /= double(samples.size());
        if (!pca_rank) return mean;
        Matrix m(samples.size(), dim);
        for (size_t r = 0; r < samples.size(); ++r) {
            for (size_t c = 0; c < dim; ++c) m.at(r, c) = samples[r][c];
        }
        const size_t rank = std::min(*pca_rank, std::min(samples.size(), dim));
        return pca_denoise(m, rank).direction;
    };

    for (size_t l = 0; l < layers; ++l) {
        result.key_directions[l] = reduce(result.key_samples[l]);
        result.value_directions[l] = reduce(result.value_samples[l]);
    }
    return result;
}

}  // namespace

Matrix ExtractionResult::key_samples_per_layer(size_t layer) const {
    const auto& s = key_samples.at(layer);
    Matrix m(s.size(), s[0].size());
    for (size_t r = 0; r < s.size(); ++r) {
        for (size_t c = 0; c < m.cols; ++c) m.at(r, c) = s[r][c];
    }
    return m;
}

Matrix ExtractionResult::value_samples_per_layer(size_t layer) const {
    const auto& s = value_samples.at(layer);
    Matrix m(s.size(), s[0].size());
    for (size_t r = 0; r < s.size(); ++r) {
        for (size_t c = 0; c < m.cols; ++c) m.at(r, c) = s[r][c];
    }
    return m;
}

ExtractionResult extract_visual_directions(const Weights& weights,
                                           const std::vector<ContrastiveVisualPair>& pairs,
                                           std::optional<size_t> pca_rank) {
    if (pairs.empty()) throw std::invalid_argument("extract_visual_directions: no pairs");
    for (const auto& p : pairs) {
        if (p.positive.visual_indices != pairs[0].positive.visual_indices) {
            throw std::invalid_argument("extract_visual_directions: pairs must share I_img");
        }
    }

    const size_t layers = weights.config.num_layers;
    std::vector<std::vector<std::vector<double>>> key_samples(layers), value_samples(layers);
    for (const auto& pair : pairs) {
        KVCache pos_cache = prefill(weights, pair.positive).cache;
        KVCache neg_cache = prefill(weights, pair.negative).cache;
        for (size_t l = 0; l < layers; ++l) {
            key_samples[l].push_back(pooled_cache_difference(
                pos_cache.layers[l], neg_cache.layers[l], pair.positive.visual_indices, true));
            value_samples[l].push_back(pooled_cache_difference(
                pos_cache.layers[l], neg_cache.layers[l], pair.positive.visual_indices, false));
        }
    }
    return reduce_samples(std::move(key_samples), std::move(value_samples), pca_rank);
}

ExtractionResult extract_textual_directions(const Weights& weights,
                                            const std::vector<ContrastiveTextualPair>& pairs,
                                            std::optional<size_t> pca_rank) {
    if (pairs.empty()) throw std::invalid_argument("extract_textual_directions: no pairs");
    for (const auto& p : pairs) {
        if (p.positive.length() != pairs[0].positive.length()) {
            throw std::invalid_argument("extract_textual_directions: pairs must share sequence length");
        }
    }

    const size_t layers = weights.config.num_layers;
    std::vector<std::vector<std::vector<double>>> key_samples(layers), value_samples(layers);
    for (const auto& pair : pairs) {
        KVCache pos_cache = prefill(weights, pair.positive).cache;
        KVCache neg_cache = prefill(weights, pair.negative).cache;
        const std::vector<size_t> last = {pair.last_index};
        for (size_t l = 0; l < layers; ++l) {
            key_samples[l].push_back(pooled_cache_difference(pos_cache.layers[l],
                                                             neg_cache.layers[l], last, true));
            value_samples[l].push_back(pooled_cache_difference(pos_cache.layers[l],
                                                               neg_cache.layers[l], last, false));
        }
    }
    return reduce_samples(std::move(key_samples), std::move(value_samples), pca_rank);
}

void SteeringDirections::validate() const {
    const size_t width = num_heads * head_dim;
    auto check = [&](const std::vector<std::vector<double>>& dirs, const char* name) {
        if (dirs.size() != num_layers) {
            throw std::invalid_argument(std::string("SteeringDirections: layer count mismatch in ") + name);
        }
        for (const auto& layer : dirs) {
            if (layer.size() != width) {
                throw std::invalid_argument(std::string("SteeringDirections: bad width in ") + name);
            }
            for (double v : layer) {
                if (!std::isfinite(v)) {
                    throw std::invalid_argument(std::string("SteeringDirections: non-finite entry in ") + name);
                }
            }
        }
    };
    check(visual_key, "visual_key");
    check(visual_value, "visual_value");
    check(textual_key, "textual_key");
    check(textual_value, "textual_value");
}

SteeringDirections assemble_directions(const Weights& weights,
                                       const std::vector<ContrastiveVisualPair>& visual_pairs,
                                       const std::vector<ContrastiveTextualPair>& textual_pairs,
                                       std::optional<size_t> pca_rank) {
    ExtractionResult visual = extract_visual_directions(weights, visual_pairs, pca_rank);
    ExtractionResult textual = extract_textual_directions(weights, textual_pairs, pca_rank);

    SteeringDirections dirs;
    dirs.model_fingerprint = weights_fingerprint(weights);
    dirs.num_layers = weights.config.num_layers;
    dirs.num_heads = weights.config.num_heads;
    dirs.head_dim = weights.config.head_dim;
    dirs.sample_count = visual_pairs.size();
    dirs.pca_rank = pca_rank;
    dirs.visual_key = std::move(visual.key_directions);
    dirs.visual_value = std::move(visual.value_directions);
    dirs.textual_key = std::move(textual.key_directions);
    dirs.textual_value = std::move(textual.value_directions);
    dirs.validate();
    return dirs;
}

namespace {

constexpr int kDirectionsVersion = 1;

std::vector<double> layer_norms(const std::vector<std::vector<double>>& dirs) {
    std::vector<double> norms;
    norms.reserve(dirs.size());
    for (const auto& layer : dirs) norms.push_back(l2_norm(layer));
    return norms;
}

}  // namespace

void save_directions_json(const SteeringDirections& dirs, const std::string& path) {
    dirs.validate();
    nlohmann::json j;
    j["format_version"] = kDirectionsVersion;
    j["model_fingerprint"] = dirs.model_fingerprint;
    j["num_layers"] = dirs.num_layers;
    j["num_heads"] = dirs.num_heads;
    j["head_dim"] = dirs.head_dim;
    j["sample_count"] = dirs.sample_count;
    if (dirs.pca_rank) {
        j["pca_rank"] = *dirs.pca_rank;
    } else {
        j["pca_rank"] = nullptr;
    }
    j["visual_key"] = dirs.visual_key;
    j["visual_value"] = dirs.visual_value;
    j["textual_key"] = dirs.textual_key;
    j["textual_value"] = dirs.textual_value;
    j["visual_key_norms"] = layer_norms(dirs.visual_key);
    j["visual_value_norms"] = layer_norms(dirs.visual_value);
    j["textual_key_norms"] = layer_norms(dirs.textual_key);
    j["textual_value_norms"] = layer_norms(dirs.textual_value);

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open directions file for writing: " + path);
    out << j.dump(2) << "\n";
}

SteeringDirections load_directions_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open directions file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad directions JSON in " + path + ": " + e.what());
    }
    if (j.at("format_version").get<int>() != kDirectionsVersion) {
        throw io_error("unsupported directions format version");
    }

    SteeringDirections dirs;
    dirs.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    dirs.num_layers = j.at("num_layers").get<size_t>();
    dirs.num_heads = j.at("num_heads").get<size_t>();
    dirs.head_dim = j.at("head_dim").get<size_t>();
    dirs.sample_count = j.at("sample_count").get<size_t>();
    if (!j.at("pca_rank").is_null()) dirs.pca_rank = j["pca_rank"].get<size_t>();
    dirs.visual_key = j.at("visual_key").get<std::vector<std::vector<double>>>();
    dirs.visual_value = j.at("visual_value").get<std::vector<std::vector<double>>>();
    dirs.textual_key = j.at("textual_key").get<std::vector<std::vector<double>>>();
    dirs.textual_value = j.at("textual_value").get<std::vector<std::vector<double>>>();
    dirs.validate();
    return dirs;
}

}  // namespace pti
