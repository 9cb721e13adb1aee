#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pti/model.hpp"
#include "pti/sequence.hpp"

namespace pti {

// Binary mask over the visual token positions; 1 marks an object token.
struct ObjectMask {
    std::vector<uint8_t> values;

    size_t size() const { return values.size(); }
    size_t object_count() const;
    void validate() const;
};

// Object-only vs background-only sequences sharing the textual suffix.
// Summing the two visual blocks elementwise reconstructs the original image
// tokens (the masks are complementary).
struct ContrastiveVisualPair {
    ModalitySegmentedSequence positive;
    ModalitySegmentedSequence negative;
    bool degenerate = false;  // mask was all-zero or all-one
};

// Anchor-preserving vs anchor-masked sequences sharing the visual prefix.
struct ContrastiveTextualPair {
    ModalitySegmentedSequence positive;
    ModalitySegmentedSequence negative;
    std::vector<size_t> anchor_indices;  // absolute sequence positions
    size_t last_index = 0;               // N_x - 1
    bool degenerate = false;             // anchors covered every maskable row
};

// Positive keeps only object rows of the image block, negative keeps only
// background rows; the prompt is identical in both. I_img covers the first m
// positions, I_txt the remaining p.
ContrastiveVisualPair build_visual_contrast(const Matrix& image_tokens, const ObjectMask& mask,
                                            const Matrix& prompt_tokens);

// Positive keeps anchor rows, negative masks them. `anchor_indices` are
// prompt-relative; `protected_indices` lists prompt rows exempt from masking
// in both halves (structural scaffolding).
ContrastiveTextualPair build_textual_contrast(const Matrix& prompt_tokens,
                                              const std::vector<size_t>& anchor_indices,
                                              const Matrix& image_tokens,
                                              const std::vector<size_t>& protected_indices = {});

struct PcaResult {
    std::vector<double> direction;
    bool degenerate = false;    // all-zero sample matrix
    bool rank_clamped = false;  // requested rank exceeded the matrix rank
    size_t effective_rank = 0;
};

// Projects the mean sample vector onto the span of the top-`rank` right
// singular vectors of the sample matrix (mean-centered when N >= 2). The
// component of the mean orthogonal to the whole variation space carries no
// sample noise and is kept, so full rank reproduces the mean exactly.
// Output is sign-aligned with the raw mean.
PcaResult pca_denoise(const Matrix& sample_vectors, size_t rank);

// Per-layer steering directions for one cache kind (keys or values), plus the
// per-sample vectors they were averaged from.
struct ExtractionResult {
    std::vector<std::vector<double>> key_directions;    // [layer][num_heads*head_dim]
    std::vector<std::vector<double>> value_directions;  // [layer][num_heads*head_dim]
    Matrix key_samples_per_layer(size_t layer) const;
    Matrix value_samples_per_layer(size_t layer) const;
    // raw per-sample vectors: [layer][sample][num_heads*head_dim]
    std::vector<std::vector<std::vector<double>>> key_samples;
    std::vector<std::vector<std::vector<double>>> value_samples;
};

// Two prefill passes per pair; the per-layer difference of cached keys/values
// is pooled over the visual positions and averaged over samples, then
// optionally PCA-denoised per layer.
ExtractionResult extract_visual_directions(const Weights& weights,
                                           const std::vector<ContrastiveVisualPair>& pairs,
                                           std::optional<size_t> pca_rank);

// Same contrast on the textual side, read off at the last token position.
ExtractionResult extract_textual_directions(const Weights& weights,
                                            const std::vector<ContrastiveTextualPair>& pairs,
                                            std::optional<size_t> pca_rank);

struct SteeringDirections {
    std::string model_fingerprint;
    size_t num_layers = 0;
    size_t num_heads = 0;
    size_t head_dim = 0;
    size_t sample_count = 0;
    std::optional<size_t> pca_rank;
    // [layer][num_heads*head_dim], head-major like the cache rows
    std::vector<std::vector<double>> visual_key, visual_value, textual_key, textual_value;

    std::span<const double> head_slice(const std::vector<double>& layer_dir, size_t head) const {
        return {layer_dir.data() + head * head_dim, head_dim};
    }
    void validate() const;
};

SteeringDirections assemble_directions(const Weights& weights,
                                       const std::vector<ContrastiveVisualPair>& visual_pairs,
                                       const std::vector<ContrastiveTextualPair>& textual_pairs,
                                       std::optional<size_t> pca_rank);

void save_directions_json(const SteeringDirections& dirs, const std::string& path);
SteeringDirections load_directions_json(const std::string& path);

}  // namespace pti
