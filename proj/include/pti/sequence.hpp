#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pti/tensor.hpp"

namespace pti {

// Prompt embeddings plus the disjoint partition of positions into visual and
// textual index sets. Indices are kept sorted.
struct ModalitySegmentedSequence {
    Matrix embeddings;  // N_x x hidden_dim
    std::vector<size_t> visual_indices;
    std::vector<size_t> textual_indices;
    std::optional<std::vector<int>> token_ids;

    size_t length() const { return embeddings.rows; }

    // Checks the index sets are sorted, disjoint and together cover
    // {0..N_x-1}, and that embeddings are finite.
    void validate() const;
};

ModalitySegmentedSequence load_sequence_json(const std::string& path);
void save_sequence_json(const ModalitySegmentedSequence& seq, const std::string& path);

}  // namespace pti
