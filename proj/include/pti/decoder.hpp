#pragma once

#include <string>
#include <vector>

#include "pti/model.hpp"
#include "pti/sequence.hpp"
#include "pti/tensor.hpp"
#include "pti/trace.hpp"

namespace pti {

// Per-layer key/value store. Rows are kept position-major with stride
// hidden_dim, so appending a token is a contiguous push and the logical
// (head, position, head_dim) view is a strided span.
struct LayerCache {
    size_t num_heads = 0;
    size_t head_dim = 0;
    std::vector<double> keys;    // [pos][head*head_dim + j]
    std::vector<double> values;

    size_t length() const { return num_heads * head_dim == 0 ? 0 : keys.size() / (num_heads * head_dim); }

    std::span<double> key_row(size_t head, size_t pos) {
        return {keys.data() + pos * num_heads * head_dim + head * head_dim, head_dim};
    }
    std::span<const double> key_row(size_t head, size_t pos) const {
        return {keys.data() + pos * num_heads * head_dim + head * head_dim, head_dim};
    }
    std::span<double> value_row(size_t head, size_t pos) {
        return {values.data() + pos * num_heads * head_dim + head * head_dim, head_dim};
    }
    std::span<const double> value_row(size_t head, size_t pos) const {
        return {values.data() + pos * num_heads * head_dim + head * head_dim, head_dim};
    }
};

struct KVCache {
    std::vector<LayerCache> layers;
    size_t origin_length = 0;      // token count at end of prefill
    std::string model_fingerprint;
    bool visual_applied = false;   // intervention markers, one shot per modality
    bool textual_applied = false;

    size_t length() const { return layers.empty() ? 0 : layers[0].length(); }
};

struct DecodeResult {
    std::vector<double> logits;
    std::vector<double> hidden;  // final-layer hidden state of the new position
    // [layer][head] -> attention probability row over the updated cache;
    // filled only when decode_step is called with record = true
    std::vector<std::vector<std::vector<double>>> attention_rows;
};

struct PrefillResult {
    KVCache cache;
    std::vector<double> last_hidden;
};

// Runs the prompt through the decoder token by token, populating the cache.
// Embeddings already live in model space; positional rows are added here.
PrefillResult prefill(const Weights& weights, const ModalitySegmentedSequence& seq);

// Appends one token: projects k/v for x_t, extends every layer cache by one
// position, attends over the updated cache and returns logits for the next
// token. Position is implicit (current cache length).
DecodeResult decode_step(const Weights& weights, KVCache& cache, std::span<const double> x_t,
                         bool record = false);

// Cache-free reference: full-sequence causally masked self-attention, batch
// form. Returns the final-layer hidden state of every position. Used to
// cross-check the prefill/decode_step path.
Matrix attention_oracle(const Weights& weights, const ModalitySegmentedSequence& seq);

std::vector<double> logits_from_hidden(const Weights& weights, std::span<const double> hidden);

}  // namespace pti
