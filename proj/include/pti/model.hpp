#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pti/tensor.hpp"

namespace pti {

// Architecture hyperparameters. `test_mode` is a runtime-only switch that
// strips the block down to bare attention (no layer norm, no positional
// addition, no residuals, no MLP, no attention output projection) so that
// hand-computed examples hold exactly. It is never serialized.
struct ModelConfig {
    size_t num_layers = 1;
    size_t num_heads = 1;
    size_t head_dim = 1;
    size_t hidden_dim = 1;  // must equal num_heads * head_dim
    size_t vocab_size = 2;
    size_t max_seq_len = 1;
    uint64_t rng_seed = 0;
    bool test_mode = false;

    void validate() const;
};

struct LayerWeights {
    Matrix w_q, w_k, w_v, w_o;   // hidden_dim x hidden_dim
    Matrix mlp_in;               // hidden_dim x 4*hidden_dim
    Matrix mlp_out;              // 4*hidden_dim x hidden_dim
};

struct Weights {
    ModelConfig config;
    Matrix embedding;    // vocab_size x hidden_dim
    Matrix positional;   // max_seq_len x hidden_dim
    std::vector<LayerWeights> layers;
    Matrix output_head;  // hidden_dim x vocab_size

    void validate() const;
};

// Seeded random initialization. Projections are scaled by 1/sqrt(fan_in) so
// activations stay well-conditioned without any training.
Weights init_weights(const ModelConfig& config);

// Identity projections, zero MLP/positional, identity-ish head. The base for
// analytic hand examples; callers overwrite individual matrices as needed.
Weights make_test_weights(const ModelConfig& config);

// Binary weights file:
//   magic "PTIW", version u32, then L, N_h, d_h, D, vocab_size, max_seq_len
//   as little-endian u32, followed by float32 row-major tensors in order:
//   embedding, positional, per layer (w_q, w_k, w_v, w_o, mlp_in, mlp_out),
//   output head. A text manifest with tensor offsets is written alongside.
void save_weights(const Weights& weights, const std::string& path);
Weights load_weights(const std::string& path);

// FNV-1a over the serialized byte stream; identifies a weight set so that
// steering directions cannot be applied to the wrong model.
std::string weights_fingerprint(const Weights& weights);

}  // namespace pti
