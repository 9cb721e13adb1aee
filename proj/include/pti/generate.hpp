#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "pti/decoder.hpp"

namespace pti {

// Token id 0 is the end-of-sequence marker; emitting it stops generation and
// the marker is kept in the returned token list.
constexpr int kEosTokenId = 0;

struct GreedyStrategy {};

struct BeamStrategy {
    size_t width = 5;
};

struct NucleusStrategy {
    double top_p = 1.0;
    double temperature = 1.0;
    uint64_t seed = 0;
};

using DecodeStrategy = std::variant<GreedyStrategy, BeamStrategy, NucleusStrategy>;

struct GenerateResult {
    std::vector<int> token_ids;
    bool truncated = false;  // cache filled up before max_new / EOS
    AttentionTrace trace;    // recorded only when requested (greedy/nucleus)
};

// Autoregressive decode over an already prefilled (and possibly intervened)
// cache. `first_input` is the embedding fed to the first decode step; later
// steps feed the embedding of the token just emitted. Greedy and nucleus
// decoding append to the caller's cache; beam search branches on private
// copies and leaves it untouched.
//
// Greedy breaks logit ties toward the lowest token id. Beam search ranks
// hypotheses by summed log-probability with ties broken toward the
// lexicographically smaller token sequence, and returns the best completed
// hypothesis (or the best ongoing one if none completed). Nucleus sampling
// scales logits by 1/temperature and samples from the smallest
// descending-probability prefix with mass >= top_p.
//
// Trace recording is supported for greedy and nucleus decoding only; beam
// hypotheses do not have a single attention history to record.
GenerateResult generate(const Weights& weights, KVCache& cache, const DecodeStrategy& strategy,
                        std::span<const double> first_input, size_t max_new, bool record = false);

}  // namespace pti
