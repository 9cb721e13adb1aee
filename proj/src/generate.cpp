#include "pti/generate.hpp"

#include <algorithm>
#include <cmath>

namespace pti {

namespace {

int argmax_lowest_id(const std::vector<double>& logits) {
    if (logits.empty()) throw std::runtime_error("generate: empty vocabulary");
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = int(i);
    }
    return best;
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

int sample_nucleus(const std::vector<double>& logits, const NucleusStrategy& cfg, Rng& rng) {
    std::vector<double> probs(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) probs[i] = logits[i] / cfg.temperature;
    softmax_inplace(probs);

    std::vector<int> order(probs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });

    // smallest descending-probability prefix whose mass reaches top_p
    size_t nucleus_size = order.size();
    double mass = 0.0;
    for (size_t i = 0; i < order.size(); ++i) {
        mass += probs[order[i]];
        if (mass >= cfg.top_p) {
            nucleus_size = i + 1;
            break;
        }
    }

    double u = rng.uniform() * mass;
    double acc = 0.0;
    for (size_t i = 0; i < nucleus_size; ++i) {
        acc += probs[order[i]];
        if (u < acc) return order[i];
    }
    return order[nucleus_size - 1];
}

GenerateResult run_single_stream(const Weights& weights, KVCache& cache,
                                 const DecodeStrategy& strategy, std::span<const double> first_input,
                                 size_t max_new, bool record) {
    GenerateResult result;
    result.trace.origin_length = cache.length();
    result.trace.num_layers = weights.config.num_layers;
    result.trace.num_heads = weights.config.num_heads;

    Rng rng(std::holds_alternative<NucleusStrategy>(strategy)
                ? std::get<NucleusStrategy>(strategy).seed
                : 0);

    std::vector<double> x(first_input.begin(), first_input.end());
    for (size_t step = 0; step < max_new; ++step) {
        if (cache.length() >= weights.config.max_seq_len) {
            result.truncated = true;
            break;
        }
        DecodeResult res = decode_step(weights, cache, x, record);
        if (record) result.trace.steps.push_back(std::move(res.attention_rows));

        int tok;
        if (std::holds_alternative<GreedyStrategy>(strategy)) {
            tok = argmax_lowest_id(res.logits);
        } else {
            tok = sample_nucleus(res.logits, std::get<NucleusStrategy>(strategy), rng);
        }
        result.token_ids.push_back(tok);
        if (tok == kEosTokenId) break;
        std::span<const double> emb = weights.embedding.row(size_t(tok));
        x.assign(emb.begin(), emb.end());
    }
    return result;
}

struct BeamHypothesis {
    KVCache cache;
    std::vector<int> tokens;
    double score = 0.0;           // summed log-probability
    std::vector<double> pending;  // embedding not yet fed through the model
    bool done = false;
};

// score first, then lexicographically smaller token sequence (a shorter
// sequence that is a prefix of a longer one wins)
bool beam_better(const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(), b.tokens.begin(),
                                        b.tokens.end());
}

GenerateResult run_beam(const Weights& weights, const KVCache& cache, const BeamStrategy& strategy,
                        std::span<const double> first_input, size_t max_new) {
    const size_t width = strategy.width;
    GenerateResult result;

    std::vector<BeamHypothesis> live(1);
    live[0].cache = cache;  // hypotheses branch on private copies
    live[0].pending.assign(first_input.begin(), first_input.end());
    std::vector<BeamHypothesis> completed;

    for (size_t step = 0; step < max_new && !live.empty(); ++step) {
        if (live[0].cache.length() >= weights.config.max_seq_len) {
            result.truncated = true;
            break;
        }

        struct Candidate {
            size_t parent;
            int token;
            double score;
        };
        std::vector<Candidate> pool;
        for (size_t p = 0; p < live.size(); ++p) {
            DecodeResult res = decode_step(weights, live[p].cache, live[p].pending);
            std::vector<double> lp = log_softmax(res.logits);
            // top `width` continuations of this hypothesis are enough: the
            // global prune keeps only `width` candidates in total
            std::vector<int> order(lp.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
            const size_t take = std::min(width, order.size());
            std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(take), order.end(),
                              [&](int a, int b) {
                                  if (lp[a] != lp[b]) return lp[a] > lp[b];
                                  return a < b;
                              });
            for (size_t i = 0; i < take; ++i) {
                pool.push_back({p, order[i], live[p].score + lp[order[i]]});
            }
        }

        std::sort(pool.begin(), pool.end(), [&](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            const auto& ta = live[a.parent].tokens;
            const auto& tb = live[b.parent].tokens;
            if (ta != tb) return std::lexicographical_compare(ta.begin(), ta.end(), tb.begin(), tb.end());
            return a.token < b.token;
        });

        std::vector<BeamHypothesis> next;
        const size_t keep = std::min(width, pool.size());
        for (size_t i = 0; i < keep; ++i) {
            const Candidate& c = pool[i];
            BeamHypothesis hyp;
            hyp.cache = live[c.parent].cache;  // parent cache already holds this step
            hyp.tokens = live[c.parent].tokens;
            hyp.tokens.push_back(c.token);
            hyp.score = c.score;
            if (c.token == kEosTokenId) {
                hyp.done = true;
                completed.push_back(std::move(hyp));
            } else {
                std::span<const double> emb = weights.embedding.row(size_t(c.token));
                hyp.pending.assign(emb.begin(), emb.end());
                next.push_back(std::move(hyp));
            }
        }
        live = std::move(next);
    }

    // best completed hypothesis wins; otherwise the best ongoing one
    const BeamHypothesis* best = nullptr;
    for (const auto& h : completed) {
        if (!best || beam_better(h, *best)) best = &h;
    }
    if (!best) {
        for (const auto& h : live) {
            if (!best || beam_better(h, *best)) best = &h;
        }
    }
    if (best) result.token_ids = best->tokens;
    return result;
}

}  // namespace

GenerateResult generate(const Weights& weights, KVCache& cache, const DecodeStrategy& strategy,
                        std::span<const double> first_input, size_t max_new, bool record) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    if (first_input.size() != weights.config.hidden_dim) {
        throw std::invalid_argument("generate: first_input dimension mismatch");
    }
    if (const auto* beam = std::get_if<BeamStrategy>(&strategy)) {
        if (beam->width < 1) throw std::invalid_argument("generate: beam width must be >= 1");
        if (record) {
            throw std::invalid_argument("generate: trace recording is not supported for beam search");
        }
        return run_beam(weights, cache, *beam, first_input, max_new);
    }
    if (const auto* nucleus = std::get_if<NucleusStrategy>(&strategy)) {
        if (!(nucleus->top_p > 0.0 && nucleus->top_p <= 1.0)) {
            throw std::invalid_argument("generate: top_p must be in (0, 1]");
        }
        if (!(nucleus->temperature > 0.0)) {
            throw std::invalid_argument("generate: temperature must be positive");
        }
    }
    return run_single_stream(weights, cache, strategy, first_input, max_new, record);
}

}  // namespace pti
