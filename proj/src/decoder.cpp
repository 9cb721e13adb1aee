#include "pti/decoder.hpp"

#include <cmath>

namespace pti {

namespace {

constexpr double kLayerNormEps = 1e-5;

void layer_norm(std::span<const double> x, std::span<double> out) {
    const size_t n = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= double(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

void mlp_into(const LayerWeights& lw, std::span<const double> x, std::span<double> out,
              std::vector<double>& inner) {
    inner.resize(lw.mlp_in.cols);
    row_times_matrix(x, lw.mlp_in, inner);
    for (double& v : inner) v = gelu(v);
    row_times_matrix(inner, lw.mlp_out, out);
}

KVCache make_cache(const Weights& weights) {
    const ModelConfig& cfg = weights.config;
    KVCache cache;
    cache.layers.resize(cfg.num_layers);
    for (LayerCache& lc : cache.layers) {
        lc.num_heads = cfg.num_heads;
        lc.head_dim = cfg.head_dim;
        lc.keys.reserve(cfg.max_seq_len * cfg.hidden_dim);
        lc.values.reserve(cfg.max_seq_len * cfg.hidden_dim);
    }
    cache.model_fingerprint = weights_fingerprint(weights);
    return cache;
}

}  // namespace

std::vector<double> logits_from_hidden(const Weights& weights, std::span<const double> hidden) {
    std::vector<double> logits(weights.config.vocab_size);
    row_times_matrix(hidden, weights.output_head, logits);
    return logits;
}

// Per-thread scratch keeps the hot decode loop free of allocations. A
// generation session is single-threaded by contract, so thread_local state
// is safe and sessions on different threads do not interfere.
struct DecodeScratch {
    std::vector<double> x, normed, q, k, v, attn, proj, row, inner;
};

DecodeResult decode_step(const Weights& weights, KVCache& cache, std::span<const double> x_t,
                         bool record) {
    const ModelConfig& cfg = weights.config;
    const size_t d = cfg.hidden_dim;
    const size_t dh = cfg.head_dim;
    if (x_t.size() != d) throw std::invalid_argument("decode_step: input dimension mismatch");
    if (cache.layers.size() != cfg.num_layers) {
        throw std::invalid_argument("decode_step: cache layer count mismatch");
    }
    const size_t pos = cache.length();
    if (pos >= cfg.max_seq_len) throw std::runtime_error("decode_step: cache exhausted");
    for (double v : x_t) {
        if (!std::isfinite(v)) throw std::invalid_argument("decode_step: non-finite input");
    }

    thread_local DecodeScratch s;
    s.x.assign(x_t.begin(), x_t.end());
    s.normed.resize(d);
    s.q.resize(d);
    s.k.resize(d);
    s.v.resize(d);
    s.attn.resize(d);
    s.proj.resize(d);
    if (!cfg.test_mode) {
        for (size_t i = 0; i < d; ++i) s.x[i] += weights.positional.at(pos, i);
    }

    DecodeResult result;
    if (record) result.attention_rows.resize(cfg.num_layers);

    const double scale = 1.0 / std::sqrt(double(dh));

    for (size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[l];
        LayerCache& lc = cache.layers[l];

        std::span<const double> a_in(s.x);
        if (!cfg.test_mode) {
            layer_norm(s.x, s.normed);
            a_in = s.normed;
        }
        row_times_matrix(a_in, lw.w_q, s.q);
        row_times_matrix(a_in, lw.w_k, s.k);
        row_times_matrix(a_in, lw.w_v, s.v);

        lc.keys.insert(lc.keys.end(), s.k.begin(), s.k.end());
        lc.values.insert(lc.values.end(), s.v.begin(), s.v.end());
        const size_t n = pos + 1;  // cache length after the append

        if (record) result.attention_rows[l].resize(cfg.num_heads);
        for (size_t h = 0; h < cfg.num_heads; ++h) {
            std::span<const double> qh(s.q.data() + h * dh, dh);
            s.row.resize(n);
            for (size_t j = 0; j < n; ++j) s.row[j] = dot(qh, lc.key_row(h, j)) * scale;
            softmax_inplace(s.row);

            double* out_h = s.attn.data() + h * dh;
            for (size_t i = 0; i < dh; ++i) out_h[i] = 0.0;
            for (size_t j = 0; j < n; ++j) {
                const double p = s.row[j];
                std::span<const double> vh = lc.value_row(h, j);
                for (size_t i = 0; i < dh; ++i) out_h[i] += p * vh[i];
            }
            if (record) result.attention_rows[l][h] = s.row;
        }

        if (cfg.test_mode) {
            s.x = s.attn;
        } else {
            row_times_matrix(s.attn, lw.w_o, s.proj);
            for (size_t i = 0; i < d; ++i) s.x[i] += s.proj[i];
            layer_norm(s.x, s.normed);
            mlp_into(lw, s.normed, s.proj, s.inner);
            for (size_t i = 0; i < d; ++i) s.x[i] += s.proj[i];
        }
    }

    result.hidden = s.x;
    result.logits = logits_from_hidden(weights, s.x);
    return result;
}

PrefillResult prefill(const Weights& weights, const ModalitySegmentedSequence& seq) {
    const ModelConfig& cfg = weights.config;
    seq.validate();
    if (seq.embeddings.cols != cfg.hidden_dim) {
        throw std::invalid_argument("prefill: embedding dimension mismatch");
    }
    if (seq.length() > cfg.max_seq_len) {
        throw std::invalid_argument("prefill: sequence longer than max_seq_len");
    }

    PrefillResult result;
    result.cache = make_cache(weights);
    for (size_t i = 0; i < seq.length(); ++i) {
        DecodeResult step = decode_step(weights, result.cache, seq.embeddings.row(i));
        if (i + 1 == seq.length()) result.last_hidden = std::move(step.hidden);
    }
    result.cache.origin_length = result.cache.length();
    return result;
}

Matrix attention_oracle(const Weights& weights, const ModalitySegmentedSequence& seq) {
    const ModelConfig& cfg = weights.config;
    seq.validate();
    if (seq.embeddings.cols != cfg.hidden_dim) {
        throw std::invalid_argument("attention_oracle: embedding dimension mismatch");
    }
    if (seq.length() > cfg.max_seq_len) {
        throw std::invalid_argument("attention_oracle: sequence longer than max_seq_len");
    }

    const size_t n = seq.length();
    const size_t d = cfg.hidden_dim;
    const size_t dh = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(double(dh));

    Matrix x = seq.embeddings;
    if (!cfg.test_mode) {
        for (size_t i = 0; i < n; ++i) {
            for (size_t c = 0; c < d; ++c) x.at(i, c) += weights.positional.at(i, c);
        }
    }

    Matrix q(n, d), k(n, d), v(n, d), attn(n, d);
    std::vector<double> normed(d), tmp(d), inner;

    for (size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[l];
        for (size_t i = 0; i < n; ++i) {
            std::span<const double> a_in = x.row(i);
            if (!cfg.test_mode) {
                layer_norm(x.row(i), normed);
                a_in = normed;
            }
            row_times_matrix(a_in, lw.w_q, q.row(i));
            row_times_matrix(a_in, lw.w_k, k.row(i));
            row_times_matrix(a_in, lw.w_v, v.row(i));
        }

        // causal: position i attends to positions <= i
        for (size_t i = 0; i < n; ++i) {
            for (size_t h = 0; h < cfg.num_heads; ++h) {
                std::span<const double> qh(q.row(i).data() + h * dh, dh);
                std::vector<double> row(i + 1);
                for (size_t j = 0; j <= i; ++j) {
                    std::span<const double> kh(k.row(j).data() + h * dh, dh);
                    row[j] = dot(qh, kh) * scale;
                }
                softmax_inplace(row);
                double* out_h = attn.row(i).data() + h * dh;
                for (size_t c = 0; c < dh; ++c) out_h[c] = 0.0;
                for (size_t j = 0; j <= i; ++j) {
                    const double* vh = v.row(j).data() + h * dh;
                    for (size_t c = 0; c < dh; ++c) out_h[c] += row[j] * vh[c];
                }
            }
        }

        for (size_t i = 0; i < n; ++i) {
            if (cfg.test_mode) {
                for (size_t c = 0; c < d; ++c) x.at(i, c) = attn.at(i, c);
            } else {
                row_times_matrix(attn.row(i), lw.w_o, tmp);
                for (size_t c = 0; c < d; ++c) x.at(i, c) += tmp[c];
                layer_norm(x.row(i), normed);
                mlp_into(lw, normed, tmp, inner);
                for (size_t c = 0; c < d; ++c) x.at(i, c) += tmp[c];
            }
        }
    }
    return x;
}

}  // namespace pti
