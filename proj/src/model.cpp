#include "pti/model.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>

#include "pti/errors.hpp"

namespace pti {

void ModelConfig::validate() const {
    if (num_layers == 0 || num_heads == 0 || head_dim == 0) {
        throw std::invalid_argument("ModelConfig: layer/head/head_dim counts must be positive");
    }
    if (hidden_dim != num_heads * head_dim) {
        throw std::invalid_argument("ModelConfig: hidden_dim must equal num_heads * head_dim");
    }
    if (max_seq_len < 1) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
}

void Weights::validate() const {
    config.validate();
    const size_t d = config.hidden_dim;
    auto check = [](const Matrix& m, size_t r, size_t c, const char* name) {
        if (m.rows != r || m.cols != c) {
            throw std::invalid_argument(std::string("Weights: bad shape for ") + name);
        }
        if (!m.all_finite()) {
            throw std::invalid_argument(std::string("Weights: non-finite values in ") + name);
        }
    };
    check(embedding, config.vocab_size, d, "embedding");
    check(positional, config.max_seq_len, d, "positional");
    if (layers.size() != config.num_layers) {
        throw std::invalid_argument("Weights: layer count mismatch");
    }
    for (const LayerWeights& lw : layers) {
        check(lw.w_q, d, d, "w_q");
        check(lw.w_k, d, d, "w_k");
        check(lw.w_v, d, d, "w_v");
        check(lw.w_o, d, d, "w_o");
        check(lw.mlp_in, d, 4 * d, "mlp_in");
        check(lw.mlp_out, 4 * d, d, "mlp_out");
    }
    check(output_head, d, config.vocab_size, "output_head");
}

static void fill_normal(Matrix& m, Rng& rng, double stddev) {
    for (double& v : m.data) v = rng.normal() * stddev;
}

Weights init_weights(const ModelConfig& config) {
    config.validate();
    Weights w;
    w.config = config;
    const size_t d = config.hidden_dim;
    Rng rng(config.rng_seed);

    w.embedding = Matrix(config.vocab_size, d);
    fill_normal(w.embedding, rng, 1.0);
    w.positional = Matrix(config.max_seq_len, d);
    fill_normal(w.positional, rng, 0.1);

    const double proj_std = 1.0 / std::sqrt(double(d));
    const double mlp_out_std = 1.0 / std::sqrt(double(4 * d));
    w.layers.resize(config.num_layers);
    for (LayerWeights& lw : w.layers) {
        lw.w_q = Matrix(d, d);
        lw.w_k = Matrix(d, d);
        lw.w_v = Matrix(d, d);
        lw.w_o = Matrix(d, d);
        lw.mlp_in = Matrix(d, 4 * d);
        lw.mlp_out = Matrix(4 * d, d);
        fill_normal(lw.w_q, rng, proj_std);
        fill_normal(lw.w_k, rng, proj_std);
        fill_normal(lw.w_v, rng, proj_std);
        fill_normal(lw.w_o, rng, proj_std);
        fill_normal(lw.mlp_in, rng, proj_std);
        fill_normal(lw.mlp_out, rng, mlp_out_std);
    }

    w.output_head = Matrix(d, config.vocab_size);
    fill_normal(w.output_head, rng, proj_std);
    return w;
}

Weights make_test_weights(const ModelConfig& config) {
    config.validate();
    Weights w;
    w.config = config;
    const size_t d = config.hidden_dim;

    auto identity = [d]() {
        Matrix m(d, d);
        for (size_t i = 0; i < d; ++i) m.at(i, i) = 1.0;
        return m;
    };

    w.embedding = Matrix(config.vocab_size, d);
    w.positional = Matrix(config.max_seq_len, d);
    w.layers.resize(config.num_layers);
    for (LayerWeights& lw : w.layers) {
        lw.w_q = identity();
        lw.w_k = identity();
        lw.w_v = identity();
        lw.w_o = identity();
        lw.mlp_in = Matrix(d, 4 * d);
        lw.mlp_out = Matrix(4 * d, d);
    }
    // pad or truncate the identity to vocab columns
    w.output_head = Matrix(d, config.vocab_size);
    for (size_t i = 0; i < d && i < config.vocab_size; ++i) w.output_head.at(i, i) = 1.0;
    return w;
}

namespace {

constexpr uint32_t kWeightsVersion = 1;
constexpr char kMagic[4] = {'P', 'T', 'I', 'W'};

using Sink = std::function<void(const void*, size_t)>;

void put_u32(Sink& sink, uint32_t v) {
    std::array<uint8_t, 4> b = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
    sink(b.data(), b.size());
}

void put_matrix(Sink& sink, const Matrix& m) {
    std::vector<float> buf(m.data.size());
    for (size_t i = 0; i < m.data.size(); ++i) buf[i] = float(m.data[i]);
    sink(buf.data(), buf.size() * sizeof(float));
}

// Single serialization path shared by save_weights and the fingerprint so the
// two can never disagree about the byte stream.
void serialize_weights(const Weights& w, Sink sink) {
    sink(kMagic, 4);
    put_u32(sink, kWeightsVersion);
    put_u32(sink, uint32_t(w.config.num_layers));
    put_u32(sink, uint32_t(w.config.num_heads));
    put_u32(sink, uint32_t(w.config.head_dim));
    put_u32(sink, uint32_t(w.config.hidden_dim));
    put_u32(sink, uint32_t(w.config.vocab_size));
    put_u32(sink, uint32_t(w.config.max_seq_len));
    put_matrix(sink, w.embedding);
    put_matrix(sink, w.positional);
    for (const LayerWeights& lw : w.layers) {
        put_matrix(sink, lw.w_q);
        put_matrix(sink, lw.w_k);
        put_matrix(sink, lw.w_v);
        put_matrix(sink, lw.w_o);
        put_matrix(sink, lw.mlp_in);
        put_matrix(sink, lw.mlp_out);
    }
    put_matrix(sink, w.output_head);
}

struct TensorEntry {
    std::string name;
    size_t offset;
    size_t rows, cols;
};

std::vector<TensorEntry> manifest_entries(const Weights& w) {
    std::vector<TensorEntry> out;
    size_t off = 32;  // header: magic + version + 6 u32 fields
    auto add = [&](const std::string& name, const Matrix& m) {
        out.push_back({name, off, m.rows, m.cols});
        off += m.data.size() * sizeof(float);
    };
    add("embedding", w.embedding);
    add("positional", w.positional);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "w_q", w.layers[l].w_q);
        add(p + "w_k", w.layers[l].w_k);
        add(p + "w_v", w.layers[l].w_v);
        add(p + "w_o", w.layers[l].w_o);
        add(p + "mlp_in", w.layers[l].mlp_in);
        add(p + "mlp_out", w.layers[l].mlp_out);
    }
    add("output_head", w.output_head);
    return out;
}

uint32_t get_u32(std::ifstream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw io_error("weights file truncated in header");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

Matrix get_matrix(std::ifstream& in, size_t rows, size_t cols, const char* name) {
    Matrix m(rows, cols);
    std::vector<float> buf(rows * cols);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
    if (!in) throw io_error(std::string("weights file truncated reading ") + name);
    for (size_t i = 0; i < buf.size(); ++i) m.data[i] = double(buf[i]);
    return m;
}

}  // namespace

void save_weights(const Weights& weights, const std::string& path) {
    weights.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open weights file for writing: " + path);
    serialize_weights(weights, [&](const void* p, size_t n) {
        out.write(static_cast<const char*>(p), std::streamsize(n));
    });
    if (!out) throw io_error("failed writing weights file: " + path);
    out.close();

    std::ofstream man(path + ".manifest.txt", std::ios::trunc);
    if (!man) throw io_error("cannot open weights manifest for writing");
    man << "# tensor offset_bytes rows cols (float32 row-major, little-endian)\n";
    for (const TensorEntry& e : manifest_entries(weights)) {
        man << e.name << " " << e.offset << " " << e.rows << " " << e.cols << "\n";
    }
}

Weights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open weights file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw io_error("not a weights file (bad magic): " + path);
    }
    const uint32_t version = get_u32(in);
    if (version != kWeightsVersion) {
        throw io_error("unsupported weights format version " + std::to_string(version));
    }

    ModelConfig cfg;
    cfg.num_layers = get_u32(in);
    cfg.num_heads = get_u32(in);
    cfg.head_dim = get_u32(in);
    cfg.hidden_dim = get_u32(in);
    cfg.vocab_size = get_u32(in);
    cfg.max_seq_len = get_u32(in);
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw io_error("invalid weights header in " + path + ": " + e.what());
    }

    Weights w;
    w.config = cfg;
    const size_t d = cfg.hidden_dim;
    w.embedding = get_matrix(in, cfg.vocab_size, d, "embedding");
    w.positional = get_matrix(in, cfg.max_seq_len, d, "positional");
    w.layers.resize(cfg.num_layers);
    for (size_t l = 0; l < cfg.num_layers; ++l) {
        w.layers[l].w_q = get_matrix(in, d, d, "w_q");
        w.layers[l].w_k = get_matrix(in, d, d, "w_k");
        w.layers[l].w_v = get_matrix(in, d, d, "w_v");
        w.layers[l].w_o = get_matrix(in, d, d, "w_o");
        w.layers[l].mlp_in = get_matrix(in, d, 4 * d, "mlp_in");
        w.layers[l].mlp_out = get_matrix(in, 4 * d, d, "mlp_out");
    }
    w.output_head = get_matrix(in, d, cfg.vocab_size, "output_head");
    in.peek();
    if (!in.eof()) throw io_error("trailing bytes in weights file: " + path);
    try {
        w.validate();
    } catch (const std::invalid_argument& e) {
        throw io_error("invalid weights in " + path + ": " + e.what());
    }
    return w;
}

std::string weights_fingerprint(const Weights& weights) {
    uint64_t hash = 0xcbf29ce484222325ull;
    serialize_weights(weights, [&](const void* p, size_t n) {
        const uint8_t* bytes = static_cast<const uint8_t*>(p);
        for (size_t i = 0; i < n; ++i) {
            hash ^= bytes[i];
            hash *= 0x100000001b3ull;
        }
    });
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return std::string(buf);
}

}  // namespace pti
