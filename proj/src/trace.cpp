#include "pti/trace.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pti/errors.hpp"

namespace pti {

void AttentionTrace::validate() const {
    for (size_t t = 0; t < steps.size(); ++t) {
        const auto& layers = steps[t];
        if (layers.size() != num_layers) throw std::invalid_argument("trace: layer count mismatch");
        const size_t expected_len = origin_length + t + 1;
        for (const auto& heads : layers) {
            if (heads.size() != num_heads) throw std::invalid_argument("trace: head count mismatch");
            for (const auto& row : heads) {
                if (row.size() != expected_len) {
                    throw std::invalid_argument("trace: row length != origin_length + t + 1");
                }
                double sum = 0.0;
                for (double p : row) {
                    if (p < 0.0) throw std::invalid_argument("trace: negative attention weight");
                    sum += p;
                }
                if (std::fabs(sum - 1.0) > 1e-6) {
                    throw std::invalid_argument("trace: attention row does not sum to 1");
                }
            }
        }
    }
}

void save_trace_csv(const AttentionTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open trace file for writing: " + path);
    out << "step,layer,head,position,weight\n";
    char buf[40];
    for (size_t t = 0; t < trace.steps.size(); ++t) {
        for (size_t l = 0; l < trace.steps[t].size(); ++l) {
            for (size_t h = 0; h < trace.steps[t][l].size(); ++h) {
                const auto& row = trace.steps[t][l][h];
                for (size_t p = 0; p < row.size(); ++p) {
                    std::snprintf(buf, sizeof(buf), "%.17g", row[p]);
                    out << t << "," << l << "," << h << "," << p << "," << buf << "\n";
                }
            }
        }
    }
    if (!out) throw io_error("failed writing trace file: " + path);
}

AttentionTrace load_trace_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open trace file: " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("step,layer,head,position,weight", 0) != 0) {
        throw io_error("bad trace CSV header in " + path);
    }

    AttentionTrace trace;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        size_t t, l, h, p;
        double w;
        if (std::sscanf(line.c_str(), "%zu,%zu,%zu,%zu,%lf", &t, &l, &h, &p, &w) != 5) {
            throw io_error("bad trace CSV row at line " + std::to_string(lineno));
        }
        if (t >= trace.steps.size()) trace.steps.resize(t + 1);
        auto& layers = trace.steps[t];
        if (l >= layers.size()) layers.resize(l + 1);
        auto& heads = layers[l];
        if (h >= heads.size()) heads.resize(h + 1);
        auto& row = heads[h];
        if (p >= row.size()) row.resize(p + 1, 0.0);
        row[p] = w;
    }
    if (trace.steps.empty()) throw io_error("empty trace CSV: " + path);

    trace.num_layers = trace.steps[0].size();
    trace.num_heads = trace.num_layers ? trace.steps[0][0].size() : 0;
    if (trace.num_layers == 0 || trace.num_heads == 0) {
        throw io_error("trace CSV has no layer/head rows: " + path);
    }
    // n_0 = origin_length + 1
    trace.origin_length = trace.steps[0][0][0].size() - 1;
    try {
        trace.validate();
    } catch (const std::invalid_argument& e) {
        throw io_error("invalid trace in " + path + ": " + e.what());
    }
    return trace;
}

}  // namespace pti
