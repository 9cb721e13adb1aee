#pragma once

#include <string>
#include <vector>

namespace pti {

// Per-step attention rows of the current query over all cached positions,
// kept for every layer and head. Row lengths grow by one per decode step:
// at step t each row has origin_length + t + 1 entries.
struct AttentionTrace {
    size_t origin_length = 0;
    size_t num_layers = 0;
    size_t num_heads = 0;
    // steps[t][layer][head] -> probability row
    std::vector<std::vector<std::vector<std::vector<double>>>> steps;

    size_t step_count() const { return steps.size(); }
    bool empty() const { return steps.empty(); }

    const std::vector<double>& row(size_t step, size_t layer, size_t head) const {
        return steps.at(step).at(layer).at(head);
    }

    // Row-length and distribution sanity checks (non-negative, sums to 1
    // within 1e-6, length == origin_length + t + 1).
    void validate() const;
};

// CSV with columns step,layer,head,position,weight. Weights are printed with
// round-trip precision so export followed by import reproduces the trace.
void save_trace_csv(const AttentionTrace& trace, const std::string& path);
AttentionTrace load_trace_csv(const std::string& path);

}  // namespace pti
