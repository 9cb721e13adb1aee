#include "pti/sequence.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "pti/errors.hpp"

namespace pti {

void ModalitySegmentedSequence::validate() const {
    const size_t n = length();
    if (n == 0) throw std::invalid_argument("sequence: empty embeddings");
    if (!embeddings.all_finite()) throw std::invalid_argument("sequence: non-finite embeddings");
    if (!std::is_sorted(visual_indices.begin(), visual_indices.end()) ||
        !std::is_sorted(textual_indices.begin(), textual_indices.end())) {
        throw std::invalid_argument("sequence: index sets must be sorted");
    }
    std::vector<uint8_t> seen(n, 0);
    for (size_t i : visual_indices) {
        if (i >= n) throw std::invalid_argument("sequence: visual index out of range");
        if (seen[i]++) throw std::invalid_argument("sequence: duplicate index");
    }
    for (size_t i : textual_indices) {
        if (i >= n) throw std::invalid_argument("sequence: textual index out of range");
        if (seen[i]++) throw std::invalid_argument("sequence: index in both modalities");
    }
    for (size_t i = 0; i < n; ++i) {
        if (!seen[i]) throw std::invalid_argument("sequence: position not covered by either modality");
    }
    if (token_ids && token_ids->size() != n) {
        throw std::invalid_argument("sequence: token_ids length mismatch");
    }
}

ModalitySegmentedSequence load_sequence_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open sequence file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad sequence JSON in " + path + ": " + e.what());
    }

    ModalitySegmentedSequence seq;
    const auto& emb = j.at("embeddings");
    seq.embeddings = Matrix(emb.size(), emb.empty() ? 0 : emb[0].size());
    for (size_t r = 0; r < emb.size(); ++r) {
        if (emb[r].size() != seq.embeddings.cols) {
            throw io_error("sequence: ragged embedding rows in " + path);
        }
        for (size_t c = 0; c < seq.embeddings.cols; ++c) {
            seq.embeddings.at(r, c) = emb[r][c].get<double>();
        }
    }
    seq.visual_indices = j.at("visual_indices").get<std::vector<size_t>>();
    seq.textual_indices = j.at("textual_indices").get<std::vector<size_t>>();
    if (j.contains("token_ids")) seq.token_ids = j["token_ids"].get<std::vector<int>>();
    seq.validate();
    return seq;
}

void save_sequence_json(const ModalitySegmentedSequence& seq, const std::string& path) {
    nlohmann::json j;
    auto rows = nlohmann::json::array();
    for (size_t r = 0; r < seq.embeddings.rows; ++r) {
        auto row = nlohmann::json::array();
        for (size_t c = 0; c < seq.embeddings.cols; ++c) row.push_back(seq.embeddings.at(r, c));
        rows.push_back(std::move(row));
    }
    j["embeddings"] = std::move(rows);
    j["visual_indices"] = seq.visual_indices;
    j["textual_indices"] = seq.textual_indices;
    if (seq.token_ids) j["token_ids"] = *seq.token_ids;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open sequence file for writing: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace pti
