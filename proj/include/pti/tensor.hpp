#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace pti {

// Dense row-major matrix of doubles. The runtime is desk scale and favors
// correctness over speed, so everything stays in plain contiguous storage.
struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(size_t r, size_t c) { return data[r * cols + c]; }
    double at(size_t r, size_t c) const { return data[r * cols + c]; }

    std::span<double> row(size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(size_t r) const { return {data.data() + r * cols, cols}; }

    bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

// out[j] = sum_i x[i] * w(i, j); x is a row vector of length w.rows.
inline void row_times_matrix(std::span<const double> x, const Matrix& w, std::span<double> out) {
    if (x.size() != w.rows || out.size() != w.cols) {
        throw std::invalid_argument("row_times_matrix: shape mismatch");
    }
    for (size_t j = 0; j < w.cols; ++j) out[j] = 0.0;
    for (size_t i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* wrow = w.data.data() + i * w.cols;
        for (size_t j = 0; j < w.cols; ++j) out[j] += xi * wrow[j];
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// In-place stable softmax: subtract the max before exponentiation.
inline void softmax_inplace(std::span<double> v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

// Deterministic generator used for weight init, synthetic data and nucleus
// sampling. Uniform/normal draws are derived from raw mt19937_64 words so the
// stream does not depend on libstdc++'s distribution implementations.
struct Rng {
    std::mt19937_64 gen;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed) : gen(seed) {}

    // uniform in [0, 1)
    double uniform() { return double(gen() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller
    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return gen() % n; }
};

}  // namespace pti
