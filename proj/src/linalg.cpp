#include "pti/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace pti {

// One-sided Jacobi: rotate column pairs of A until all pairs are orthogonal.
// Accumulating the rotations yields V; the surviving column norms are the
// singular values. Numerically robust for the small, well-scaled matrices
// this runtime produces.
SvdResult svd_right(const Matrix& a) {
    const size_t rows = a.rows;
    const size_t cols = a.cols;

    Matrix work = a;
    Matrix v(cols, cols);
    for (size_t i = 0; i < cols; ++i) v.at(i, i) = 1.0;

    auto col_dot = [&](size_t p, size_t q) {
        double s = 0.0;
        for (size_t r = 0; r < rows; ++r) s += work.at(r, p) * work.at(r, q);
        return s;
    };

    const int max_sweeps = 60;
    const double tol = 1e-14;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p + 1 < cols; ++p) {
            for (size_t q = p + 1; q < cols; ++q) {
                const double apq = col_dot(p, q);
                const double app = col_dot(p, p);
                const double aqq = col_dot(q, q);
                const double denom = std::sqrt(app * aqq);
                if (denom == 0.0 || std::fabs(apq) <= tol * denom) continue;
                off = std::max(off, std::fabs(apq) / denom);

                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (size_t r = 0; r < rows; ++r) {
                    const double xp = work.at(r, p);
                    const double xq = work.at(r, q);
                    work.at(r, p) = c * xp - s * xq;
                    work.at(r, q) = s * xp + c * xq;
                }
                for (size_t r = 0; r < cols; ++r) {
                    const double vp = v.at(r, p);
                    const double vq = v.at(r, q);
                    v.at(r, p) = c * vp - s * vq;
                    v.at(r, q) = s * vp + c * vq;
                }
            }
        }
        if (off < tol) break;
    }

    // sort columns by singular value, descending
    std::vector<double> sigma(cols);
    std::vector<size_t> order(cols);
    for (size_t j = 0; j < cols; ++j) {
        sigma[j] = std::sqrt(std::max(0.0, col_dot(j, j)));
        order[j] = j;
    }
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return sigma[x] > sigma[y]; });

    SvdResult result;
    result.singular_values.resize(cols);
    result.right_vectors = Matrix(cols, cols);
    for (size_t j = 0; j < cols; ++j) {
        result.singular_values[j] = sigma[order[j]];
        for (size_t r = 0; r < cols; ++r) result.right_vectors.at(r, j) = v.at(r, order[j]);
    }
    return result;
}

}  // namespace pti
