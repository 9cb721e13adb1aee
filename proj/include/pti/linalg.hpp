#pragma once

#include <vector>

#include "pti/tensor.hpp"

namespace pti {

struct SvdResult {
    std::vector<double> singular_values;  // descending
    Matrix right_vectors;                 // columns are right singular vectors, cols x cols
};

// Right singular vectors and singular values of a (rows x cols) matrix via
// one-sided Jacobi rotations. Intended for small matrices (desk scale); cost
// grows with cols^2 * rows per sweep.
SvdResult svd_right(const Matrix& a);

}  // namespace pti
