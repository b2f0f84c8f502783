#pragma once

#include <vector>

#include "xmla/tensor.hpp"

namespace xmla {

// Truncated singular value decomposition a ~= u * diag(sigma) * vt with the
// r largest triplets kept. sigma is descending and nonnegative; u (m x r)
// has orthonormal columns, vt (r x n) orthonormal rows. The factorization is
// deterministic: the largest-magnitude entry of each left singular vector is
// forced nonnegative.
struct SvdResult {
    Tensor u;
    std::vector<double> sigma;
    Tensor vt;
};

// One-sided Jacobi on the smaller side, then truncation. Throws RankError
// unless 1 <= r <= min(m, n). Not taped (initialization-time only).
SvdResult svd_truncated(const Tensor& a, int64_t r);

// Full spectrum only, descending.
std::vector<double> singular_values(const Tensor& a);

// u * diag(sigma) * vt, handy for reconstruction checks and factor slicing.
Tensor svd_multiply_back(const SvdResult& svd);

// ||a - b||_F / ||a||_F
double relative_frobenius_error(const Tensor& a, const Tensor& b);

}  // namespace xmla
