#pragma once

#include <cstddef>

namespace matchformer::detail {

/// C[M,N] (+)= A[M,K] * B[K,N], all row-major and contiguous.
///
/// Every output element is accumulated in ascending k from its starting value,
/// independent of its position in the matrix, so a row's result does not
/// depend on which other rows share the call.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);

/// dst[cols, rows] = src[rows, cols]^T
void transpose_copy(std::size_t rows, std::size_t cols, const double* src, double* dst);

}  // namespace matchformer::detail
